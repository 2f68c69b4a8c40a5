"""Command-line surface for the stylization engine.

Subcommands: distill, stylize, invert, reverse, evaluate, report, replay,
sidecar-check. Exit codes: 0 success, 1 validation/usage error, 2 runtime
error. Every subcommand supports --dry-run, which validates configuration and
prints the planned work without any network traffic.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, EngineConfig, resolve_config
from .distill import SubjectImage
from .flow import (
    Direction,
    InversionConfig,
    ScheduleWindow,
    gaussian_pair_field,
    generate,
    invert,
    point_target_field,
    sample_noise_latent,
)
from .gateway import VlmGateway, VlmInputError
from .latents import Latent, load_latent
from .metrics import KidEstimate
from .pipeline import (
    live_services,
    run_distill_pipeline,
    run_evaluate_pipeline,
    run_replay_pipeline,
    run_stylize_pipeline,
)
from .runstore import (
    ManifestError,
    RunStoreError,
    load_manifest,
    open_run,
    resume_run,
    run_digest,
)
from .stylebench import StyleBenchRecord, aggregate, report_markdown

log = logging.getLogger(__name__)


class CliParser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> CliParser:
    parser = CliParser(prog="styledistill", description=__doc__)
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--run-root", dest="run_root", help="directory holding run records")
    parser.add_argument("--seed", type=int, help="base seed for all derived seeds")
    parser.add_argument("--jobs", type=int, help="subject-level parallelism")
    parser.add_argument("--dry-run", action="store_true", help="validate and plan only")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distill", parents=[], help="identity distillation for one image")
    p.add_argument("image", help="subject image path")
    p.add_argument("--subject-id", help="stable subject id (default: file stem)")

    p = sub.add_parser("stylize", help="full pipeline: distill, stylize, reverse")
    p.add_argument("image", nargs="?", help="subject image path")
    p.add_argument("--style", required=True, help='target style, e.g. "knitted doll"')
    p.add_argument("--subject-id")
    p.add_argument("--manifest", help="dataset manifest; stylize every entry")

    for name in ("invert", "reverse"):
        p = sub.add_parser(name, help=f"{name} latents over analytic or stored fields")
        p.add_argument("--field", choices=["point", "gaussian"], default="point")
        p.add_argument("--target", type=float, default=1.0, help="point-field attractor value")
        p.add_argument("--mu", type=float, default=1.0)
        p.add_argument("--sigma", type=float, default=0.5)
        p.add_argument("--dim", type=int, default=1)
        p.add_argument("--steps", type=int)
        p.add_argument("--latent", help="stored latent base path (JSON+bin pair)")
        p.add_argument("--eta", type=float, default=0.0)
        p.add_argument("--start", type=float, default=0.0)
        p.add_argument("--stop", type=float, default=1.0)
        p.add_argument("--gamma", type=float)

    p = sub.add_parser("evaluate", help="judge a run's pairs and emit reports")
    p.add_argument("run", help="run id (under --run-root) or run directory")
    p.add_argument("--ratings", help="human ratings CSV (image_id, annotator_id, rating)")

    p = sub.add_parser("report", help="re-render reports from stored scores")
    p.add_argument("run")
    p.add_argument("--ratings")

    p = sub.add_parser("replay", help="re-execute a recorded run offline")
    p.add_argument("run")

    sub.add_parser("sidecar-check", help="probe the sidecar /health endpoint")
    return parser


def _resolve_run_dir(cfg: EngineConfig, run_arg: str) -> Path:
    candidate = Path(run_arg)
    if candidate.is_dir():
        return candidate
    candidate = Path(cfg.run_root) / run_arg
    if candidate.is_dir():
        return candidate
    raise VlmInputError(f"run directory not found: {run_arg}")


def _flag_overrides(args: argparse.Namespace) -> dict:
    return {
        "run_root": args.run_root,
        "seed": args.seed,
        "jobs": args.jobs,
    }


def _invocation(args: argparse.Namespace, subjects: list[dict]) -> dict:
    return {
        "command": args.command,
        "subjects": subjects,
        "style": getattr(args, "style", None),
    }


def _cmd_distill(cfg: EngineConfig, args) -> int:
    image = SubjectImage.load(args.image, id=args.subject_id)
    if args.dry_run:
        print(f"plan: distill {image.id} ({image.width}x{image.height}), "
              f"tau={cfg.tau} max_rounds={cfg.max_rounds} seed={cfg.seed}")
        print("calls: 4x extractor, 1+ compressor, per-round backend/embedder/comparator")
        return 0
    config = dict(cfg.as_dict(), invocation=_invocation(args, [{"subject_id": image.id}]))
    run = open_run(config, cfg.run_root)
    services = live_services(cfg, run)
    state = run_distill_pipeline(cfg, run, services, Path(args.image), image.id)
    run.close()
    print(f"run: {run.run_id}")
    print(f"stopped: {state.stop_reason.value} after round {state.round}, "
          f"alignment {state.alignment:.4f}")
    print(f"digest: {run_digest(run.root)}")
    return 0


def _cmd_stylize(cfg: EngineConfig, args) -> int:
    if bool(args.image) == bool(args.manifest):
        raise VlmInputError("provide exactly one of <image> or --manifest")
    if args.manifest:
        manifest = load_manifest(args.manifest)
        subjects = [(e.path, e.id) for e in manifest.entries]
    else:
        image = SubjectImage.load(args.image, id=args.subject_id)
        subjects = [(Path(args.image), image.id)]
    if args.dry_run:
        print(f"plan: stylize {len(subjects)} subject(s) into style {args.style!r}, "
              f"jobs={cfg.jobs}")
        for _, sid in subjects:
            print(f"  {sid}: distill -> stylize prompts -> schedule -> generate -> "
                  f"encode -> invert({cfg.inversion_steps}) -> reverse({cfg.generation_steps})")
        return 0
    config = dict(
        cfg.as_dict(),
        invocation=_invocation(args, [{"subject_id": sid} for _, sid in subjects]),
    )
    run = open_run(config, cfg.run_root)
    services = live_services(cfg, run)

    def one(pair):
        path, sid = pair
        return run_stylize_pipeline(cfg, run, services, path, args.style, sid)

    if cfg.jobs > 1 and len(subjects) > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(one, subjects))
    else:
        results = [one(s) for s in subjects]
    run.close()
    print(f"run: {run.run_id}")
    for result in results:
        print(f"  {result['subject_id']}: {result['generated']}")
    print(f"digest: {run_digest(run.root)}")
    return 0


def _load_axis_latent(args, value: float) -> Latent:
    if args.latent:
        return load_latent(args.latent)
    return Latent(np.full(args.dim, value, dtype=np.float64))


def _cmd_flow(cfg: EngineConfig, args) -> int:
    if args.field == "point":
        target = Latent(np.full(args.dim, args.target, dtype=np.float64))
        field = point_target_field(target, cfg.time_epsilon)
    else:
        field = gaussian_pair_field(args.mu, args.sigma, args.dim)
    if args.dry_run:
        print(f"plan: {args.command} over {args.field} field, dim={args.dim}")
        return 0
    if args.command == "invert":
        steps = args.steps or cfg.inversion_steps
        y_s = _load_axis_latent(args, 0.0)
        y_1 = sample_noise_latent(y_s.shape, cfg.seed)
        gamma = cfg.gamma if args.gamma is None else args.gamma
        traj = invert(y_s, y_1, field, InversionConfig(gamma, steps, cfg.time_epsilon))
    else:
        steps = args.steps or cfg.generation_steps
        y_init = _load_axis_latent(args, 0.0)
        y_r = Latent(np.full(args.dim, args.target, dtype=np.float64))
        window = ScheduleWindow(args.eta, args.start, args.stop)
        traj = generate(y_init, y_r, field, window, steps, time_epsilon=cfg.time_epsilon)
    terminal = traj.terminal.data
    print(" ".join(f"{v:.10g}" for v in terminal))
    return 0


def _cmd_evaluate(cfg: EngineConfig, args) -> int:
    run_dir = _resolve_run_dir(cfg, args.run)
    if args.dry_run:
        print(f"plan: judge pairs under {run_dir}, then KID + cosine scores")
        return 0
    run = resume_run(run_dir)
    gateway = VlmGateway(transcript_sink=run.transcript_sink("vlm"))
    embedder = None
    if cfg.sidecar_url:
        from .sidecar_client import SidecarClient

        embedder = SidecarClient(cfg.sidecar_url)
    report = run_evaluate_pipeline(
        cfg, run_dir, run, gateway, embedder,
        ratings_csv=Path(args.ratings) if args.ratings else None,
    )
    print(json.dumps(report, indent=2))
    return 0


def _read_score_records(run_dir: Path) -> list[StyleBenchRecord]:
    scores = run_dir / "scores" / "stylebench.jsonl"
    if not scores.exists():
        raise VlmInputError(f"no stylebench scores under {run_dir}")
    records = []
    for line in scores.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        records.append(StyleBenchRecord(**obj))
    return records


def _cmd_report(cfg: EngineConfig, args) -> int:
    run_dir = _resolve_run_dir(cfg, args.run)
    if args.dry_run:
        print(f"plan: aggregate scores under {run_dir}")
        return 0
    records = _read_score_records(run_dir)
    existing = run_dir / "report" / "report.json"
    kid_estimate = None
    clip_image = clip_text = None
    if existing.exists():
        stored = json.loads(existing.read_text(encoding="utf-8"))
        clip_image, clip_text = stored.get("clip_image"), stored.get("clip_text")
        if stored.get("kid"):
            kid_estimate = KidEstimate(
                value=stored["kid"]["value"], subset_size=stored["kid"]["subset_size"],
                n_subsets=stored["kid"]["n_subsets"], std_error=stored["kid"]["std_error"],
                seed=cfg.seed,
            )
    report = aggregate(
        records,
        ratings_csv=Path(args.ratings) if args.ratings else None,
        kid=kid_estimate,
        clip_image=clip_image,
        clip_text=clip_text,
    )
    print(report_markdown(report, title=f"Evaluation: {run_dir.name}"))
    return 0


def _cmd_replay(cfg: EngineConfig, args) -> int:
    run_dir = _resolve_run_dir(cfg, args.run)
    if args.dry_run:
        print(f"plan: replay {run_dir} from transcripts into {cfg.run_root}")
        return 0
    result = run_replay_pipeline(cfg, run_dir, Path(cfg.run_root))
    match = result["source_digest"] == result["replay_digest"]
    print(json.dumps(dict(result, digests_match=match), indent=2))
    return 0 if match else 2


def _cmd_sidecar_check(cfg: EngineConfig, args) -> int:
    if not cfg.sidecar_url:
        raise ConfigError("SIDECAR_URL is not configured")
    if args.dry_run:
        print(f"plan: GET {cfg.sidecar_url}/health")
        return 0
    from .sidecar_client import SidecarClient

    health = SidecarClient(cfg.sidecar_url).health()
    print(json.dumps(health, indent=2))
    return 0


_HANDLERS = {
    "distill": _cmd_distill,
    "stylize": _cmd_stylize,
    "invert": _cmd_flow,
    "reverse": _cmd_flow,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
    "replay": _cmd_replay,
    "sidecar-check": _cmd_sidecar_check,
}


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(_flag_overrides(args), config_file=args.config)
        return _HANDLERS[args.command](cfg, args)
    except (ConfigError, VlmInputError, ManifestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
