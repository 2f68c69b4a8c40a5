"""End-to-end pipelines wiring the modules together for the CLI.

Every pipeline runs against a Services bundle (gateway + backend + embedder +
tokenizer); live runs get sidecar-backed services wrapped in recorders,
replays get transcript-backed stand-ins wrapped in the same recorders, so
both paths exercise identical code.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import httpx
import numpy as np

from .config import ConfigError, EngineConfig
from .distill import (
    DistillConfig,
    PromptPair,
    SubjectImage,
    derive_seed,
    distill,
    stylize_prompts,
)
from .flow import InversionConfig, cross_domain_reversal
from .gateway import RateLimiter, RoleName, VlmGateway
from .metrics import FeatureSet, cosine_score, kid
from .runstore import (
    RecordingBackend,
    RecordingEmbedder,
    RecordingTokenCounter,
    RunRecord,
    open_run,
    replay,
    run_digest,
)
from .scheduler import describe_style, select_schedule
from .sidecar_client import SidecarClient
from .stylebench import (
    StyleBenchRecord,
    aggregate,
    evaluate_pair,
    report_html,
    report_markdown,
)

log = logging.getLogger(__name__)

INCEPTION_SPACE = "inception"
VISION_LANGUAGE_SPACE = "vision-language"


@dataclass
class Services:
    gateway: VlmGateway
    backend: object
    embedder: object
    counter: object


def live_services(cfg: EngineConfig, run: RunRecord) -> Services:
    """Sidecar-backed services wrapped in transcript recorders."""
    if not cfg.sidecar_url:
        raise ConfigError("sidecar_url is required for live pipeline runs")
    limiter = RateLimiter(cfg.rate_limit_rpm) if cfg.rate_limit_rpm > 0 else None
    gateway = VlmGateway(transcript_sink=run.transcript_sink("vlm"), rate_limiter=limiter)
    sidecar = SidecarClient(cfg.sidecar_url, generation_steps=cfg.generation_steps)
    return Services(
        gateway=gateway,
        backend=RecordingBackend(sidecar, run),
        embedder=RecordingEmbedder(sidecar, run),
        counter=RecordingTokenCounter(sidecar, run),
    )


def replay_services(source_dir: Path, run: RunRecord) -> Services:
    stand_ins = replay(source_dir, run)
    return Services(
        gateway=stand_ins.gateway,
        backend=stand_ins.backend,
        embedder=stand_ins.embedder,
        counter=stand_ins.counter,
    )


def run_distill_pipeline(
    cfg: EngineConfig,
    run: RunRecord,
    services: Services,
    image_path: Path,
    subject_id: Optional[str] = None,
):
    """Identity distillation for one subject; returns the final state."""
    image = SubjectImage.load(image_path, id=subject_id)
    run.persist_bytes(f"images/reference_{image.id}.png", Path(image_path).read_bytes())
    dcfg = DistillConfig(tau=cfg.tau, max_rounds=cfg.max_rounds, seed=cfg.seed)
    state = distill(
        image,
        dcfg,
        services.gateway,
        cfg.role(RoleName.EXTRACTOR),
        cfg.role(RoleName.COMPRESSOR),
        cfg.role(RoleName.COMPARATOR),
        services.backend,
        services.embedder,
        services.counter,
        run=run,
    )
    return state


def run_stylize_pipeline(
    cfg: EngineConfig,
    run: RunRecord,
    services: Services,
    image_path: Path,
    style_name: str,
    subject_id: Optional[str] = None,
) -> dict:
    """Full pipeline: distill, stylize prompts, schedule, generate, reverse.

    Returns a summary dict of the persisted artifact paths.
    """
    image = SubjectImage.load(image_path, id=subject_id)
    ref_rel = run.persist_bytes(
        f"images/reference_{image.id}.png", Path(image_path).read_bytes()
    )
    state = run_distill_pipeline(cfg, run, services, image_path, subject_id=image.id)

    style = describe_style(style_name)
    styled = stylize_prompts(
        state.prompts, style, services.gateway, cfg.role(RoleName.STYLER), services.counter
    )
    decision = select_schedule(style, services.gateway, cfg.role(RoleName.SCHEDULER))
    run.persist_json(f"schedule_{image.id}.json", decision.as_dict())

    ys_sample = services.backend.generate(
        styled, seed=derive_seed(cfg.seed, f"{image.id}:styled", 0)
    )
    if ys_sample.latent is None:
        raise RuntimeError("generation backend returned no latent for the stylized sample")
    y_s = ys_sample.latent
    y_r = services.backend.encode(image.path)
    field = services.backend.velocity_field(styled)
    final_latent = cross_domain_reversal(
        y_s,
        y_r,
        field,
        InversionConfig(cfg.gamma, cfg.inversion_steps, cfg.time_epsilon),
        decision.window,
        gen_steps=cfg.generation_steps,
        styled=styled,
        seed=derive_seed(cfg.seed, f"{image.id}:noise", 0),
        run=run,
        artifact_prefix=f"latents/{image.id}",
    )
    final_png = services.backend.decode(final_latent)
    final_rel = run.persist_bytes(f"images/final_{image.id}.png", final_png)
    run.persist_json(
        f"prompts_{image.id}.json",
        {"identity": state.prompts.as_dict(), "styled": styled.as_dict()},
    )
    pair = {
        "subject_id": image.id,
        "reference": ref_rel,
        "generated": final_rel,
        "style_prompt": style_name,
    }
    run.append_jsonl("pairs.jsonl", pair)
    return pair


def _load_pairs(run_dir: Path) -> list[dict]:
    pairs_path = run_dir / "pairs.jsonl"
    if not pairs_path.exists():
        return []
    return [json.loads(line) for line in pairs_path.read_text().splitlines() if line.strip()]


def run_evaluate_pipeline(
    cfg: EngineConfig,
    run_dir: Path,
    run: RunRecord,
    gateway: VlmGateway,
    embedder,
    ratings_csv: Optional[Path] = None,
) -> dict:
    """Judge every stored pair, compute KID and cosine scores, emit reports."""
    pairs = _load_pairs(run_dir)
    if not pairs:
        raise ValueError(f"no judged pairs recorded under {run_dir}")
    judge = cfg.role(RoleName.JUDGE)
    records: list[StyleBenchRecord] = []
    for pair in pairs:
        records.append(
            evaluate_pair(
                run_dir / pair["reference"],
                run_dir / pair["generated"],
                pair["style_prompt"],
                judge,
                gateway,
                run=run,
            )
        )

    kid_estimate = None
    clip_image = None
    clip_text = None
    if embedder is not None:
        ref_vecs = [embedder.embed_image(run_dir / p["reference"], INCEPTION_SPACE) for p in pairs]
        gen_vecs = [embedder.embed_image(run_dir / p["generated"], INCEPTION_SPACE) for p in pairs]
        if len(pairs) >= 2:
            dim = len(ref_vecs[0])
            kid_estimate = kid(
                FeatureSet(np.asarray(ref_vecs), dim, "reference"),
                FeatureSet(np.asarray(gen_vecs), dim, "generated"),
                seed=cfg.seed,
            )
        else:
            log.info("skipping KID: need at least 2 pairs, have %d", len(pairs))
        vl_ref = [embedder.embed_image(run_dir / p["reference"], VISION_LANGUAGE_SPACE) for p in pairs]
        vl_gen = [embedder.embed_image(run_dir / p["generated"], VISION_LANGUAGE_SPACE) for p in pairs]
        clip_image = float(np.mean([cosine_score(a, b) for a, b in zip(vl_ref, vl_gen)]))
        try:
            vl_style = [embedder.embed_text(p["style_prompt"], VISION_LANGUAGE_SPACE) for p in pairs]
            clip_text = float(np.mean([cosine_score(a, b) for a, b in zip(vl_gen, vl_style)]))
        except NotImplementedError:
            clip_text = None

    report = aggregate(records, ratings_csv, kid_estimate, clip_image, clip_text)
    judged = [dict(p, score=r.score) for p, r in zip(pairs, records)]
    run.persist_json("report/report.json", report.as_dict())
    run.persist_bytes("report/report.md", report_markdown(report).encode("utf-8"))
    run.persist_bytes("report/report.html", report_html(report, judged).encode("utf-8"))
    return report.as_dict()


def run_replay_pipeline(cfg: EngineConfig, source_dir: Path, new_root: Path) -> dict:
    """Re-execute a recorded run offline and compare run digests."""
    source_dir = Path(source_dir)
    meta = json.loads((source_dir / "run.json").read_text(encoding="utf-8"))
    recorded = meta.get("config", {})
    invocation = recorded.get("invocation", {})
    command = invocation.get("command")
    if command not in ("distill", "stylize"):
        raise ValueError(f"run {source_dir.name} records no replayable invocation")
    replay_cfg = EngineConfig(**{
        k: v for k, v in recorded.items()
        if k in EngineConfig().as_dict() and not k.endswith("_key")
    })
    new_run = open_run(recorded, new_root, run_id=f"{source_dir.name}-replay")
    services = replay_services(source_dir, new_run)
    subject_id = invocation["subject_id"]
    image_path = source_dir / f"images/reference_{subject_id}.png"
    if command == "distill":
        run_distill_pipeline(replay_cfg, new_run, services, image_path, subject_id)
    else:
        run_stylize_pipeline(
            replay_cfg, new_run, services, image_path,
            invocation["style"], subject_id,
        )
    new_run.close()
    return {
        "source": str(source_dir),
        "replayed": str(new_run.root),
        "source_digest": run_digest(source_dir),
        "replay_digest": run_digest(new_run.root),
    }
