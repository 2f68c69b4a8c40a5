"""Run directories, dataset manifests, transcript persistence, and replay.

A run directory is append-only: run.json (config snapshot, secrets redacted)
is written once at open, every artifact lands via atomic write-then-rename
and is indexed in artifacts.jsonl, and service calls stream to
transcripts/*.jsonl. replay() rebuilds gateway/backend/embedder/tokenizer
stand-ins that serve recorded responses by request digest and fail loudly on
anything unrecorded, so a run re-executes bit-identically offline.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .distill import (
    GeneratedSample,
    GenerationBackend,
    ImageEmbedder,
    PromptPair,
    SubjectImage,
    ImageCategory,
    TokenCounter,
)
from .gateway import ChatExchange, VlmGateway, VlmRole
from .latents import Latent, canonical_json, load_latents, save_latents

log = logging.getLogger(__name__)

# keys stripped before digesting, so wall-clock noise never enters run digests
VOLATILE_KEYS = frozenset(
    {"latency_ms", "timestamp", "created_at", "completed_at", "run_id", "elapsed_s"}
)


class RunStoreError(RuntimeError):
    """Run-directory violation: collision, overwrite, or broken reference."""


class ManifestError(ValueError):
    """Dataset manifest failed validation; message itemizes the problems."""


class ReplayMissError(RuntimeError):
    """A replayed pipeline issued a request that was never recorded."""

    def __init__(self, service: str, digest: str):
        self.service = service
        self.digest = digest
        super().__init__(f"no recorded transcript for {service} request {digest}")


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[SubjectImage, ...]
    counts: dict

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a dataset manifest; image paths resolve relative to it."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"manifest unreadable: {exc}") from exc
    entries_raw = raw.get("entries")
    if not isinstance(entries_raw, list) or not entries_raw:
        raise ManifestError("manifest must contain a non-empty 'entries' list")
    problems: list[str] = []
    seen: set[str] = set()
    entries: list[SubjectImage] = []
    for i, item in enumerate(entries_raw):
        try:
            entry_id = str(item["id"])
            category = ImageCategory(item["category"])
            img_path = (path.parent / item["path"]).resolve()
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"entry {i}: schema violation ({exc})")
            continue
        if entry_id in seen:
            problems.append(f"entry {i}: duplicate id {entry_id!r}")
            continue
        seen.add(entry_id)
        try:
            entries.append(SubjectImage.load(img_path, id=entry_id, category=category,
                                             gender_hint=item.get("gender_hint")))
        except Exception as exc:
            problems.append(f"entry {i} ({entry_id}): {exc}")
    if problems:
        raise ManifestError("manifest validation failed:\n  " + "\n  ".join(problems))
    counts = dict(Counter(e.category.value for e in entries))
    declared = raw.get("counts")
    if declared and {k: int(v) for k, v in declared.items()} != counts:
        raise ManifestError(f"declared counts {declared} != actual {counts}")
    return DatasetManifest(tuple(entries), counts)


# ---------------------------------------------------------------------------
# run records


def redact_secrets(config: dict) -> dict:
    def scrub(obj):
        if isinstance(obj, dict):
            return {
                k: ("<redacted>" if ("key" in k.lower() or "token" in k.lower()) and obj[k]
                    else scrub(v))
                for k, v in obj.items()
            }
        if isinstance(obj, list):
            return [scrub(v) for v in obj]
        return obj

    return scrub(config)


class RunRecord:
    """Handle on one append-only run directory."""

    def __init__(self, root: Path, run_id: str, config: dict):
        self.root = root
        self.run_id = run_id
        self.config = config

    # -- persistence primitives ------------------------------------------------

    def _target(self, relpath: str) -> Path:
        target = self.root / relpath
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def persist_bytes(self, relpath: str, data: bytes) -> str:
        """Atomic write; re-persisting identical bytes is a no-op."""
        target = self._target(relpath)
        if target.exists():
            if target.read_bytes() == data:
                return relpath
            raise RunStoreError(f"refusing to overwrite artifact {relpath}")
        tmp = target.with_name(target.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, target)
        self._index(relpath, data)
        return relpath

    def persist_json(self, relpath: str, obj) -> str:
        return self.persist_bytes(relpath, (canonical_json(obj) + "\n").encode("utf-8"))

    def persist_latents(self, relpath_base: str, latents, config_digest: str = "") -> str:
        base = self._target(relpath_base)
        header = base.with_suffix(".json")
        if header.exists():
            raise RunStoreError(f"refusing to overwrite artifact {relpath_base}")
        save_latents(base, latents, config_digest)
        for p in (base.with_suffix(".json"), base.with_suffix(".bin")):
            self._index(str(p.relative_to(self.root)), p.read_bytes())
        return relpath_base

    def persist_trajectory(self, relpath_base: str, trajectory) -> str:
        return self.persist_latents(relpath_base, list(trajectory.states),
                                    trajectory.config_digest)

    def append_jsonl(self, relpath: str, entry: dict) -> None:
        target = self._target(relpath)
        with target.open("a", encoding="utf-8") as fh:
            fh.write(canonical_json(entry) + "\n")

    def _index(self, relpath: str, data: bytes) -> None:
        if relpath == "artifacts.jsonl":
            return
        entry = {"relpath": relpath, "sha256": hashlib.sha256(data).hexdigest()}
        self.append_jsonl("artifacts.jsonl", entry)

    # -- service transcript sinks ----------------------------------------------

    def transcript_sink(self, name: str):
        relpath = f"transcripts/{name}.jsonl"

        def sink(entry: dict) -> None:
            self.append_jsonl(relpath, entry)

        return sink

    def close(self, status: str = "complete") -> None:
        """Write the terminal status record and verify the artifact index."""
        missing = [
            e["relpath"]
            for e in self._read_index()
            if not (self.root / e["relpath"]).exists()
        ]
        if missing:
            raise RunStoreError(f"indexed artifacts missing on disk: {missing}")
        self.persist_bytes(
            "status.json",
            (canonical_json({"status": status, "completed_at": _utcnow()}) + "\n").encode(),
        )

    def _read_index(self) -> list[dict]:
        index = self.root / "artifacts.jsonl"
        if not index.exists():
            return []
        return [json.loads(line) for line in index.read_text().splitlines() if line]


def _utcnow() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def open_run(config: dict, root: str | Path, run_id: Optional[str] = None) -> RunRecord:
    """Create a fresh run directory; an existing run_id is a collision error."""
    root = Path(root)
    snapshot = redact_secrets(config)
    if run_id is None:
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        digest = hashlib.sha256(canonical_json(snapshot).encode()).hexdigest()[:8]
        run_id = f"run-{stamp}-{digest}"
    run_dir = root / run_id
    if run_dir.exists():
        raise RunStoreError(f"run id collision: {run_dir} already exists")
    run_dir.mkdir(parents=True)
    record = RunRecord(run_dir, run_id, snapshot)
    record.persist_json(
        "run.json",
        {"run_id": run_id, "created_at": _utcnow(), "config": snapshot},
    )
    return record


def resume_run(run_dir: str | Path) -> RunRecord:
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
    return RunRecord(run_dir, meta["run_id"], meta.get("config", {}))


# ---------------------------------------------------------------------------
# run digests


def _canonical_without_volatile(obj):
    if isinstance(obj, dict):
        return {k: _canonical_without_volatile(v) for k, v in sorted(obj.items())
                if k not in VOLATILE_KEYS}
    if isinstance(obj, list):
        return [_canonical_without_volatile(v) for v in obj]
    return obj


def _file_digest(path: Path) -> str:
    data = path.read_bytes()
    if path.suffix in (".json", ".jsonl"):
        lines = []
        for line in data.decode("utf-8").splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            if isinstance(obj, dict) and obj.get("error"):
                continue  # failed attempts are not semantic content
            lines.append(canonical_json(_canonical_without_volatile(obj)))
        if path.suffix == ".jsonl":
            lines.sort()  # concurrent writers may interleave; order is not semantic
        data = "\n".join(lines).encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def run_digest(run_dir: str | Path) -> str:
    """Digest of all run artifacts, insensitive to timestamps and run ids."""
    run_dir = Path(run_dir)
    entries = []
    for path in sorted(run_dir.rglob("*")):
        if not path.is_file():
            continue
        entries.append((str(path.relative_to(run_dir)), _file_digest(path)))
    return hashlib.sha256(canonical_json(entries).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# service digests and recording wrappers


def service_digest(service: str, payload: dict) -> str:
    return hashlib.sha256(
        canonical_json({"service": service, **payload}).encode("utf-8")
    ).hexdigest()


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class RecordingBackend:
    """Wraps a generation backend, persisting outputs and logging transcripts."""

    def __init__(self, inner: GenerationBackend, run: RunRecord):
        self._inner = inner
        self._run = run
        self._sink = run.transcript_sink("backend")

    def generate(self, prompts: PromptPair, seed: int) -> GeneratedSample:
        digest = service_digest(
            "backend.generate",
            {"t512": prompts.t512, "t77": prompts.t77, "seed": seed},
        )
        sample = self._inner.generate(prompts, seed)
        image_rel = self._run.persist_bytes(
            f"images/gen_{digest[:16]}.png", Path(sample.image_path).read_bytes()
        )
        latent_rel = None
        if sample.latent is not None:
            latent_rel = self._run.persist_latents(
                f"latents/gen_{digest[:16]}", [sample.latent]
            )
        self._sink({"service": "backend.generate", "digest": digest,
                    "image": image_rel, "latent": latent_rel})
        return GeneratedSample(self._run.root / image_rel, sample.latent)

    def encode(self, image_path: Path) -> Latent:
        digest = service_digest("backend.encode", {"sha256": _sha256_file(image_path)})
        latent = self._inner.encode(image_path)
        latent_rel = self._run.persist_latents(f"latents/enc_{digest[:16]}", [latent])
        self._sink({"service": "backend.encode", "digest": digest, "latent": latent_rel})
        return latent

    def decode(self, latent: Latent) -> bytes:
        digest = service_digest("backend.decode", {"latent": latent.digest()})
        data = self._inner.decode(latent)
        image_rel = self._run.persist_bytes(f"images/dec_{digest[:16]}.png", data)
        self._sink({"service": "backend.decode", "digest": digest, "image": image_rel})
        return data

    def velocity_field(self, conditioning=None):
        inner = self._inner.velocity_field(conditioning)
        digest = service_digest(
            "backend.velocity_field", {"conditioning": _conditioning_key(conditioning)}
        )
        self._sink({"service": "backend.velocity_field", "digest": digest,
                    "descriptor": inner.descriptor()})
        return RecordingVelocityField(inner, self._sink)


def _conditioning_key(conditioning) -> Optional[dict]:
    if conditioning is None:
        return None
    return {
        "t512": getattr(conditioning, "t512", ""),
        "t77": getattr(conditioning, "t77", ""),
        "style_name": getattr(conditioning, "style_name", None),
    }


class RecordingVelocityField:
    """Logs every velocity evaluation so replay can serve it offline."""

    def __init__(self, inner, sink):
        self._inner = inner
        self._sink = sink

    def evaluate(self, state: Latent, t: float, conditioning=None, direction=None) -> Latent:
        digest = service_digest(
            "backend.velocity",
            {"state": state.digest(), "t": t,
             "direction": getattr(direction, "value", str(direction)),
             "conditioning": _conditioning_key(conditioning)},
        )
        velocity = self._inner.evaluate(state, t, conditioning, direction)
        self._sink({"service": "backend.velocity", "digest": digest,
                    "velocity": velocity.data.tolist(), "shape": list(velocity.shape)})
        return velocity

    def descriptor(self) -> dict:
        return self._inner.descriptor()


class RecordingEmbedder:
    def __init__(self, inner: ImageEmbedder, run: RunRecord):
        self._inner = inner
        self._sink = run.transcript_sink("embedder")

    def embed_image(self, path: Path, space: str) -> np.ndarray:
        digest = service_digest(
            "embedder.embed_image", {"sha256": _sha256_file(path), "space": space}
        )
        vector = np.asarray(self._inner.embed_image(path, space), dtype=np.float64)
        self._sink({"service": "embedder.embed_image", "digest": digest,
                    "vector": vector.tolist()})
        return vector

    def embed_text(self, text: str, space: str) -> np.ndarray:
        digest = service_digest("embedder.embed_text", {"text": text, "space": space})
        vector = np.asarray(self._inner.embed_text(text, space), dtype=np.float64)
        self._sink({"service": "embedder.embed_text", "digest": digest,
                    "vector": vector.tolist()})
        return vector


class RecordingTokenCounter:
    def __init__(self, inner: TokenCounter, run: RunRecord):
        self._inner = inner
        self._sink = run.transcript_sink("tokenizer")
        self.name = f"recorded({inner.name})"

    def count(self, text: str, kind: str) -> int:
        digest = service_digest("tokenizer.count", {"text": text, "kind": kind})
        n = self._inner.count(text, kind)
        self._sink({"service": "tokenizer.count", "digest": digest, "count": n})
        return n


# ---------------------------------------------------------------------------
# replay stand-ins


def _load_transcripts(run_dir: Path) -> dict[tuple[str, str], dict]:
    table: dict[tuple[str, str], dict] = {}
    for path in sorted((run_dir / "transcripts").glob("*.jsonl")):
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            if entry.get("error"):
                continue
            table[(entry["service"], entry["digest"])] = entry
    return table


class ReplayGateway(VlmGateway):
    """Serves recorded chat exchanges by request digest; no network."""

    def __init__(self, table, sink=None):
        super().__init__(client=httpx_client_stub(), transcript_sink=sink, backoff_s=0.0)
        self._table = table

    def _post(self, role: VlmRole, payload: dict) -> ChatExchange:
        from .gateway import request_digest

        digest = request_digest(payload)
        entry = self._table.get(("vlm", digest))
        if entry is None:
            raise ReplayMissError("vlm", digest)
        if self._sink is not None:
            self._sink(dict(entry))
        return ChatExchange(
            request=payload,
            response_text=entry["response_text"],
            latency_ms=int(entry.get("latency_ms", 0)),
            attempt=int(entry.get("attempt", 1)),
            request_digest=digest,
        )


def httpx_client_stub():
    import httpx

    def handler(request):  # pragma: no cover - replay never reaches transport
        raise AssertionError("replay gateway must not touch the network")

    return httpx.Client(transport=httpx.MockTransport(handler))


class ReplayBackend:
    """Serves recorded generation artifacts from the source run directory."""

    def __init__(self, table, source_root: Path):
        self._table = table
        self._source = source_root

    def _lookup(self, service: str, digest: str) -> dict:
        entry = self._table.get((service, digest))
        if entry is None:
            raise ReplayMissError(service, digest)
        return entry

    def generate(self, prompts: PromptPair, seed: int) -> GeneratedSample:
        digest = service_digest(
            "backend.generate",
            {"t512": prompts.t512, "t77": prompts.t77, "seed": seed},
        )
        entry = self._lookup("backend.generate", digest)
        latent = None
        if entry.get("latent"):
            latents, _ = load_latents(self._source / entry["latent"])
            latent = latents[0]
        return GeneratedSample(self._source / entry["image"], latent)

    def encode(self, image_path: Path) -> Latent:
        digest = service_digest("backend.encode", {"sha256": _sha256_file(image_path)})
        entry = self._lookup("backend.encode", digest)
        latents, _ = load_latents(self._source / entry["latent"])
        return latents[0]

    def decode(self, latent: Latent) -> bytes:
        digest = service_digest("backend.decode", {"latent": latent.digest()})
        entry = self._lookup("backend.decode", digest)
        return (self._source / entry["image"]).read_bytes()

    def velocity_field(self, conditioning=None):
        digest = service_digest(
            "backend.velocity_field", {"conditioning": _conditioning_key(conditioning)}
        )
        entry = self._lookup("backend.velocity_field", digest)
        return ReplayVelocityField(self._table, conditioning, entry["descriptor"])


class ReplayVelocityField:
    def __init__(self, table, conditioning, descriptor: dict):
        self._table = table
        self._conditioning = conditioning
        self._descriptor = descriptor

    def evaluate(self, state: Latent, t: float, conditioning=None, direction=None) -> Latent:
        digest = service_digest(
            "backend.velocity",
            {"state": state.digest(), "t": t,
             "direction": getattr(direction, "value", str(direction)),
             "conditioning": _conditioning_key(conditioning)},
        )
        entry = self._table.get(("backend.velocity", digest))
        if entry is None:
            raise ReplayMissError("backend.velocity", digest)
        return Latent(np.asarray(entry["velocity"], dtype=np.float64),
                      tuple(entry["shape"]))

    def descriptor(self) -> dict:
        return self._descriptor


class ReplayEmbedder:
    def __init__(self, table):
        self._table = table

    def embed_image(self, path: Path, space: str) -> np.ndarray:
        digest = service_digest(
            "embedder.embed_image", {"sha256": _sha256_file(path), "space": space}
        )
        entry = self._table.get(("embedder.embed_image", digest))
        if entry is None:
            raise ReplayMissError("embedder.embed_image", digest)
        return np.asarray(entry["vector"], dtype=np.float64)

    def embed_text(self, text: str, space: str) -> np.ndarray:
        digest = service_digest("embedder.embed_text", {"text": text, "space": space})
        entry = self._table.get(("embedder.embed_text", digest))
        if entry is None:
            raise ReplayMissError("embedder.embed_text", digest)
        return np.asarray(entry["vector"], dtype=np.float64)


class ReplayTokenCounter:
    name = "replay"

    def __init__(self, table):
        self._table = table

    def count(self, text: str, kind: str) -> int:
        digest = service_digest("tokenizer.count", {"text": text, "kind": kind})
        entry = self._table.get(("tokenizer.count", digest))
        if entry is None:
            raise ReplayMissError("tokenizer.count", digest)
        return int(entry["count"])


@dataclass
class ReplayServices:
    gateway: VlmGateway
    backend: object
    embedder: object
    counter: object
    source: Path


def replay(run_dir: str | Path, new_run: Optional[RunRecord] = None) -> ReplayServices:
    """Build transcript-backed service stand-ins for a recorded run.

    When new_run is given, every stand-in is wrapped in the same recording
    layer a live run uses, so the replayed directory re-persists identical
    artifacts and transcripts and reaches the same run digest.
    """
    run_dir = Path(run_dir)
    table = _load_transcripts(run_dir)
    sink = new_run.transcript_sink("vlm") if new_run is not None else None
    gateway = ReplayGateway(table, sink=sink)
    backend = ReplayBackend(table, run_dir)
    embedder = ReplayEmbedder(table)
    counter = ReplayTokenCounter(table)
    if new_run is not None:
        backend = RecordingBackend(backend, new_run)
        embedder = RecordingEmbedder(embedder, new_run)
        counter = RecordingTokenCounter(counter, new_run)
    return ReplayServices(gateway, backend, embedder, counter, run_dir)
