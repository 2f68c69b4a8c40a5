"""Identity distillation: dense attribute extraction, dual-prompt compression,
iterative refinement against generated candidates, and style transformation.

The loop is an explicit state machine over immutable snapshots: extract four
attribute texts, compress them into a long/short prompt pair under hard token
budgets, then repeatedly regenerate a candidate image, measure embedding
alignment with the original, and fold the comparator's corrections back in
until the alignment threshold or the round cap is hit.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, runtime_checkable

import numpy as np
from PIL import Image, UnidentifiedImageError

from .gateway import RoleName, TemplateName, VlmGateway, VlmInputError, VlmRole, load_template
from .latents import Latent, digest_of
from .metrics import cosine_score

log = logging.getLogger(__name__)

T512_BUDGET = 512
T77_BUDGET = 77
BUDGET_REASKS = 3
DEFAULT_TAU = 0.85
DEFAULT_MAX_ROUNDS = 4
VISION_LANGUAGE_SPACE = "vision-language"


class DistillError(RuntimeError):
    """Pipeline-stage failure carrying round/category context."""


class ExtractionError(DistillError):
    def __init__(self, category: str, cause: Exception):
        self.category = category
        super().__init__(f"attribute extraction failed for category {category!r}: {cause}")


class ImageCategory(str, enum.Enum):
    SINGLE_EVERYDAY = "single-everyday"
    MULTI_EVERYDAY = "multi-everyday"
    SINGLE_CELEBRITY = "single-celebrity"


@dataclass(frozen=True)
class SubjectImage:
    """One input photograph, validated to exist and decode."""

    id: str
    path: Path
    width: int
    height: int
    category: ImageCategory = ImageCategory.SINGLE_EVERYDAY
    gender_hint: Optional[str] = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise VlmInputError(f"image {self.id!r} has invalid dimensions")

    @classmethod
    def load(cls, path: str | Path, id: Optional[str] = None,
             category: ImageCategory = ImageCategory.SINGLE_EVERYDAY,
             gender_hint: Optional[str] = None) -> "SubjectImage":
        path = Path(path)
        try:
            with Image.open(path) as im:
                width, height = im.size
        except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
            raise VlmInputError(f"cannot read image {path}: {exc}") from exc
        return cls(id or path.stem, path, width, height, category, gender_hint)


@dataclass(frozen=True)
class AttributeBundle:
    """Four per-category attribute texts plus append-only refinement deltas."""

    face: str
    attire: str
    pose: str
    scene: str
    deltas: tuple[str, ...] = ()
    round_added: tuple[int, ...] = ()

    def __post_init__(self):
        for name in ("face", "attire", "pose", "scene"):
            if not getattr(self, name).strip():
                raise ValueError(f"attribute text {name!r} is empty")
        if len(self.deltas) != len(self.round_added):
            raise ValueError("deltas and round_added must align")

    def with_delta(self, delta: str, round_no: int) -> "AttributeBundle":
        return dataclasses.replace(
            self,
            deltas=self.deltas + (delta,),
            round_added=self.round_added + (round_no,),
        )

    def full_text(self) -> str:
        """Concatenation of the base texts and all accumulated deltas."""
        return "\n\n".join([self.face, self.attire, self.pose, self.scene, *self.deltas])

    def digest(self) -> str:
        return digest_of({
            "face": self.face, "attire": self.attire,
            "pose": self.pose, "scene": self.scene,
            "deltas": list(self.deltas),
        })


@dataclass(frozen=True)
class PromptPair:
    """Long/short prompt pair with measured token counts under hard budgets."""

    t512: str
    t77: str
    t512_tokens: int
    t77_tokens: int
    styled: bool = False
    style_name: Optional[str] = None
    truncated: bool = False

    def __post_init__(self):
        if self.t512_tokens > T512_BUDGET:
            raise ValueError(f"t512 measures {self.t512_tokens} tokens, budget {T512_BUDGET}")
        if self.t77_tokens > T77_BUDGET:
            raise ValueError(f"t77 measures {self.t77_tokens} tokens, budget {T77_BUDGET}")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


class StopReason(str, enum.Enum):
    THRESHOLD = "threshold"
    MAX_ROUNDS = "max_rounds"


@dataclass(frozen=True)
class DistillationState:
    """Immutable snapshot of the refinement loop after a given round."""

    round: int
    bundle: AttributeBundle
    prompts: PromptPair
    candidate: Optional[Path] = None
    alignment: Optional[float] = None
    stop_reason: Optional[StopReason] = None

    def __post_init__(self):
        if (self.candidate is None) != (self.alignment is None):
            raise ValueError("alignment must be present exactly when a candidate is")

    def record(self) -> dict:
        return {
            "round": self.round,
            "bundle_digest": self.bundle.digest(),
            "prompts": self.prompts.as_dict(),
            "alignment": self.alignment,
            "stop_reason": self.stop_reason.value if self.stop_reason else None,
            "candidate": str(self.candidate) if self.candidate else None,
        }

    def digest(self) -> str:
        return digest_of(self.record())


@dataclass(frozen=True)
class DistillConfig:
    """Loop controls: alignment threshold, round cap, and base seed."""

    tau: float = DEFAULT_TAU
    max_rounds: int = DEFAULT_MAX_ROUNDS
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.max_rounds < 1:
            raise ValueError(f"max_rounds must be >= 1, got {self.max_rounds}")


@runtime_checkable
class TokenCounter(Protocol):
    """Tokenizer oracle the prompt budgets are measured against."""

    name: str

    def count(self, text: str, kind: str) -> int: ...


class HeuristicTokenCounter:
    """Word/punctuation token counter used when no tokenizer service is wired."""

    name = "heuristic-wordpunct"
    _tokens = re.compile(r"\w+|[^\w\s]")

    def count(self, text: str, kind: str) -> int:
        return len(self._tokens.findall(text))


@dataclass(frozen=True)
class GeneratedSample:
    """Backend output for one candidate generation."""

    image_path: Path
    latent: Optional[Latent] = None


@runtime_checkable
class GenerationBackend(Protocol):
    def generate(self, prompts: "PromptPair", seed: int) -> GeneratedSample: ...


@runtime_checkable
class ImageEmbedder(Protocol):
    def embed_image(self, path: Path, space: str) -> np.ndarray: ...


def derive_seed(base_seed: int, subject_id: str, round_no: int) -> int:
    """Stable per-(subject, round) generation seed."""
    digest = hashlib.sha256(f"{base_seed}:{subject_id}:{round_no}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def parse_dual_prompts(text: str) -> tuple[str, str]:
    """Extract (t512, t77) from a compressor/styler response.

    Accepts a JSON object with t512/t77 keys, or the labeled two-section
    format the combine template demands.
    """
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            obj = json.loads(stripped)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict) and obj.get("t512") and obj.get("t77"):
            return str(obj["t512"]).strip(), str(obj["t77"]).strip()
    t5 = re.search(r"T5[^\n]*?:", text)
    clip = re.search(r"CLIP[^\n]*?:", text)
    if t5 and clip and t5.end() < clip.start():
        t512 = text[t5.end():clip.start()].strip()
        t77 = text[clip.end():].strip()
        if t512 and t77:
            return t512, t77
    raise ValueError("expected JSON {t512, t77} or labeled T5/CLIP sections")


def truncate_to_budget(text: str, kind: str, budget: int, counter: TokenCounter) -> str:
    """Longest prefix of text measuring within budget under the counter.

    Bisects on whitespace chunks first, then on characters when even a single
    chunk is over budget.
    """
    if counter.count(text, kind) <= budget:
        return text
    chunks = text.split()
    lo, hi = 0, len(chunks)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if counter.count(" ".join(chunks[:mid]), kind) <= budget:
            lo = mid
        else:
            hi = mid - 1
    if lo > 0:
        return " ".join(chunks[:lo])
    # single oversized chunk: fall back to character bisection
    lo, hi = 0, len(text)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if counter.count(text[:mid], kind) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return text[:lo]


def _measure(t512: str, t77: str, counter: TokenCounter) -> tuple[int, int]:
    return counter.count(t512, "t5"), counter.count(t77, "clip")


def _budgeted_pair(
    t512: str,
    t77: str,
    counter: TokenCounter,
    reask,
    styled: bool = False,
    style_name: Optional[str] = None,
) -> PromptPair:
    """Enforce token budgets: up to BUDGET_REASKS re-asks, then hard truncation."""
    n512, n77 = _measure(t512, t77, counter)
    attempts = 0
    while (n512 > T512_BUDGET or n77 > T77_BUDGET) and attempts < BUDGET_REASKS:
        attempts += 1
        t512, t77 = reask(n512, n77)
        n512, n77 = _measure(t512, t77, counter)
    truncated = False
    if n512 > T512_BUDGET or n77 > T77_BUDGET:
        log.warning(
            "prompt budgets still violated after %d re-asks (%d/%d tokens); truncating",
            attempts, n512, n77,
        )
        t512 = truncate_to_budget(t512, "t5", T512_BUDGET, counter)
        t77 = truncate_to_budget(t77, "clip", T77_BUDGET, counter)
        n512, n77 = _measure(t512, t77, counter)
        truncated = True
    return PromptPair(t512, t77, n512, n77, styled=styled, style_name=style_name,
                      truncated=truncated)


_CATEGORY_TEMPLATES = (
    ("face", TemplateName.FACE),
    ("attire", TemplateName.ATTIRE),
    ("pose", TemplateName.POSE),
    ("scene", TemplateName.SCENE),
)


def extract_attributes(image: SubjectImage, gateway: VlmGateway, extractor: VlmRole) -> AttributeBundle:
    """Four extraction rounds (face, attire, pose, scene) over the image."""
    if not Path(image.path).is_file():
        raise VlmInputError(f"image not readable: {image.path}")
    texts = {}
    for category, template_name in _CATEGORY_TEMPLATES:
        template = load_template(template_name)
        try:
            exchange = gateway.complete(extractor, template, {}, [image.path])
        except Exception as exc:
            raise ExtractionError(category, exc) from exc
        texts[category] = exchange.response_text
    return AttributeBundle(**texts)


def _budget_note(description: str, n512: int, n77: int) -> str:
    return (
        f"{description}\n\n[Budget check: the previous answer measured {n512} tokens"
        f" for the T5 prompt (max {T512_BUDGET}) and {n77} tokens for the CLIP prompt"
        f" (max {T77_BUDGET}). Compress further so both fit.]"
    )


def compress(
    bundle: AttributeBundle,
    gateway: VlmGateway,
    compressor: VlmRole,
    counter: TokenCounter,
) -> PromptPair:
    """One combine call over the concatenated attribute texts, budget-enforced."""
    template = load_template(TemplateName.COMBINE)
    description = bundle.full_text()
    repair = 'Return only JSON: {"t512": "...", "t77": "..."}'
    (t512, t77), _ = gateway.complete_parsed(
        compressor, template, {"description": description}, [], parse_dual_prompts, repair,
    )

    def reask(n512: int, n77: int) -> tuple[str, str]:
        noted = _budget_note(description, n512, n77)
        (a, b), _ = gateway.complete_parsed(
            compressor, template, {"description": noted}, [], parse_dual_prompts, repair,
        )
        return a, b

    return _budgeted_pair(t512, t77, counter, reask)


def refine_once(
    image: SubjectImage,
    state: DistillationState,
    gateway: VlmGateway,
    compressor: VlmRole,
    comparator: VlmRole,
    backend: GenerationBackend,
    embedder: ImageEmbedder,
    counter: TokenCounter,
    cfg: DistillConfig,
) -> DistillationState:
    """One feedback round: regenerate, measure alignment, fold corrections back.

    Raises with round context on backend/embedder failure; the incoming state
    is never mutated.
    """
    round_no = state.round + 1
    try:
        sample = backend.generate(state.prompts, seed=derive_seed(cfg.seed, image.id, round_no))
        ref_vec = embedder.embed_image(image.path, VISION_LANGUAGE_SPACE)
        cand_vec = embedder.embed_image(sample.image_path, VISION_LANGUAGE_SPACE)
    except Exception as exc:
        raise DistillError(f"refine round {round_no} failed: {exc}") from exc
    alignment = cosine_score(ref_vec, cand_vec)
    diff_template = load_template(TemplateName.DIFF)
    exchange = gateway.complete(comparator, diff_template, {}, [image.path, sample.image_path])
    delta = exchange.response_text.strip()
    bundle = state.bundle.with_delta(delta, round_no) if delta else state.bundle
    prompts = compress(bundle, gateway, compressor, counter)
    return DistillationState(
        round=round_no,
        bundle=bundle,
        prompts=prompts,
        candidate=sample.image_path,
        alignment=alignment,
    )


def distill(
    image: SubjectImage,
    cfg: DistillConfig,
    gateway: VlmGateway,
    extractor: VlmRole,
    compressor: VlmRole,
    comparator: VlmRole,
    backend: GenerationBackend,
    embedder: ImageEmbedder,
    counter: TokenCounter,
    run=None,
) -> DistillationState:
    """Full loop: extract, compress, refine until alignment >= tau or round cap.

    Every per-round state is persisted when a run record is supplied, so a
    failed run can resume from its last snapshot.
    """
    bundle = extract_attributes(image, gateway, extractor)
    prompts = compress(bundle, gateway, compressor, counter)
    state = DistillationState(round=0, bundle=bundle, prompts=prompts)
    if run is not None:
        run.persist_json(f"states/{image.id}_round_0.json", state.record())
    while True:
        state = refine_once(image, state, gateway, compressor, comparator,
                            backend, embedder, counter, cfg)
        stop = None
        if state.alignment is not None and state.alignment >= cfg.tau:
            stop = StopReason.THRESHOLD
        elif state.round >= cfg.max_rounds:
            stop = StopReason.MAX_ROUNDS
        if stop is not None:
            state = dataclasses.replace(state, stop_reason=stop)
        if run is not None:
            run.persist_json(f"states/{image.id}_round_{state.round}.json", state.record())
        if stop is not None:
            return state


def stylize_prompts(
    pair: PromptPair,
    style,
    gateway: VlmGateway,
    styler: VlmRole,
    counter: TokenCounter,
) -> PromptPair:
    """Adapt the identity prompts to a style, re-enforcing token budgets."""
    style_name = getattr(style, "name", style)
    if not str(style_name).strip():
        raise VlmInputError("style name must be non-empty")
    template = load_template(TemplateName.STYLIZE)
    subs = {"style_name": str(style_name), "t512": pair.t512, "t77": pair.t77}
    repair = 'Return only JSON: {"t512": "...", "t77": "..."}'
    (t512, t77), _ = gateway.complete_parsed(styler, template, subs, [], parse_dual_prompts, repair)

    def reask(n512: int, n77: int) -> tuple[str, str]:
        noted = dict(subs)
        noted["t512"] = _budget_note(subs["t512"], n512, n77)
        (a, b), _ = gateway.complete_parsed(
            styler, template, noted, [], parse_dual_prompts, repair,
        )
        return a, b

    return _budgeted_pair(t512, t77, counter, reask, styled=True, style_name=str(style_name))
