"""Judge protocol for stylized abstraction: request assembly, score parsing,
aggregation, and Table-style reporting with optional human-rating ingestion.

A judge model receives the reference image, the generated image, and the
style prompt, and must answer with a bare integer score from 0 to 4. Records
stream to a run's scores log; aggregation is a pure, order-invariant fold.
"""

from __future__ import annotations

import csv
import datetime as _dt
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .gateway import TemplateName, VlmGateway, VlmInputError, VlmRole, load_template, render
from .metrics import KidEstimate

SCORE_MIN, SCORE_MAX = 0, 4
_SCORE = re.compile(r"Score:\s*\[?\s*(-?\d+)\s*\]?")
REPAIR_HINT = "Return only: Score: <integer 0-4>"


class ScoreParseError(ValueError):
    """No 'Score: <n>' found in the judge response; retains the raw text."""

    def __init__(self, raw_text: str):
        self.raw_text = raw_text
        super().__init__(f"no score found in judge response: {raw_text[:120]!r}")


class ScoreRangeError(ValueError):
    """Parsed score falls outside 0-4."""

    def __init__(self, score: int):
        self.score = score
        super().__init__(f"judge score {score} outside [{SCORE_MIN}, {SCORE_MAX}]")


@dataclass(frozen=True)
class StyleBenchRecord:
    """One judged (reference, generated, style) triple."""

    reference: str
    generated: str
    style_prompt: str
    score: int
    raw_response: str
    judge_model: str
    timestamp: str = ""

    def __post_init__(self):
        if self.score not in range(SCORE_MIN, SCORE_MAX + 1):
            raise ScoreRangeError(self.score)

    def as_dict(self) -> dict:
        return {
            "reference": self.reference,
            "generated": self.generated,
            "style_prompt": self.style_prompt,
            "score": self.score,
            "raw_response": self.raw_response,
            "judge_model": self.judge_model,
            "timestamp": self.timestamp,
        }


@dataclass(frozen=True)
class BenchReport:
    """Aggregated benchmark results, Table-shaped."""

    per_style: dict
    overall: float
    count: int
    kid: Optional[KidEstimate] = None
    clip_image: Optional[float] = None
    clip_text: Optional[float] = None
    human_eval: Optional[float] = None

    def as_dict(self) -> dict:
        return {
            "per_style": dict(self.per_style),
            "overall": self.overall,
            "count": self.count,
            "kid": None if self.kid is None else {
                "value": self.kid.value,
                "std_error": self.kid.std_error,
                "subset_size": self.kid.subset_size,
                "n_subsets": self.kid.n_subsets,
            },
            "clip_image": self.clip_image,
            "clip_text": self.clip_text,
            "human_eval": self.human_eval,
        }


def build_judge_request(reference: str | Path, generated: str | Path,
                        style_prompt: str) -> dict:
    """Rendered judge request: rubric with the style prompt, both images attached.

    The reference image always rides first.
    """
    if not str(style_prompt).strip():
        raise VlmInputError("style prompt must be non-empty")
    for label, path in (("reference", reference), ("generated", generated)):
        if not Path(path).is_file():
            raise VlmInputError(f"{label} image not readable: {path}")
    template = load_template(TemplateName.JUDGE)
    text = render(template, {"style_prompt": str(style_prompt)})
    return {"text": text, "images": [Path(reference), Path(generated)]}


def parse_score(text: str) -> int:
    """First integer following 'Score:', brackets and whitespace tolerated."""
    match = _SCORE.search(text)
    if not match:
        raise ScoreParseError(text)
    score = int(match.group(1))
    if not SCORE_MIN <= score <= SCORE_MAX:
        raise ScoreRangeError(score)
    return score


def evaluate_pair(
    reference: str | Path,
    generated: str | Path,
    style_prompt: str,
    judge: VlmRole,
    gateway: VlmGateway,
    run=None,
) -> StyleBenchRecord:
    """One judge call with a single parse-repair retry; record persisted."""
    request = build_judge_request(reference, generated, style_prompt)
    template = load_template(TemplateName.JUDGE)

    def _parse(text: str) -> int:
        return parse_score(text)

    score, exchange = gateway.complete_parsed(
        judge,
        template,
        {"style_prompt": str(style_prompt)},
        request["images"],
        _parse,
        REPAIR_HINT,
    )
    record = StyleBenchRecord(
        reference=str(reference),
        generated=str(generated),
        style_prompt=str(style_prompt),
        score=score,
        raw_response=exchange.response_text,
        judge_model=judge.model_id,
        timestamp=_dt.datetime.now(_dt.timezone.utc).isoformat(),
    )
    if run is not None:
        run.append_jsonl("scores/stylebench.jsonl", record.as_dict())
    return record


def ingest_ratings_csv(path: str | Path) -> float:
    """Mean of a ratings file with columns image_id, annotator_id, rating (0-4).

    Malformed rows are collected and raised together.
    """
    path = Path(path)
    problems: list[str] = []
    ratings: list[float] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"image_id", "annotator_id", "rating"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(
                f"ratings CSV must have columns {sorted(required)}, got {reader.fieldnames}"
            )
        for i, row in enumerate(reader, start=2):
            try:
                value = float(row["rating"])
            except (TypeError, ValueError):
                problems.append(f"line {i}: rating {row.get('rating')!r} is not a number")
                continue
            if not SCORE_MIN <= value <= SCORE_MAX:
                problems.append(f"line {i}: rating {value} outside [0, 4]")
                continue
            if not (row.get("image_id") or "").strip() or not (row.get("annotator_id") or "").strip():
                problems.append(f"line {i}: missing image_id or annotator_id")
                continue
            ratings.append(value)
    if problems:
        raise ValueError("ratings ingestion errors:\n  " + "\n  ".join(problems))
    if not ratings:
        raise ValueError("ratings CSV contains no rows")
    return sum(ratings) / len(ratings)


def aggregate(
    records: Sequence[StyleBenchRecord],
    ratings_csv: Optional[str | Path] = None,
    kid: Optional[KidEstimate] = None,
    clip_image: Optional[float] = None,
    clip_text: Optional[float] = None,
) -> BenchReport:
    """Per-style and overall mean scores plus optional companion metrics."""
    records = list(records)
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    by_style: dict[str, list[int]] = {}
    for rec in records:
        by_style.setdefault(rec.style_prompt, []).append(rec.score)
    per_style = {style: sum(v) / len(v) for style, v in sorted(by_style.items())}
    overall = sum(r.score for r in records) / len(records)
    human_eval = ingest_ratings_csv(ratings_csv) if ratings_csv else None
    return BenchReport(
        per_style=per_style,
        overall=overall,
        count=len(records),
        kid=kid,
        clip_image=clip_image,
        clip_text=clip_text,
        human_eval=human_eval,
    )


def _fmt(x, digits=4) -> str:
    return "-" if x is None else f"{x:.{digits}f}"


def report_markdown(report: BenchReport, title: str = "Evaluation") -> str:
    """Markdown table mirroring the benchmark columns."""
    lines = [
        f"# {title}",
        "",
        "| KID | CLIP Score (image) | CLIP Score (text) | StyleBench | Human Eval |",
        "| --- | --- | --- | --- | --- |",
        "| {} | {} | {} | {} | {} |".format(
            _fmt(None if report.kid is None else report.kid.value),
            _fmt(report.clip_image),
            _fmt(report.clip_text),
            _fmt(report.overall, 2),
            _fmt(report.human_eval, 2),
        ),
        "",
        "## Per-style StyleBench means",
        "",
        "| Style | Mean score | ",
        "| --- | --- |",
    ]
    for style, mean in report.per_style.items():
        lines.append(f"| {style} | {mean:.2f} |")
    lines.append("")
    lines.append(f"Records: {report.count}")
    return "\n".join(lines) + "\n"


def report_html(report: BenchReport, pairs: Sequence[dict] = (),
                title: str = "Evaluation") -> str:
    """Minimal HTML contact sheet: summary table plus judged image pairs."""
    rows = "".join(
        "<tr><td><img src='{ref}' height='160'></td>"
        "<td><img src='{gen}' height='160'></td>"
        "<td>{style}</td><td>{score}</td></tr>".format(
            ref=p.get("reference", ""), gen=p.get("generated", ""),
            style=p.get("style_prompt", ""), score=p.get("score", ""),
        )
        for p in pairs
    )
    summary = (
        "<table border='1'><tr><th>KID</th><th>CLIP (image)</th><th>CLIP (text)</th>"
        "<th>StyleBench</th><th>Human Eval</th></tr>"
        f"<tr><td>{_fmt(None if report.kid is None else report.kid.value)}</td>"
        f"<td>{_fmt(report.clip_image)}</td><td>{_fmt(report.clip_text)}</td>"
        f"<td>{_fmt(report.overall, 2)}</td><td>{_fmt(report.human_eval, 2)}</td></tr></table>"
    )
    gallery = f"<table border='1'><tr><th>Reference</th><th>Generated</th><th>Style</th><th>Score</th></tr>{rows}</table>" if rows else ""
    return (
        f"<!doctype html><html><head><meta charset='utf-8'><title>{title}</title></head>"
        f"<body><h1>{title}</h1>{summary}{gallery}</body></html>\n"
    )
