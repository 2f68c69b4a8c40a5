"""Per-style structural-guidance schedule selection.

A scheduler model is asked for (eta, start, stop) as JSON; any transport,
parse, or range failure falls back to a static table shipped as a versioned
asset, so a valid window always comes back. Decisions carry their provenance.
"""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from typing import Optional

from .flow import DEFAULT_WINDOW, ScheduleWindow
from .gateway import TemplateName, VlmGateway, VlmRole, load_template

log = logging.getLogger(__name__)

SCHEDULE_TABLE_ASSET = "schedule_table.json"


class AbstractionLevel(str, enum.Enum):
    EXTREME = "extreme"
    MODERATE = "moderate"
    MILD = "mild"


@dataclass(frozen=True)
class StyleDescriptor:
    """Named target style plus its derived abstraction level."""

    name: str
    abstraction_level: AbstractionLevel = AbstractionLevel.MODERATE
    notes: Optional[str] = None

    def __post_init__(self):
        if not self.name.strip():
            raise ValueError("style name must be non-empty")


class Provenance(str, enum.Enum):
    VLM = "vlm"
    FALLBACK = "fallback"


@dataclass(frozen=True)
class ScheduleDecision:
    window: ScheduleWindow
    provenance: Provenance

    def as_dict(self) -> dict:
        return {"window": self.window.as_dict(), "provenance": self.provenance.value}


def normalize_style_name(name: str) -> str:
    return re.sub(r"\s+", " ", name.strip().casefold())


def _load_table() -> dict:
    raw = (resources.files("styledistill") / "assets" / SCHEDULE_TABLE_ASSET).read_text(
        encoding="utf-8"
    )
    return json.loads(raw)


def schedule_table() -> list[dict]:
    """Shipped per-style schedule rows: style, eta, tau_start, tau_stop, level."""
    return _load_table()["styles"]


def describe_style(name: str) -> StyleDescriptor:
    """Style descriptor with abstraction level derived from the shipped table."""
    norm = normalize_style_name(name)
    for row in schedule_table():
        if normalize_style_name(row["style"]) == norm:
            return StyleDescriptor(name, AbstractionLevel(row["abstraction_level"]))
    return StyleDescriptor(name, AbstractionLevel.MODERATE)


def fallback_schedule(style: StyleDescriptor) -> ScheduleWindow:
    """Static table lookup by normalized name; unknown styles get the default."""
    norm = normalize_style_name(style.name)
    for row in schedule_table():
        if normalize_style_name(row["style"]) == norm:
            return ScheduleWindow(row["eta"], row["tau_start"], row["tau_stop"])
    return DEFAULT_WINDOW


def _parse_schedule_json(text: str) -> ScheduleWindow:
    match = re.search(r"\{[^{}]*\}", text, re.DOTALL)
    if not match:
        raise ValueError("no JSON object in response")
    try:
        obj = json.loads(match.group(0))
        eta = float(obj["eta"])
        start = float(obj.get("start", obj.get("tau_start")))
        stop = float(obj.get("stop", obj.get("tau_stop")))
        return ScheduleWindow(eta, start, stop)  # range validation happens here
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValueError(f"malformed schedule JSON: {exc}") from exc


def select_schedule(
    style: StyleDescriptor,
    gateway: Optional[VlmGateway] = None,
    scheduler: Optional[VlmRole] = None,
) -> ScheduleDecision:
    """Ask the scheduler model for a window; fall back to the table on any failure."""
    if gateway is None or scheduler is None:
        return ScheduleDecision(fallback_schedule(style), Provenance.FALLBACK)
    template = load_template(TemplateName.SCHEDULE)
    try:
        window, _ = gateway.complete_parsed(
            scheduler,
            template,
            {"style_name": style.name},
            [],
            _parse_schedule_json,
            'Return only JSON: {"eta": 0.9, "start": 0.0, "stop": 0.25}',
        )
        return ScheduleDecision(window, Provenance.VLM)
    except Exception as exc:
        log.warning("schedule selection for %r fell back to the table: %s", style.name, exc)
        return ScheduleDecision(fallback_schedule(style), Provenance.FALLBACK)
