"""Grid-tune the per-style guidance-schedule table and write the asset.

Procedure: on the analytic Gaussian-pair field, run windowed generation for
every (eta, tau_stop) grid point with tau_start = 0 and measure how much of
the structural gap the guidance closes,

    restoration(eta, stop) = 1 - |x_T - y_r| / |x_T(eta=0) - y_r|,

averaged over seeded (y_init, y_r) draws. Each abstraction level has a target
restoration fraction (extreme styles keep the most stylistic freedom); the
grid point closest to the target wins, ties going to the smaller eta * span.
The chosen rows plus the full tuning record land in
src/styledistill/assets/schedule_table.json.

Run from the repo root: python3 scripts/tune_schedule_table.py
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from styledistill.flow import InversionConfig, ScheduleWindow, gaussian_pair_field, generate
from styledistill.latents import Latent

OUT = Path(__file__).resolve().parent.parent / "src" / "styledistill" / "assets" / "schedule_table.json"

ETA_GRID = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
STOP_GRID = [0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40]
STEPS = 50
DIM = 4
N_DRAWS = 16
SEED = 20240601

# restoration target per abstraction level, as a fraction of what the
# stock window (eta=0.9, [0, 0.25]) achieves on the same field
LEVEL_TARGET_FRACTIONS = {"extreme": 0.35, "moderate": 1.0, "mild": 1.5}
DEFAULT_POINT = (0.9, 0.25)

STYLE_LEVELS = {
    "South Park": "extreme",
    "Simpsons": "extreme",
    "LEGO": "moderate",
    "Knitted Doll": "moderate",
    "Barbie Doll": "moderate",
    "Matrushka": "moderate",
    "Action Figure": "moderate",
    "Pixar": "moderate",
    "Anime": "moderate",
    "Ghibli": "mild",
    "Van Gogh": "mild",
}


def restoration_surface() -> dict[tuple[float, float], float]:
    field = gaussian_pair_field(1.0, 0.5, DIM)
    rng = np.random.default_rng(SEED)
    draws = []
    for _ in range(N_DRAWS):
        y_init = Latent(rng.standard_normal(DIM))
        y_r = Latent(1.0 + 0.5 * rng.standard_normal(DIM))
        base = generate(y_init, y_r, field, ScheduleWindow(0.0, 0.0, 1.0), steps=STEPS)
        gap = float(np.linalg.norm(base.terminal.data - y_r.data))
        draws.append((y_init, y_r, gap))
    surface = {}
    for eta in ETA_GRID:
        for stop in STOP_GRID:
            window = ScheduleWindow(eta, 0.0, stop)
            fracs = []
            for y_init, y_r, gap in draws:
                traj = generate(y_init, y_r, field, window, steps=STEPS)
                dist = float(np.linalg.norm(traj.terminal.data - y_r.data))
                fracs.append(1.0 - dist / gap)
            surface[(eta, stop)] = float(np.mean(fracs))
    return surface


def pick(surface: dict[tuple[float, float], float], target: float) -> tuple[float, float, float]:
    best = min(
        surface.items(),
        key=lambda kv: (abs(kv[1] - target), kv[0][0] * kv[0][1]),
    )
    (eta, stop), value = best
    return eta, stop, value


def main() -> None:
    surface = restoration_surface()
    anchor = surface[DEFAULT_POINT]
    level_targets = {lvl: frac * anchor for lvl, frac in LEVEL_TARGET_FRACTIONS.items()}
    level_windows = {}
    for level, target in level_targets.items():
        eta, stop, achieved = pick(surface, target)
        level_windows[level] = {
            "eta": eta,
            "tau_start": 0.0,
            "tau_stop": stop,
            "target_restoration": target,
            "achieved_restoration": round(achieved, 4),
        }
        print(f"{level:9s} target {target:.2f} -> eta={eta} stop={stop} (achieved {achieved:.4f})")
    styles = [
        {
            "style": style,
            "abstraction_level": level,
            "eta": level_windows[level]["eta"],
            "tau_start": 0.0,
            "tau_stop": level_windows[level]["tau_stop"],
        }
        for style, level in STYLE_LEVELS.items()
    ]
    asset = {
        "version": 1,
        "default": {"eta": 0.9, "tau_start": 0.0, "tau_stop": 0.25},
        "styles": styles,
        "tuning": {
            "script": "scripts/tune_schedule_table.py",
            "field": {"kind": "gaussian-pair", "mu": 1.0, "sigma": 0.5, "dim": DIM},
            "steps": STEPS,
            "n_draws": N_DRAWS,
            "seed": SEED,
            "eta_grid": ETA_GRID,
            "tau_stop_grid": STOP_GRID,
            "metric": "1 - |x_T - y_r| / |x_T(eta=0) - y_r|, mean over draws",
            "anchor_point": {"eta": DEFAULT_POINT[0], "tau_stop": DEFAULT_POINT[1],
                             "restoration": round(anchor, 4)},
            "level_target_fractions": LEVEL_TARGET_FRACTIONS,
            "level_targets": {k: round(v, 4) for k, v in level_targets.items()},
            "level_windows": level_windows,
            "surface": [
                {"eta": eta, "tau_stop": stop, "restoration": round(val, 4)}
                for (eta, stop), val in sorted(surface.items())
            ],
        },
    }
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(asset, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
