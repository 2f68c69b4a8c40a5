"""Latent containers and the shared f32le binary persistence format.

A latent is a flat vector of finite scalars plus an explicit shape. Stacks of
latents (trajectories, feature sets) persist as a JSON header next to a raw
little-endian float32 binary file; math stays in float64 in memory,.bin files
quantize to float32 per the wire contract, so save(load(p)) is byte-stable.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class LatentShapeError(ValueError):
    """Shape/size mismatch between latent payload and declared shape."""


class LatentValueError(ValueError):
    """Latent payload contains NaN or Inf entries."""


@dataclass(frozen=True)
class Latent:
    """Flat float vector with an explicit shape.

    data is always a contiguous 1-D float64 array; shape records the logical
    layout (product must equal data length). Instances are immutable.
    """

    data: np.ndarray
    shape: tuple[int, ...] = field(default=())

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64)).reshape(-1)
        shape = tuple(int(s) for s in (self.shape or (arr.size,)))
        if any(s <= 0 for s in shape):
            raise LatentShapeError(f"shape entries must be positive, got {shape}")
        if math.prod(shape) != arr.size:
            raise LatentShapeError(
                f"data length {arr.size} != product of shape {shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise LatentValueError("latent contains non-finite entries")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "shape", shape)

    @classmethod
    def from_array(cls, array) -> "Latent":
        arr = np.asarray(array, dtype=np.float64)
        return cls(arr.reshape(-1), tuple(int(s) for s in arr.shape) or (arr.size,))

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def array(self) -> np.ndarray:
        """Shaped (read-only) view of the payload."""
        return self.data.reshape(self.shape)

    def with_data(self, data: np.ndarray) -> "Latent":
        """New latent with the same shape and replacement payload."""
        return Latent(np.asarray(data, dtype=np.float64).reshape(-1), self.shape)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(list(self.shape)).encode())
        h.update(self.data.tobytes())
        return h.hexdigest()


def require_same_shape(a: Latent, b: Latent, *, what: str = "latents") -> None:
    if a.shape != b.shape:
        raise LatentShapeError(f"{what} have mismatched shapes {a.shape} vs {b.shape}")


def canonical_json(obj) -> str:
    """Deterministic JSON encoding used for digests and headers."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def digest_of(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def save_latents(
    base_path: str | Path,
    latents: Sequence[Latent],
    config_digest: str = "",
) -> tuple[Path, Path]:
    """Write a latent stack as <base>.json header + <base>.bin f32le payload.

    All latents must share one shape. Returns (header_path, bin_path).
    """
    latents = list(latents)
    if not latents:
        raise LatentShapeError("cannot persist an empty latent stack")
    shape = latents[0].shape
    for lt in latents[1:]:
        require_same_shape(latents[0], lt, what="stacked latents")
    base = Path(base_path)
    header = {
        "shape": list(shape),
        "dtype": "f32le",
        "count": len(latents),
        "config_digest": config_digest,
    }
    payload = np.concatenate([lt.data for lt in latents]).astype("<f4").tobytes()
    header_path = base.with_suffix(".json")
    bin_path = base.with_suffix(".bin")
    header_path.write_text(canonical_json(header), encoding="utf-8")
    bin_path.write_bytes(payload)
    return header_path, bin_path


def load_latents(base_path: str | Path) -> tuple[list[Latent], str]:
    """Read a latent stack written by save_latents.

    Returns (latents, config_digest). Values come back as float64 upcast from
    the stored float32, so a second save reproduces the bytes exactly.
    """
    base = Path(base_path)
    header_path = base.with_suffix(".json")
    bin_path = base.with_suffix(".bin")
    header = json.loads(header_path.read_text(encoding="utf-8"))
    if header.get("dtype") != "f32le":
        raise LatentShapeError(f"unsupported dtype {header.get('dtype')!r}")
    shape = tuple(int(s) for s in header["shape"])
    count = int(header["count"])
    per = math.prod(shape)
    raw = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    if raw.size != per * count:
        raise LatentShapeError(
            f"binary payload holds {raw.size} floats, header declares {per * count}"
        )
    latents = [
        Latent(raw[i * per : (i + 1) * per].astype(np.float64), shape)
        for i in range(count)
    ]
    return latents, str(header.get("config_digest", ""))


def save_latent(base_path: str | Path, latent: Latent, config_digest: str = "") -> tuple[Path, Path]:
    return save_latents(base_path, [latent], config_digest)


def load_latent(base_path: str | Path) -> Latent:
    latents, _ = load_latents(base_path)
    if len(latents) != 1:
        raise LatentShapeError(f"expected a single latent, file holds {len(latents)}")
    return latents[0]
