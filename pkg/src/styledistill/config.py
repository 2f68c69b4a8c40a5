"""Engine configuration: flags > environment > config file > defaults.

The config file is plain "key = value" lines; '#' starts a comment. The
resolved snapshot (secrets redacted) is persisted into every run record.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Optional

from .distill import DEFAULT_MAX_ROUNDS, DEFAULT_TAU
from .flow import (
    DEFAULT_GAMMA,
    DEFAULT_GENERATION_STEPS,
    DEFAULT_INVERSION_STEPS,
    DEFAULT_TIME_EPSILON,
)
from .gateway import RoleName, VlmRole

ENV_KEYS = {
    "VLM_ENDPOINT": "vlm_endpoint",
    "VLM_API_KEY": "vlm_api_key",
    "JUDGE_ENDPOINT": "judge_endpoint",
    "JUDGE_API_KEY": "judge_api_key",
    "SIDECAR_URL": "sidecar_url",
}


class ConfigError(ValueError):
    """Invalid configuration value or file."""


@dataclass
class EngineConfig:
    vlm_endpoint: str = ""
    vlm_api_key: str = ""
    vlm_model: str = "internvl-chat"
    judge_endpoint: str = ""
    judge_api_key: str = ""
    judge_model: str = "gpt-judge"
    sidecar_url: str = ""
    run_root: str = "runs"
    seed: int = 0
    tau: float = DEFAULT_TAU
    max_rounds: int = DEFAULT_MAX_ROUNDS
    gamma: float = DEFAULT_GAMMA
    inversion_steps: int = DEFAULT_INVERSION_STEPS
    generation_steps: int = DEFAULT_GENERATION_STEPS
    time_epsilon: float = DEFAULT_TIME_EPSILON
    rate_limit_rpm: float = 0.0
    jobs: int = 1

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def role(self, name: RoleName) -> VlmRole:
        if name is RoleName.JUDGE:
            endpoint, key, model = self.judge_endpoint, self.judge_api_key, self.judge_model
        else:
            endpoint, key, model = self.vlm_endpoint, self.vlm_api_key, self.vlm_model
        if not endpoint:
            raise ConfigError(f"no endpoint configured for role {name.value!r}")
        return VlmRole(role=name, endpoint=endpoint, model_id=model, api_key=key)


def parse_config_file(path: str | Path) -> dict:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


_INT_FIELDS = {"seed", "max_rounds", "inversion_steps", "generation_steps", "jobs"}
_FLOAT_FIELDS = {"tau", "gamma", "time_epsilon", "rate_limit_rpm"}


def _coerce(key: str, value):
    try:
        if key in _INT_FIELDS:
            return int(value)
        if key in _FLOAT_FIELDS:
            return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc
    return value


def resolve_config(
    flags: Optional[Mapping] = None,
    env: Optional[Mapping[str, str]] = None,
    config_file: Optional[str | Path] = None,
) -> EngineConfig:
    """Merge the four config layers into a validated EngineConfig."""
    env = os.environ if env is None else env
    merged: dict = {}
    if config_file:
        merged.update(parse_config_file(config_file))
    for env_key, cfg_key in ENV_KEYS.items():
        if env.get(env_key):
            merged[cfg_key] = env[env_key]
    for key, value in (flags or {}).items():
        if value is not None:
            merged[key] = value
    known = {f.name for f in fields(EngineConfig)}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = EngineConfig(**{k: _coerce(k, v) for k, v in merged.items()})
    _validate(cfg)
    return cfg


def _validate(cfg: EngineConfig) -> None:
    if not 0.0 <= cfg.tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {cfg.tau}")
    if not 0.0 <= cfg.gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {cfg.gamma}")
    if cfg.max_rounds < 1 or cfg.inversion_steps < 1 or cfg.generation_steps < 1:
        raise ConfigError("round and step counts must be positive")
    if not 0.0 < cfg.time_epsilon < 0.1:
        raise ConfigError(f"time_epsilon must lie in (0, 0.1), got {cfg.time_epsilon}")
    if cfg.jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {cfg.jobs}")
    if cfg.rate_limit_rpm < 0:
        raise ConfigError(f"rate_limit_rpm must be >= 0, got {cfg.rate_limit_rpm}")
