"""Run configuration: typed fields, strict key=value parsing, validation.

Every training, evaluation, and sweep entry point takes a RunConfig.
Config files are flat ``key = value`` text; unknown keys, duplicate
keys, and out-of-range values are hard errors so a typo never silently
runs with a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .envs import OBS_MODES, TASKS
from .residual import GUIDANCE_LEVELS

BASE_POLICIES = ("open_loop", "vinn", "bc")


@dataclass(frozen=True)
class RunConfig:
    task: str = "reach"
    obs_mode: str = "state"
    base_policy: str = "vinn"
    guidance: str = "guided"
    fix_encoder: bool = True
    condition_on_base_action: bool = True
    offset_reg: bool = False
    actor_random_init: bool = False
    seed: int = 0
    episodes: int = 300
    lr: float = 1e-4
    gamma: float = 0.99
    nstep: int = 3
    batch_size: int = 256
    buffer_size: int = 5000
    update_freq: int = 2
    tau: float = 0.01
    feature_dim: int = 50
    hidden_dim: int = 1024
    exploration_std: float = 0.1
    reward_scale: float = 10.0
    action_repeat: int = 1
    seed_frames: int = 260
    offset_bound: float = 0.3
    bc_epochs: int = 2000
    bc_lr: float = 1e-3
    bc_hidden_dim: int = 64
    vinn_k: int = 3
    vinn_temperature: float = 1.0
    ot_epsilon: float = 0.05

    def __post_init__(self):
        enums = (
            ("task", self.task, TASKS),
            ("obs_mode", self.obs_mode, OBS_MODES),
            ("base_policy", self.base_policy, BASE_POLICIES),
            ("guidance", self.guidance, GUIDANCE_LEVELS),
        )
        for name, value, allowed in enums:
            if value not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {value!r}")
        positive = (
            ("lr", self.lr),
            ("tau", self.tau),
            ("reward_scale", self.reward_scale),
            ("offset_bound", self.offset_bound),
            ("bc_lr", self.bc_lr),
            ("vinn_temperature", self.vinn_temperature),
            ("ot_epsilon", self.ot_epsilon),
        )
        for name, value in positive:
            if not value > 0.0:
                raise ValueError(f"{name} must be positive, got {value}")
        at_least_one = (
            ("nstep", self.nstep),
            ("batch_size", self.batch_size),
            ("update_freq", self.update_freq),
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("action_repeat", self.action_repeat),
            ("bc_epochs", self.bc_epochs),
            ("bc_hidden_dim", self.bc_hidden_dim),
            ("vinn_k", self.vinn_k),
        )
        for name, value in at_least_one:
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        nonnegative = (
            ("seed", self.seed),
            ("episodes", self.episodes),
            ("seed_frames", self.seed_frames),
            ("exploration_std", self.exploration_std),
        )
        for name, value in nonnegative:
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.tau > 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.buffer_size < self.batch_size:
            raise ValueError(
                f"buffer_size {self.buffer_size} smaller than batch_size {self.batch_size}"
            )


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low == "true":
            return True
        if low == "false":
            return False
        raise ValueError(f"{key} expects true or false, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ValueError(f"{key} expects {kind}, got {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into typed values.

    Blank lines and ``#`` comments are skipped; unknown or duplicate
    keys raise.
    """
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return RunConfig(**parse_config_text(fh.read()))


def apply_overrides(cfg: RunConfig, items: dict) -> RunConfig:
    """New config with string overrides coerced onto cfg."""
    coerced = {}
    for key, raw in items.items():
        if key not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        coerced[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    return dataclasses.replace(cfg, **coerced)


def format_config(cfg: RunConfig) -> str:
    """Round-trippable text form, one key per line in field order."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
