"""Run configuration: a strict YAML mapping mirroring OptimConfig fields.

Unknown keys are errors, as are malformed nested sections. `--set`
overrides use dot paths (``learning_rates.texture=0.02``) with YAML value
parsing.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .guidance import ENCODERS

_PHASES = ((0.0, 32), (0.2, 64), (0.4, 128), (0.6, 256), (0.8, 512))


def default_resolution_schedule(iters: int) -> list[tuple[int, int]]:
    """Progressive 32 -> 512 schedule spread over the run."""
    schedule: list[tuple[int, int]] = []
    for frac, res in _PHASES:
        it = int(round(frac * iters))
        if schedule and it <= schedule[-1][0]:
            it = schedule[-1][0] + 1
        if it >= iters and schedule:
            break
        schedule.append((it, res))
    return schedule


@dataclass
class OptimConfig:
    lambda_tex: float = 1.0
    lambda_c: float = 1.0
    iters: int = 5000
    resolution_schedule: list[tuple[int, int]] | None = None
    consistency_resolution: int = 512
    alpha: float = 0.5
    alpha_final: float | None = None
    learning_rates: dict = field(default_factory=lambda: {
        "beta": 1e-3, "psi": 1e-3, "D": 1e-3, "texture": 1e-2})
    prompts: dict = field(default_factory=lambda: {"full_body": "", "head": ""})
    seed: int = 0
    assets: str | None = None
    rounds: int = 1
    texture_size: int = 512
    encoder: str = "pool8"
    p_head: float = 0.30
    fov_full: float = 45.0
    fov_head: float = 30.0
    fill_fraction: float = 0.75
    sample_body_pose: bool = False
    displacement_cap: float = 0.1
    checkpoint_every: int = 100
    share_t_eps: bool = False
    gallery: str | None = None
    gallery_size: int = 8

    def __post_init__(self):
        if self.iters < 1:
            raise ConfigError("iters must be >= 1")
        if self.lambda_tex < 0 or self.lambda_c < 0:
            raise ConfigError("loss weights must be non-negative")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError("alpha must be in [0, 1]")
        if self.alpha_final is not None and not (0.0 <= self.alpha_final <= 1.0):
            raise ConfigError("alpha_final must be in [0, 1]")
        if not (0.0 <= self.p_head <= 1.0):
            raise ConfigError("p_head must be in [0, 1]")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {ENCODERS}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.displacement_cap <= 0:
            raise ConfigError("displacement_cap must be positive")
        if set(self.learning_rates) != {"beta", "psi", "D", "texture"}:
            raise ConfigError("learning_rates must have keys beta, psi, D, texture")
        if set(self.prompts) != {"full_body", "head"}:
            raise ConfigError("prompts must have keys full_body, head")
        for name in ("texture_size", "consistency_resolution"):
            v = getattr(self, name)
            if v < 8 or (v & (v - 1)) != 0:
                raise ConfigError(f"{name} must be a power of two >= 8, got {v}")
        if self.resolution_schedule is None:
            self.resolution_schedule = default_resolution_schedule(self.iters)
        self.resolution_schedule = [(int(i), int(r)) for i, r in self.resolution_schedule]
        prev = -1
        for it, res in self.resolution_schedule:
            if it <= prev:
                raise ConfigError("resolution_schedule iterations must be strictly increasing")
            prev = it
            if res < 32 or res > 512 or (res & (res - 1)) != 0:
                raise ConfigError(f"schedule resolution {res} must be a power of two in [32, 512]")
        if self.resolution_schedule[0][0] != 0:
            raise ConfigError("resolution_schedule must start at iteration 0")

    def resolution_at(self, iteration: int) -> int:
        res = self.resolution_schedule[0][1]
        for it, r in self.resolution_schedule:
            if iteration >= it:
                res = r
        return res

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "resolution_schedule":
                v = [[int(i), int(r)] for i, r in v]
            out[f.name] = copy.deepcopy(v)
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict) -> "OptimConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"config must be a mapping, got {type(data).__name__}")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "resolution_schedule" in kwargs and kwargs["resolution_schedule"] is not None:
            sched = kwargs["resolution_schedule"]
            if not isinstance(sched, list) or not all(
                    isinstance(e, (list, tuple)) and len(e) == 2 for e in sched):
                raise ConfigError("resolution_schedule must be a list of [iteration, resolution]")
            kwargs["resolution_schedule"] = [(int(i), int(r)) for i, r in sched]
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply repeatable ``--set dot.path=value`` overrides to a config dict."""
    out = copy.deepcopy(data)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        parsed = yaml.safe_load(value)
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                node[p] = {}
            node = node[p]
        node[parts[-1]] = parsed
    return out


def load_config(path, overrides: list[str] | None = None) -> OptimConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if overrides:
        data = apply_overrides(data, overrides)
    return OptimConfig.from_dict(data)
