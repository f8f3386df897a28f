"""Run configuration: schema validation, JSON/YAML loading and a stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from ..ar import MixedStepConfig, ToyProcessSpec
from ..dmd import DistillConfig
from ..teacher import PATHS, GaussianMixture, two_mode_gmm

KINDS = ("nonar", "ar", "defect-eval")
FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Schema failure; ``path`` names the offending key, e.g. ``distill.lr_critic``."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class TeacherSpec:
    kind: str = "two_mode"  # "two_mode" or "mixture"
    separation: float = 2.0
    variance: float = 0.04
    weights: Optional[List[float]] = None
    means: Optional[List[List[float]]] = None
    variances: Optional[List[float]] = None
    path: str = "rectified"

    def __post_init__(self):
        if self.kind not in ("two_mode", "mixture"):
            raise ValueError(f"unknown teacher kind {self.kind!r}")
        if self.path not in PATHS:
            raise ValueError(f"unknown noise path {self.path!r}")
        if self.kind == "mixture" and None in (self.weights, self.means, self.variances):
            raise ValueError("a mixture teacher needs weights, means and variances")

    def build(self) -> GaussianMixture:
        if self.kind == "two_mode":
            return two_mode_gmm(self.separation, self.variance)
        return GaussianMixture(np.array(self.weights), np.array(self.means), np.array(self.variances))


@dataclass
class EvalSpec:
    n_samples: int = 4096
    n_projections: int = 128
    step_counts: List[int] = field(default_factory=lambda: [1, 2, 4, 8])
    long_horizon: int = 4  # eval-long rolls out this many times the training horizon
    seed: int = 12345


@dataclass
class RunConfig:
    kind: str = "nonar"
    teacher: TeacherSpec = field(default_factory=TeacherSpec)
    distill: DistillConfig = field(default_factory=DistillConfig)
    mixed: MixedStepConfig = field(default_factory=MixedStepConfig)
    process: ToyProcessSpec = field(default_factory=ToyProcessSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    seeds: List[int] = field(default_factory=lambda: [0])
    out_dir: Optional[str] = None
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "teacher": dataclasses.asdict(self.teacher),
            "distill": self.distill.to_dict(),
            "mixed": self.mixed.to_dict(),
            "process": self.process.to_dict(),
            "eval": dataclasses.asdict(self.eval),
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
            "checkpoint_every": self.checkpoint_every,
        }

    def with_seed(self, seed: int) -> "RunConfig":
        cfg = from_dict(self.to_dict())
        cfg.distill.seed = seed
        cfg.seeds = [seed]
        return cfg


_SECTIONS = {
    "teacher": TeacherSpec,
    "distill": DistillConfig,
    "mixed": MixedStepConfig,
    "process": ToyProcessSpec,
    "eval": EvalSpec,
}


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def from_dict(data: Dict[str, Any]) -> RunConfig:
    """Validate a plain mapping and build a :class:`RunConfig`; unknown keys are errors."""
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a mapping")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in top:
            raise ConfigError(key, "unknown key")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _build(_SECTIONS[key], value, key) if key in _SECTIONS else value
    return _build(RunConfig, kwargs, "")


def loads(text: str, fmt: str = "json") -> RunConfig:
    data = json.loads(text) if fmt == "json" else yaml.safe_load(text)
    return from_dict(data or {})


def load(path) -> RunConfig:
    path = Path(path)
    fmt = "yaml" if path.suffix in (".yaml", ".yml") else "json"
    return loads(path.read_text(), fmt)


def dumps(config: RunConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True, indent=2)


def config_hash(config: RunConfig) -> str:
    """First 16 hex digits of the SHA-256 of the canonical JSON form."""
    canon = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def resolved_grids(config: RunConfig) -> Dict[str, List[float]]:
    d = config.distill
    return {"train": list(d.grid_train.points), "infer": list(d.grid_infer.points)}
