"""Pipeline configuration: one YAML document, flat sections per stage.

Every field has a default, so an empty file (or none) is a valid config.
Hashes are taken over a canonical JSON serialization.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError
from .scenegen import ConditionTag


@dataclass(frozen=True)
class ScenesConfig:
    resolution: tuple[int, int] = (32, 32)
    train: int = 500
    val: int = 100
    test: int = 100
    diffusion_corpus: int = 200
    n_objects: tuple[int, int] = (2, 5)
    d_min: float = 1.0
    d_max: float = 10.0
    tom_fraction: float = 0.6


@dataclass(frozen=True)
class ConditionsConfig:
    tags: tuple[str, ...] = ("night", "rain", "tom")
    strength: float = 1.0


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 200
    beta_1: float = 1e-4
    beta_T: float = 0.05
    channels: tuple[int, int] = (32, 64)
    time_dim: int = 32
    steps: int = 2000
    control_steps: int = 6000
    batch_size: int = 8
    lr: float = 1e-3
    sample_batch: int = 16
    heldout: int = 100


@dataclass(frozen=True)
class GenHardConfig:
    source: str = "diffusion"  # or "oracle" (ablation)
    val_scenes: int = 32


@dataclass(frozen=True)
class TeacherConfig:
    channels: tuple[int, int, int] = (16, 32, 48)
    iterations: int = 2000
    batch_size: int = 16
    lr: float = 2e-3
    decay_at: int = 1600
    decayed_lr: float = 2e-4
    weight_decay: float = 1e-4


@dataclass(frozen=True)
class DistillSection:
    iterations: int = 3000
    lr: float = 2e-3
    decay_at: int = 2500
    decayed_lr: float = 2e-4
    batch_size: int = 8
    weight_decay: float = 1e-4
    val_every: int = 250
    jitter: float = 0.2
    rgb_shift: float = 0.05
    flip: bool = True
    augment: bool = True
    rho: str = "l1"


@dataclass(frozen=True)
class EvalConfig:
    taus: tuple[float, ...] = (1.05, 1.15, 1.25)
    align: str = "lse"


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    scenes: ScenesConfig = field(default_factory=ScenesConfig)
    conditions: ConditionsConfig = field(default_factory=ConditionsConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    gen_hard: GenHardConfig = field(default_factory=GenHardConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def section_hash(self, *sections: str) -> str:
        d = self.to_dict()
        return canonical_hash({s: d[s] for s in sections})

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))


def canonical_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate(cfg: PipelineConfig) -> None:
    s = cfg.scenes
    _require(len(s.resolution) == 2 and all(r >= 8 and r % 8 == 0 for r in s.resolution),
             "scenes.resolution must be two multiples of 8")
    _require(min(s.train, s.val, s.test) >= 1, "every split needs at least one scene")
    _require(s.diffusion_corpus >= 1, "scenes.diffusion_corpus must be >= 1")
    _require(0 < s.d_min < s.d_max, "need 0 < d_min < d_max")
    _require(0 <= s.n_objects[0] <= s.n_objects[1], "scenes.n_objects must be an ordered range")
    _require(0.0 <= s.tom_fraction <= 1.0, "scenes.tom_fraction must lie in [0, 1]")
    try:
        tags = [ConditionTag.parse(t) for t in cfg.conditions.tags]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _require(len(tags) >= 1 and len(set(tags)) == len(tags), "conditions.tags must be non-empty and unique")
    _require(0.0 <= cfg.conditions.strength <= 1.0, "conditions.strength must lie in [0, 1]")
    d = cfg.diffusion
    _require(1 <= d.T <= 10_000, "diffusion.T must lie in [1, 10000]")
    _require(0 < d.beta_1 <= d.beta_T < 1, "need 0 < beta_1 <= beta_T < 1")
    _require(d.steps >= 0 and d.control_steps >= 0, "diffusion step budgets must be >= 0")
    _require(d.batch_size >= 1 and d.sample_batch >= 1 and d.lr > 0, "diffusion batch sizes and lr must be positive")
    _require(d.heldout >= 1, "diffusion.heldout must be >= 1")
    _require(cfg.gen_hard.source in ("diffusion", "oracle"), "gen_hard.source must be 'diffusion' or 'oracle'")
    _require(cfg.gen_hard.val_scenes >= 1, "gen_hard.val_scenes must be >= 1")
    t = cfg.teacher
    _require(t.iterations >= 0 and t.batch_size >= 1, "teacher iterations >= 0 and batch_size >= 1")
    _require(0 < t.decayed_lr <= t.lr, "teacher needs 0 < decayed_lr <= lr")
    k = cfg.distill
    _require(k.iterations >= 0 and k.batch_size >= 1 and k.val_every >= 1, "invalid distill budget")
    _require(0 < k.decayed_lr < k.lr, "distill needs 0 < decayed_lr < lr")
    _require(k.iterations == 0 or 0 <= k.decay_at < k.iterations, "distill.decay_at must lie inside the budget")
    _require(k.rho == "l1", "distill.rho must be 'l1'")
    e = cfg.eval
    _require(len(e.taus) >= 1 and all(tau > 1 for tau in e.taus) and list(e.taus) == sorted(set(e.taus)),
             "eval.taus must be increasing values > 1")
    _require(e.align in ("lse", "median", "none"), "eval.align must be lse, median or none")


def _build(cls, data: Mapping[str, Any], where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"section {where or 'root'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'root'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value or {}, path)
        else:
            kwargs[name] = _coerce(value, default, path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from None


def _coerce(value, default, path: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list")
        proto = default[0] if default else value[0] if value else None
        return tuple(_coerce(v, proto, path) for v in value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if isinstance(default, float):
        # YAML 1.1 reads exponent literals without a dot (1e-4) as strings
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    return value


def from_dict(data: Mapping[str, Any] | None) -> PipelineConfig:
    return _build(PipelineConfig, data or {}, "")


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return from_dict(data)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
