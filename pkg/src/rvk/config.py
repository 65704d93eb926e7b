"""Run configuration: one JSON document covering scene generation, sampling,
flow source, model shape, training schedule, loss weights, seeds and paths.

Unknown keys are rejected at every level so that a typo never silently
falls back to a default.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ModelDims, Schedule
from .sampling import DEFAULT_DELTA, PATCH_H, PATCH_W
from .simulator import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass
class SamplingConfig:
    delta: float = DEFAULT_DELTA
    target_w: int = PATCH_W
    target_h: int = PATCH_H


@dataclass
class FlowConfig:
    source: str = "oracle"   # oracle | estimated
    levels: int = 4
    use_clue: bool = True     # False feeds zeros in place of the flow clue


@dataclass
class SeedConfig:
    gen: int = 0
    model: int = 0
    train: int = 0


@dataclass
class PathConfig:
    data: str = ""
    model: str = ""
    report: str = ""


def _strict(cls, d, where: str):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown} (known: {sorted(known)})")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    model: ModelDims = field(default_factory=ModelDims)
    schedule: Schedule = field(default_factory=Schedule)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    SECTIONS = ("scene", "sampling", "flow", "model", "schedule", "seeds", "paths")

    def validate(self) -> "RunConfig":
        if self.flow.source not in ("oracle", "estimated"):
            raise ConfigError(f"flow.source must be 'oracle' or 'estimated', "
                              f"got {self.flow.source!r}")
        if self.flow.levels != self.model.levels:
            raise ConfigError(f"flow.levels ({self.flow.levels}) must equal model.levels "
                              f"({self.model.levels})")
        if (self.sampling.target_w, self.sampling.target_h) != (self.model.patch_w,
                                                                self.model.patch_h):
            raise ConfigError("sampling target size must equal the model patch size")
        if self.sampling.delta < 0:
            raise ConfigError(f"sampling.delta must be >= 0, got {self.sampling.delta}")
        s = self.schedule
        if s.epochs < 0 or s.batch_size < 1 or s.decay_every < 1:
            raise ConfigError(f"bad schedule {asdict(s)}")
        if s.lr < 0 or not (0 < s.decay <= 1):
            raise ConfigError(f"bad learning-rate settings lr={s.lr} decay={s.decay}")
        if s.clue_noise < 0 or s.weight_decay < 0:
            raise ConfigError(f"clue_noise and weight_decay must be >= 0, got "
                              f"{s.clue_noise} and {s.weight_decay}")
        if s.loss_units not in ("standardised", "raw"):
            raise ConfigError(f"schedule.loss_units must be 'standardised' or 'raw', "
                              f"got {s.loss_units!r}")
        return self

    def to_dict(self) -> dict:
        return {
            "scene": self.scene.to_dict(),
            "sampling": asdict(self.sampling),
            "flow": asdict(self.flow),
            "model": self.model.to_dict(),
            "schedule": asdict(self.schedule),
            "seeds": asdict(self.seeds),
            "paths": asdict(self.paths),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(d) - set(cls.SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections {unknown} (known: {list(cls.SECTIONS)})")
        try:
            scene = SceneConfig.from_dict(d.get("scene") or {})
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"scene: {exc}") from None
        model = d.get("model") or {}
        unknown = sorted(set(model) - set(ModelDims.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"model: unknown keys {unknown}")
        try:
            dims = ModelDims.from_dict(model)
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from None
        return cls(scene=scene,
                   sampling=_strict(SamplingConfig, d.get("sampling"), "sampling"),
                   flow=_strict(FlowConfig, d.get("flow"), "flow"),
                   model=dims,
                   schedule=_strict(Schedule, d.get("schedule"), "schedule"),
                   seeds=_strict(SeedConfig, d.get("seeds"), "seeds"),
                   paths=_strict(PathConfig, d.get("paths"), "paths")).validate()

    def hash(self) -> str:
        """Digest of everything except paths, which do not affect results."""
        d = self.to_dict()
        d.pop("paths")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{p}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno} column {exc.colno}: "
                          f"{exc.msg}") from None
    return RunConfig.from_dict(doc)
