"""Experiment configuration, read from TOML.

Every key has a default; a config file only lists what it changes. See
``docs/config.md`` for the schema.
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .inference import MODES, PLAIN, UNCERTAINTY
from .synthdata import ClientSpec, ShapeWorldSpec, default_spec
from .training import STRATEGIES, TrainingConfig
from .welford import FIVA_P, SIGMA2_MAX, SIGMA2_MIN

REGIMES = ("federated", "centralized", "standalone")
CHECKPOINT_DTYPES = ("float32", "float64")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    widths: tuple = (8, 16, 32)
    activation: str = "relu"
    dropout: float = 0.2  # MC-dropout rate at inference


@dataclass
class AggregationSettings:
    lam: float = 0.95
    sigma2_min: float = SIGMA2_MIN
    sigma2_max: float = SIGMA2_MAX


@dataclass
class EvaluationConfig:
    samples: int = 10
    seeds: int = 5
    fraction: float = 0.6
    bins: int = 10
    datasets: tuple = ("holdout",)
    export_images: int = 4


@dataclass
class DataConfig:
    grid: int = 32
    n_foreground: int = 6
    max_shapes: int = 4
    clients: Optional[list] = None  # None: the default five-client roster
    holdout: Optional[dict] = None

    def world(self, seed: int) -> ShapeWorldSpec:
        if self.clients is None:
            spec = default_spec(seed, self.grid)
            if (self.n_foreground, self.max_shapes) != (6, 4) or self.holdout is not None:
                raise ConfigError("n_foreground, max_shapes and holdout need an explicit client list")
            return spec
        clients = tuple(_client(c, seed, i) for i, c in enumerate(self.clients))
        labels = tuple(range(1, self.n_foreground + 1))
        hold = dict(name="holdout", samples=100, labels=list(labels), offset=0.05, noise=0.03)
        hold.update(self.holdout or {})
        return ShapeWorldSpec(clients, _client(hold, seed, 998), self.grid, self.n_foreground, self.max_shapes)


def _client(d: dict, seed: int, index: int) -> ClientSpec:
    unknown = set(d) - {"name", "samples", "labels", "offset", "noise", "seed"}
    if unknown:
        raise ConfigError(f"unknown client keys {sorted(unknown)}")
    try:
        return ClientSpec(str(d["name"]), int(d["samples"]), tuple(int(x) for x in d["labels"]),
                          float(d.get("offset", 0.0)), float(d.get("noise", 0.02)),
                          int(d.get("seed", seed * 1000 + index + 1)))
    except KeyError as e:
        raise ConfigError(f"client entry missing {e}") from None


@dataclass
class ExperimentConfig:
    regime: str = "federated"
    strategy: str = FIVA_P
    inference: tuple = (PLAIN, UNCERTAINTY)
    rounds: int = 30
    seed: int = 0
    output_dir: str = "runs/default"
    workers: int = 1
    checkpoint_dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    aggregation: AggregationSettings = field(default_factory=AggregationSettings)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "ExperimentConfig":
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        bad = [m for m in self.inference if m not in MODES]
        if bad or not self.inference:
            raise ConfigError(f"inference modes must be a non-empty subset of {MODES}")
        if self.strategy == "FedAvg" and UNCERTAINTY in self.inference:
            # FedAvg leaves sigma2 at its initial value; sampling from it is meaningless
            raise ConfigError("uncertainty-weighted inference needs a FIVA strategy")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.checkpoint_dtype not in CHECKPOINT_DTYPES:
            raise ConfigError(f"checkpoint_dtype must be one of {CHECKPOINT_DTYPES}")
        t = self.training
        if t.local_steps < 1 or t.batch_size < 1 or t.lr < 0 or not 0 <= t.momentum < 1:
            raise ConfigError("invalid training settings")
        if not 0 <= t.dropout < 1 or not 0 <= self.model.dropout < 1:
            raise ConfigError("dropout rates must lie in [0, 1)")
        if t.sigma2_init <= 0:
            raise ConfigError("sigma2_init must be positive")
        a = self.aggregation
        if not 0 <= a.lam <= 1 or not 0 <= a.sigma2_min <= a.sigma2_max:
            raise ConfigError("invalid aggregation settings")
        e = self.evaluation
        if e.samples < 1 or e.seeds < 1 or not 0 < e.fraction <= 1 or e.bins < 1:
            raise ConfigError("invalid evaluation settings")
        if self.data.grid % 4:
            raise ConfigError("grid must be divisible by 4")
        world = self.world()
        names = {c.name for c in world.clients}
        for ds in e.datasets:
            if ds not in names | {"holdout", "clients"}:
                raise ConfigError(f"evaluation dataset {ds!r} is not a defined client")
        return self

    def world(self) -> ShapeWorldSpec:
        try:
            return self.data.world(self.seed)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"data: {e}") from None

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None) -> "ExperimentConfig":
        d = self.to_dict()
        if seed is not None:
            d["seed"] = seed
        if output_dir is not None:
            d["output_dir"] = str(output_dir)
        return from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("inference",):
            d[key] = list(d[key])
        d["model"]["widths"] = list(d["model"]["widths"])
        d["evaluation"]["datasets"] = list(d["evaluation"]["datasets"])
        return d


_SECTIONS = {
    "model": ModelConfig,
    "training": TrainingConfig,
    "aggregation": AggregationSettings,
    "evaluation": EvaluationConfig,
    "data": DataConfig,
}


def _build(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        kw[k] = tuple(v) if isinstance(v, list) and k in ("widths", "datasets", "inference") else v
    return cls(**kw)


def from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    sections = {}
    for name, cls in _SECTIONS.items():
        sub = d.pop(name, {}) or {}
        if not isinstance(sub, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _build(cls, sub, f"[{name}]")
    top = _build(ExperimentConfig, d, "top level")
    for name, value in sections.items():
        setattr(top, name, value)
    return top.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return from_dict(raw)
