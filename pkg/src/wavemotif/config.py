"""Run configuration: one versioned TOML document, overridable from the command line."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    graph: str | None = None
    roads: str | None = None
    records: str | None = None
    matrix: str | None = None
    output_dir: str = "out"


@dataclass
class ModelConfig:
    order: int = 3  # Chebyshev order K
    trend_window: int = 2  # m
    period_window: int = 7  # n
    hidden: int = 64
    filters: int = 32
    layers: int = 1
    laplacian: str = "motif"  # or "standard"


@dataclass
class WaveletConfig:
    level: int = 3
    name: str = "db4"
    mode: str = "symmetric"
    # "causal": every band value is read at the end of a trailing window of
    # `window` samples, for training and test alike. "split": train on the
    # decomposition of the training days, decompose all elapsed data at test time.
    policy: str = "causal"
    window: int = 126


@dataclass
class TrainingConfig:
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    gradient_clip: float | None = 5.0
    dtype: str = "float32"


@dataclass
class ArmaConfig:
    max_p: int = 3
    max_q: int = 3
    residual_window: int = 256


@dataclass
class SplitConfig:
    train_days: int = 24


@dataclass
class MetricsConfig:
    eps_mape: float = 1.0


_RANGES = {
    ("model", "order"): (0, 10),
    ("model", "trend_window"): (1, 96),
    ("model", "period_window"): (0, 28),
    ("model", "hidden"): (1, 4096),
    ("model", "filters"): (1, 1024),
    ("model", "layers"): (0, 8),
    ("wavelet", "level"): (1, 12),
    ("wavelet", "window"): (8, 100000),
    ("training", "learning_rate"): (0, 10),
    ("training", "epochs"): (0, 100000),
    ("training", "batch_size"): (1, 100000),
    ("arma", "max_p"): (1, 10),
    ("arma", "max_q"): (1, 10),
    ("arma", "residual_window"): (16, 100000),
    ("split", "train_days"): (1, 100000),
    ("metrics", "eps_mape"): (0, 1000),
}
_CHOICES = {
    ("model", "laplacian"): ("motif", "standard"),
    ("wavelet", "mode"): ("periodic", "symmetric"),
    ("wavelet", "policy"): ("causal", "split"),
    ("training", "dtype"): ("float32", "float64"),
}


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    wavelet: WaveletConfig = field(default_factory=WaveletConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    arma: ArmaConfig = field(default_factory=ArmaConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def validate(self, check_files: bool = False) -> "RunConfig":
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}; expected {CONFIG_VERSION}")
        for (sec, key), (lo, hi) in _RANGES.items():
            v = getattr(getattr(self, sec), key)
            if not lo <= v <= hi:
                raise ConfigError(f"{sec}.{key} = {v} outside [{lo}, {hi}]")
        for (sec, key), allowed in _CHOICES.items():
            v = getattr(getattr(self, sec), key)
            if v not in allowed:
                raise ConfigError(f"{sec}.{key} = {v!r}; expected one of {allowed}")
        if self.training.learning_rate < 0:
            raise ConfigError("training.learning_rate must be >= 0")
        clip = self.training.gradient_clip
        if clip is not None and clip <= 0:
            raise ConfigError("training.gradient_clip must be positive")
        if check_files:
            for key in ("graph", "roads", "records", "matrix"):
                p = getattr(self.paths, key)
                if p is not None and not Path(p).exists():
                    raise ConfigError(f"paths.{key}: {p} does not exist")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        cfg = cls(version=doc.pop("version", CONFIG_VERSION))
        for sec, values in doc.items():
            if sec not in _SECTIONS:
                raise ConfigError(f"unknown config section {sec!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"section {sec!r} must be a table")
            target = getattr(cfg, sec)
            names = {f.name for f in dataclasses.fields(target)}
            for key, v in values.items():
                if key not in names:
                    raise ConfigError(f"unknown key {sec}.{key}")
                setattr(target, key, v)
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(doc)

    def override(self, dotted: str, value) -> None:
        """Set ``section.key`` from a string, converting to the field's current type."""
        try:
            sec, key = dotted.split(".")
            target = getattr(self, sec)
        except (ValueError, AttributeError):
            raise ConfigError(f"bad override key {dotted!r}") from None
        if sec not in _SECTIONS or key not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown key {dotted}")
        current = getattr(target, key)
        if isinstance(value, str):
            if value.lower() in ("none", "null"):
                value = None
            elif isinstance(current, bool):
                value = value.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                value = int(value)
            elif isinstance(current, float) or key in ("gradient_clip",):
                value = float(value)
        setattr(target, key, value)
        self.validate()


_SECTIONS = ("paths", "model", "wavelet", "training", "arma", "split", "metrics")
