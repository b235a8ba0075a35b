"""Run configuration and its INI-style file format.

Each nested dataclass is one ``[section]``; the top-level fields of
:class:`TrainConfig` live under ``[train]``. Unknown sections or keys are
rejected. Command-line overrides use ``section.key=value``.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import typing
from dataclasses import dataclass, field

from .losses import LossWeights
from .polar import PolarParams


class ConfigError(ValueError):
    pass


@dataclass
class GeometryConfig:
    sat_size: int = 750
    height: int = 112
    width: int = 616
    out_of_bounds: str = "clamp"

    @property
    def polar_params(self):
        return PolarParams(self.sat_size, self.sat_size, self.width, self.height)


@dataclass
class ModelConfig:
    gen_base: int = 32
    disc_base: int = 64
    n_bottleneck: int = 6
    resnet_blocks: tuple = (3, 4, 6)
    k_masks: int = 8
    normalize_descriptor: bool = True
    non_saturating: bool = True
    # full | no_gan (decoder trained with L1 only) | retrieval_only (no decoder, no discriminator)
    mode: str = "full"


@dataclass
class MiningConfig:
    keep_fraction: float = 0.5
    # -1 disables the fixed-step trigger
    start_step: int = -1
    # relative improvement of the smoothed retrieval loss per window; 0 disables
    plateau_threshold: float = 0.0
    plateau_window: int = 100


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    total_steps: int = 1000
    seed: int = 0
    augment: bool = True
    checkpoint_every: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    mining: MiningConfig = field(default_factory=MiningConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        if self.model.mode not in ("full", "no_gan", "retrieval_only"):
            raise ConfigError(f"unknown model.mode {self.model.mode!r}")
        if not 0 < self.mining.keep_fraction <= 1:
            raise ConfigError(f"mining.keep_fraction must be in (0, 1], got {self.mining.keep_fraction}")
        if self.geometry.height % 8 or self.geometry.width % 8:
            raise ConfigError("geometry.height and geometry.width must be divisible by 8")

    @property
    def feature_shape(self):
        return self.geometry.height // 8, self.geometry.width // 8


SECTIONS = ("train", "loss", "mining", "model", "geometry")


def _parse(value: str, kind):
    if kind is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind is tuple:
        return tuple(int(v) for v in value.replace(",", " ").split())
    return kind(value.strip())


def _format(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def _section_objects(cfg: TrainConfig):
    return {"train": cfg, "loss": cfg.loss, "mining": cfg.mining,
            "model": cfg.model, "geometry": cfg.geometry}


def to_dict(cfg: TrainConfig):
    out = {}
    for section, obj in _section_objects(cfg).items():
        out[section] = {
            f.name: getattr(obj, f.name)
            for f in dataclasses.fields(obj)
            if not dataclasses.is_dataclass(getattr(obj, f.name))
        }
    return out


def from_dict(values: dict) -> TrainConfig:
    """Build a config from ``{section: {key: value}}``; strings are parsed by field type."""
    parts = {}
    top = {}
    classes = {"loss": LossWeights, "mining": MiningConfig, "model": ModelConfig,
               "geometry": GeometryConfig}
    for section, entries in values.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        cls = TrainConfig if section == "train" else classes[section]
        hints = typing.get_type_hints(cls)
        names = {f.name for f in dataclasses.fields(cls) if f.name not in classes}
        kwargs = {}
        for key, value in entries.items():
            if key not in names:
                raise ConfigError(f"unknown config key {section}.{key}")
            kind = hints[key]
            try:
                kwargs[key] = _parse(value, kind) if isinstance(value, str) else kind(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}") from None
        if section == "train":
            top.update(kwargs)
        else:
            parts[section] = kwargs
    try:
        nested = {name: cls(**parts.get(name, {})) for name, cls in classes.items()}
        return TrainConfig(**top, **nested)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def dumps(cfg: TrainConfig) -> str:
    parser = configparser.ConfigParser()
    for section, entries in to_dict(cfg).items():
        parser[section] = {k: _format(v) for k, v in entries.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def loads(text: str) -> TrainConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return from_dict({s: dict(parser[s]) for s in parser.sections()})


def load(path) -> TrainConfig:
    with open(path) as fh:
        return loads(fh.read())


def save(cfg: TrainConfig, path):
    with open(path, "w") as fh:
        fh.write(dumps(cfg))


def with_overrides(cfg: TrainConfig, overrides) -> TrainConfig:
    """Apply ``section.key=value`` strings (a bare ``key`` means ``train.key``)."""
    values = to_dict(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, value = item.split("=", 1)
        section, _, name = key.strip().rpartition(".")
        section = section or "train"
        if section not in values:
            raise ConfigError(f"unknown config section [{section}]")
        if name not in values[section]:
            raise ConfigError(f"unknown config key {section}.{name}")
        values[section][name] = value
    return from_dict({s: {k: v if isinstance(v, str) else _format(v) for k, v in e.items()}
                      for s, e in values.items()})


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(dumps(cfg).encode()).hexdigest()[:16]
