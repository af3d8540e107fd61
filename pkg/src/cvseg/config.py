"""Experiment configuration: nested dataclasses serialised as flat ``section.key = value`` text."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .data import DatasetSpec
from .errors import ConfigError


@dataclass(frozen=True)
class ViewConfig:
    scales: tuple = (0.5, 1.0)
    flip: bool = True
    brightness: float = 0.3
    contrast: float = 0.3
    saturation: float = 0.3
    hue: float = 0.1
    crop: int = 40


@dataclass(frozen=True)
class CvlrConfig:
    enabled: bool = True
    d: int = 256
    d_model: int = 64
    tau: float = 0.1
    iterations: int = 1
    shared_dictionary: bool = True
    latent_reg: bool = True
    fixed_background: bool = True


@dataclass(frozen=True)
class MvmcConfig:
    gamma: float = 0.9
    tie_band: float = 0.05
    refine: bool = True
    refine_iterations: int = 3
    kernel_size: int = 5
    sigma_color: float = 0.1
    filter_absent: bool = True


@dataclass(frozen=True)
class LossConfig:
    seg: float = 1.0
    cls: float = 1.0
    reg: float = 4.0
    warmup_epochs: int = 5
    mask_space: str = "probs"


@dataclass(frozen=True)
class OptimConfig:
    optimizer: str = "adam"
    epochs: int = 8
    batch_size: int = 8
    lr: float = 5e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: float = 5.0
    schedule: str = "poly"
    pixel_oversample: int = 5
    pixel_loss_scale: float = 2.0
    checkpoint_every: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    views: ViewConfig = field(default_factory=ViewConfig)
    cvlr: CvlrConfig = field(default_factory=CvlrConfig)
    mvmc: MvmcConfig = field(default_factory=MvmcConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    out: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        self.dataset.validate()
        v = self.views
        if not v.scales or any(s <= 0 for s in v.scales):
            raise ConfigError("views.scales", "need at least one positive scale")
        for s in v.scales:
            if (v.crop * s) % 4:
                raise ConfigError("views.crop", f"crop*scale must be a multiple of 4 (scale {s})")
        if v.crop > self.dataset.image_size:
            raise ConfigError("views.crop", "crop larger than dataset.image_size")
        for name in ("brightness", "contrast", "saturation"):
            if not 0 <= getattr(v, name) <= 0.3:
                raise ConfigError(f"views.{name}", "must lie in [0, 0.3]")
        if not 0 <= v.hue <= 0.1:
            raise ConfigError("views.hue", "must lie in [0, 0.1]")
        if self.cvlr.tau <= 0:
            raise ConfigError("cvlr.tau", "must be > 0")
        if self.cvlr.iterations < 0:
            raise ConfigError("cvlr.iterations", "must be >= 0")
        if self.cvlr.d < 1 or self.cvlr.d_model < 1:
            raise ConfigError("cvlr.d", "dimensions must be positive")
        if not 0 <= self.mvmc.gamma <= 1:
            raise ConfigError("mvmc.gamma", "must lie in [0, 1]")
        if self.mvmc.kernel_size % 2 == 0:
            raise ConfigError("mvmc.kernel_size", "must be odd")
        for name in ("seg", "cls", "reg"):
            if getattr(self.loss, name) < 0:
                raise ConfigError(f"loss.{name}", "must be nonnegative")
        if self.loss.mask_space not in ("logits", "probs"):
            raise ConfigError("loss.mask_space", "must be 'logits' or 'probs'")
        o = self.optim
        if o.optimizer not in ("sgd", "adam"):
            raise ConfigError("optim.optimizer", "must be 'sgd' or 'adam'")
        if o.schedule not in ("constant", "poly"):
            raise ConfigError("optim.schedule", "must be 'constant' or 'poly'")
        if o.epochs < 0 or o.batch_size < 1 or o.lr <= 0:
            raise ConfigError("optim", "epochs >= 0, batch_size >= 1 and lr > 0 required")
        return self

    # -- serialisation -------------------------------------------------------
    def items(self) -> Iterable[tuple]:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    yield f"{f.name}.{sub.name}", getattr(value, sub.name)
            else:
                yield f.name, value

    def to_text(self) -> str:
        return "".join(f"{key} = {format_value(value)}\n" for key, value in self.items())

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        cfg = self
        for key, raw in overrides.items():
            cfg = _set(cfg, key, raw)
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls().with_overrides(parse_pairs(text.splitlines()))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_pairs(lines: Iterable[str]) -> dict:
    pairs = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        pairs[key] = value
    return pairs


def _coerce(key: str, raw, current):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(float(p) for p in raw.replace("(", "").replace(")", "").split(",") if p.strip())
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def _set(cfg: ExperimentConfig, key: str, raw) -> ExperimentConfig:
    parts = key.split(".")
    if len(parts) == 1:
        if parts[0] not in {f.name for f in dataclasses.fields(cfg)} or dataclasses.is_dataclass(getattr(cfg, parts[0])):
            raise ConfigError(key, "unknown configuration key")
        return dataclasses.replace(cfg, **{key: _coerce(key, raw, getattr(cfg, key))})
    if len(parts) != 2 or not hasattr(cfg, parts[0]) or not dataclasses.is_dataclass(getattr(cfg, parts[0])):
        raise ConfigError(key, "unknown configuration key")
    section = getattr(cfg, parts[0])
    if parts[1] not in {f.name for f in dataclasses.fields(section)}:
        raise ConfigError(key, "unknown configuration key")
    value = _coerce(key, raw, getattr(section, parts[1]))
    return dataclasses.replace(cfg, **{parts[0]: dataclasses.replace(section, **{parts[1]: value})})
