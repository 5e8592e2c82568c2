"""Run configuration: a flat ``key=value`` file plus command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ..adapt import LossConfig
from ..crf import CrfConfig
from ..errors import ConfigurationError
from ..pyramid import BackboneSpec, resnet50_spec, toy_spec


@dataclass(frozen=True)
class RunConfig:
    input_size: int | None = 400
    shots: int = 1
    aug_count: int = 2
    max_shear_deg: float = 20.0
    temperature: float = 0.5
    epochs: int = 25
    learning_rate: float = 0.01
    momentum: float = 0.0
    adapter_channels: int = 64
    sxy_gaussian: float = 1.0
    sxy_bilateral: float = 35.0
    srgb: float = 13.0
    compat_gaussian: float = 2.0
    compat_bilateral: float = 1.0
    crf_iterations: int = 10
    crf_temperature: float = 1.0
    crf_backend: str = "auto"
    refine: bool = True
    backbone: str = "resnet50"
    backbone_weights: str | None = None
    toy_strides: tuple[int, ...] = (2, 4, 8)
    toy_channels: tuple[int, ...] = (32, 64, 128)
    backbone_seed: int = 0
    quick_infer: bool = False
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.aug_count < 1:
            raise ConfigurationError("aug_count must be >= 1")
        if self.max_shear_deg < 0:
            raise ConfigurationError("max_shear_deg must be >= 0")
        if self.input_size is not None and self.input_size < 1:
            raise ConfigurationError("input_size must be positive")
        if len(self.toy_strides) != len(self.toy_channels):
            raise ConfigurationError("toy_strides and toy_channels need equal lengths")
        self.loss_config()
        self.crf_config()

    @classmethod
    def toy(cls, **overrides) -> "RunConfig":
        """Desk-scale preset: weight-free toy backbone on 64x64 inputs."""
        base = dict(input_size=64, backbone="toy", crf_backend="exact")
        base.update(overrides)
        return cls(**base)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.temperature, self.epochs, self.learning_rate, self.momentum, self.adapter_channels)

    def crf_config(self) -> CrfConfig:
        return CrfConfig(self.sxy_gaussian, self.sxy_bilateral, self.srgb, self.compat_gaussian,
                         self.compat_bilateral, self.crf_iterations, self.crf_temperature, self.crf_backend)

    def backbone_spec(self) -> BackboneSpec:
        if self.backbone == "toy":
            return toy_spec(self.toy_strides, self.toy_channels, self.backbone_seed)
        if self.backbone == "resnet50":
            return resnet50_spec(self.backbone_weights)
        raise ConfigurationError(f"unknown backbone {self.backbone!r}")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(map(str, value))
            lines.append(f"{f.name}={'' if value is None else value}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigurationError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    if "None" in kind and raw in ("", "none", "None"):
        return None
    try:
        if kind.startswith("tuple"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if kind.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigurationError(f"expected key=value, got {pair!r}")
        out[key.strip()] = _coerce(key.strip(), value)
    return out


def load_config(path=None, overrides=(), base: RunConfig | None = None) -> RunConfig:
    values = {}
    if path is not None:
        lines = Path(path).read_text().splitlines()
        pairs = [ln.split("#", 1)[0].strip() for ln in lines]
        values.update(parse_overrides(p for p in pairs if p))
    values.update(parse_overrides(overrides))
    return (base or RunConfig()).replace(**values)
