"""Run configuration: JSON file + ``section.key=value`` overrides over defaults."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import SyntheticFactorizedSpec
from .losses import ABLATIONS, LossWeights
from .networks import SKIP_MODES


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "synthetic"  # synthetic | pgm
    content_dim: int = 2
    style_dim: int = 1
    content_bounds: list = field(default_factory=lambda: [-1.0, 1.0])
    style_bounds_a: list = field(default_factory=lambda: [-1.0, 1.0])
    style_bounds_b: list = field(default_factory=lambda: [-1.0, 1.0])
    n_samples: int = 10_000
    path_a: str | None = None
    path_b: str | None = None


@dataclass
class ModelConfig:
    n_z: int = 8
    hidden: int = 64
    layers: int = 3
    code_dim: int = 16
    slope: float = 0.2
    skip: str = "gated"  # none | atanh | add | gated
    gate_init: float = 0.25


@dataclass
class LossConfig:
    lambda_adv: float = 1.0
    lambda_info: float = 1.0
    lambda_cyc: float = 50.0
    lambda_kl: float = 0.1
    lambda_lat: float = 10.0
    ablation: str = "full"


@dataclass
class OptimConfig:
    lr_d: float = 2e-4
    lr_g: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 5000
    batch: int = 64
    separate_phase_updates: bool = False


@dataclass
class IOConfig:
    out_dir: str = "runs/default"
    log_interval: int = 50
    checkpoint_interval: int = 1000


SECTIONS = {"data": DataConfig, "model": ModelConfig, "loss": LossConfig, "optim": OptimConfig, "io": IOConfig}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    io: IOConfig = field(default_factory=IOConfig)
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.data.kind not in ("synthetic", "pgm"):
            raise ConfigError(f"data.kind: expected 'synthetic' or 'pgm', got {self.data.kind!r}")
        if self.data.kind == "pgm" and not (self.data.path_a and self.data.path_b):
            raise ConfigError("data.path_a / data.path_b are required when data.kind is 'pgm'")
        if self.model.skip not in SKIP_MODES:
            raise ConfigError(f"model.skip: expected one of {SKIP_MODES}, got {self.model.skip!r}")
        if self.loss.ablation not in ABLATIONS:
            raise ConfigError(f"loss.ablation: expected one of {ABLATIONS}, got {self.loss.ablation!r}")
        for key in ("lambda_adv", "lambda_info", "lambda_cyc", "lambda_kl", "lambda_lat"):
            if getattr(self.loss, key) < 0:
                raise ConfigError(f"loss.{key} must be non-negative")
        for key in ("lr_d", "lr_g", "eps"):
            if not getattr(self.optim, key) > 0:
                raise ConfigError(f"optim.{key} must be positive")
        if self.optim.steps < 0:
            raise ConfigError("optim.steps must be >= 0")
        if self.optim.batch < 1:
            raise ConfigError("optim.batch must be positive")
        for key in ("beta1", "beta2"):
            if not 0 <= getattr(self.optim, key) < 1:
                raise ConfigError(f"optim.{key} must lie in [0, 1)")
        for key in ("n_z", "hidden", "layers", "code_dim"):
            if getattr(self.model, key) < 1:
                raise ConfigError(f"model.{key} must be positive")
        if self.io.log_interval < 1 or self.io.checkpoint_interval < 1:
            raise ConfigError("io intervals must be positive")

    # ---- conversions
    def loss_weights(self) -> LossWeights:
        lc = self.loss
        return LossWeights.for_ablation(lc.ablation, lambda_adv=lc.lambda_adv, lambda_info=lc.lambda_info,
                                        lambda_cyc=lc.lambda_cyc, lambda_kl=lc.lambda_kl,
                                        lambda_lat=lc.lambda_lat)

    def synthetic_spec(self, seed_offset: int = 0) -> SyntheticFactorizedSpec:
        d = self.data
        return SyntheticFactorizedSpec(d.content_dim, d.style_dim, tuple(d.content_bounds),
                                       tuple(d.style_bounds_a), tuple(d.style_bounds_b),
                                       d.n_samples, self.seed + seed_offset)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        kwargs = {}
        for key, value in raw.items():
            if key == "seed":
                kwargs["seed"] = _coerce("seed", int, value)
                continue
            if key not in SECTIONS:
                raise ConfigError(f"unknown config key {key!r}")
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            kwargs[key] = _build_section(key, SECTIONS[key], value)
        return cls(**kwargs)


def _build_section(name: str, kind, raw: dict):
    known = {f.name: f for f in fields(kind)}
    values = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {name}.{key!r}")
        default = getattr(kind(), key)
        values[key] = _coerce(f"{name}.{key}", type(default) if default is not None else None, value)
    return kind(**values)


def _coerce(key: str, typ, value):
    if typ is None or value is None:
        return value
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if typ in (str, list) and isinstance(value, typ):
        return value
    raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}")


def parse_override(text: str) -> tuple[list[str], object]:
    """``section.key=value`` -> (["section", "key"], value); value parsed as JSON if possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    path, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path.strip().split("."), value


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = json.loads(json.dumps(raw))
    for text in overrides:
        keys, value = parse_override(text)
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {k!r} is not a section")
        node[keys[-1]] = value
    return raw


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(apply_overrides(raw, overrides or []))
