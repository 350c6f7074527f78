"""Dataclass configuration tree with JSON loading and dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for unknown keys, type mismatches and invalid values."""


@dataclass
class ModelConfig:
    body_preset: str = "desk"
    coarse_count: int = 64
    channels: int = 128
    backbone_widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    image_size: int = 112
    regressor_hidden: list[int] = field(default_factory=lambda: [256, 128])
    camera_hidden: int = 32

    def validate(self) -> None:
        if self.coarse_count < 1:
            raise ConfigError("model.coarse_count must be positive")
        if self.channels < 1:
            raise ConfigError("model.channels must be positive")
        if self.image_size % 16 != 0:
            raise ConfigError("model.image_size must be divisible by 16 (backbone stride)")


@dataclass
class EncoderConfig:
    block_widths: list[int] = field(default_factory=lambda: [256, 128, 64])
    heads_per_block: int = 4
    layers_per_block: int = 2
    ffn_ratio: int = 2

    def validate(self) -> None:
        w = self.block_widths
        if len(w) != 3:
            raise ConfigError("mte.block_widths must have exactly 3 entries")
        if not all(a > b for a, b in zip(w, w[1:])):
            raise ConfigError(f"mte.block_widths must be strictly decreasing, got {w}")
        if self.heads_per_block < 1 or any(x % self.heads_per_block for x in w):
            raise ConfigError("mte.block_widths must be divisible by mte.heads_per_block")
        if self.layers_per_block < 1:
            raise ConfigError("mte.layers_per_block must be >= 1")


@dataclass
class LossWeights:
    alpha: float = 1.0
    alpha_temp: float = 0.33
    beta: float = 1.0

    def validate(self) -> None:
        for name in ("alpha", "alpha_temp", "beta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss.{name} must be finite and >= 0, got {v}")


@dataclass
class MVMConfig:
    max_ratio: float = 0.3

    def validate(self) -> None:
        if not 0.0 <= self.max_ratio <= 1.0:
            raise ConfigError("mvm.max_ratio must lie in [0, 1]")


@dataclass
class DataConfig:
    count: int = 16
    seed: int = 0
    tiers: list[str] = field(default_factory=lambda: ["easy", "medium", "hard"])
    val_fraction: float = 0.0
    test_fraction: float = 0.0

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigError("data.count must be > 0")
        bad = set(self.tiers) - {"easy", "medium", "hard"}
        if bad or not self.tiers:
            raise ConfigError(f"data.tiers has unknown tiers {sorted(bad)}")
        if self.val_fraction < 0 or self.test_fraction < 0 or self.val_fraction + self.test_fraction >= 1:
            raise ConfigError("data split fractions must be >= 0 and sum below 1")


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    dtype: str = "float64"
    threads: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    mte: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    mvm: MVMConfig = field(default_factory=MVMConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "TrainConfig":
        # base_lr == 0 is allowed so a frozen finetune is expressible
        if not math.isfinite(self.base_lr) or self.base_lr < 0:
            raise ConfigError("base_lr must be finite and >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        for sub in (self.model, self.mte, self.loss, self.mvm, self.data):
            sub.validate()
        return self

    def total_steps(self, n_train: int) -> int:
        return self.epochs * math.ceil(n_train / self.batch_size)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


PRESETS: dict[str, dict[str, Any]] = {
    "desk": {},
    "full-scale": {
        "model": {
            "body_preset": "paper-shape",
            "coarse_count": 431,
            "channels": 2048,
            "backbone_widths": [16, 32, 64],
        },
        "mte": {"block_widths": [1024, 256, 64], "heads_per_block": 4, "layers_per_block": 4},
    },
    # 16 samples x 1000 epochs at batch 8 = 2000 steps; float32 keeps it within ten minutes on one core
    "desk-overfit": {"base_lr": 3e-4, "epochs": 1000, "dtype": "float32"},
}


def _coerce(value: Any, tp: Any, key: str) -> Any:
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping")
        return _from_dict(tp, value, prefix=key + ".")
    if origin is list:
        (item_tp,) = typing.get_args(tp)
        if isinstance(value, tuple):
            value = list(value)
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [_coerce(v, item_tp, key) for v in value]
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _from_dict(cls: type, data: dict[str, Any], prefix: str = "") -> Any:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(prefix + k for k in unknown)}")
    kwargs = {k: _coerce(v, hints[k], prefix + k) for k, v in data.items()}
    return cls(**kwargs)


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(data: dict[str, Any]) -> TrainConfig:
    return _from_dict(TrainConfig, data).validate()


def preset(name: str = "desk", **overrides: Any) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = config_from_dict(PRESETS[name])
    return apply_overrides(cfg, overrides) if overrides else cfg


def load_config(path: str | Path) -> TrainConfig:
    """Load a JSON config. A top-level ``"preset"`` key selects the base preset."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    base = data.pop("preset", "desk")
    if base not in PRESETS:
        raise ConfigError(f"unknown preset {base!r}")
    return config_from_dict(_deep_merge(PRESETS[base], data))


def parse_override(text: str) -> tuple[str, Any]:
    """Parse ``key=value``; the value is JSON if it parses, else a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    if "," in raw and not raw.lstrip().startswith("["):
        return key.strip(), [_parse_scalar(x.strip()) for x in raw.split(",")]
    return key.strip(), _parse_scalar(raw)


def _parse_scalar(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: TrainConfig, overrides: dict[str, Any] | list[str]) -> TrainConfig:
    """Return a new config with dotted-key overrides applied and type-checked."""
    if isinstance(overrides, list):
        overrides = dict(parse_override(o) for o in overrides)
    data = cfg.to_dict()
    for key, value in overrides.items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        if parts[-1] not in node or isinstance(node[parts[-1]], dict):
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = value
    return config_from_dict(data)
