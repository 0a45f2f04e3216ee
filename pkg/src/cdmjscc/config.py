"""Training configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .transforms import ModelConfig


@dataclass
class TrainConfig:
    eta: float = 0.1
    lam: float = 2e-5
    beta_rate: float = 0.25
    snr_db_train: float = 10.0
    lr: float = 1e-4
    lr_decay_step: int = 0  # multiply lr by 0.1 from this step on; 0 disables
    batch_size: int = 4
    steps_stage1: int = 500
    steps_stage2: int = 500
    steps_stage3: int = 500
    seed: int = 42
    image_size: int = 32
    dataset: str = "synthetic"  # "synthetic" or a directory of PPM/PGM files
    dataset_count: int = 64
    k_min: int = 0
    k_max: int = 8
    n_train_steps: int = 64
    beta_start: float = 1e-4
    beta_end: float = 0.1
    n_test: int = 4
    precision: int = 32

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if self.beta_rate <= 0:
            raise ValueError("beta_rate must be positive")
        for name in ("steps_stage1", "steps_stage2", "steps_stage3", "lr_decay_step"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.image_size <= 0 or self.image_size % 4:
            raise ValueError(f"image_size must be a positive multiple of 4, got {self.image_size}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0 <= self.k_min <= self.k_max:
            raise ValueError("need 0 <= k_min <= k_max")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    def lr_at(self, step: int) -> float:
        if self.lr_decay_step and step >= self.lr_decay_step:
            return self.lr * 0.1
        return self.lr

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(text: str, like):
    if isinstance(like, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(int(v) for v in text.split(","))
    return text.strip()


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_from_mapping(values: dict[str, str], base: TrainConfig | None = None,
                        model_base: ModelConfig | None = None) -> tuple[TrainConfig, ModelConfig]:
    """Build configs from string values; ``model.*`` keys go to the model config."""
    base = base or TrainConfig()
    model_base = model_base or ModelConfig()
    train_names = {f.name for f in fields(TrainConfig)}
    model_names = {f.name for f in fields(ModelConfig)}
    train_kw, model_kw = {}, {}
    for key, text in values.items():
        if key.startswith("model."):
            name = key[len("model."):]
            if name not in model_names:
                raise ValueError(f"unknown config key {key!r}")
            model_kw[name] = _coerce(text, getattr(model_base, name))
        elif key in train_names:
            train_kw[key] = _coerce(text, getattr(base, key))
        elif key == "stage":
            continue
        else:
            raise ValueError(f"unknown config key {key!r}")
    return (dataclasses.replace(base, **train_kw),
            dataclasses.replace(model_base, **model_kw))


def load_config(path: str | Path) -> tuple[TrainConfig, ModelConfig]:
    return config_from_mapping(parse_key_values(Path(path).read_text(encoding="utf-8")))


def config_to_mapping(cfg: TrainConfig, model_cfg: ModelConfig) -> dict[str, str]:
    out = {f.name: _format(getattr(cfg, f.name)) for f in fields(TrainConfig)}
    out.update({f"model.{f.name}": _format(getattr(model_cfg, f.name)) for f in fields(ModelConfig)})
    return out


def dump_config(cfg: TrainConfig, model_cfg: ModelConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config_to_mapping(cfg, model_cfg).items())
