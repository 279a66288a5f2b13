"""Experiment configuration: flat ``section.key = value`` files with strict parsing.

Example::

    output_dir = "runs/phantom"
    seed = 0
    train.epochs = 2
    train.batch_size = 4
    loss.lambda_cycle = 10
    network.base_channels = 16
    data.patch_size = 64

Values are JSON literals (numbers, ``true``/``false``, quoted strings,
arrays); anything that does not parse as JSON is taken as a bare string.
Unknown keys are rejected.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .losses import LossWeights
from .networks import NetworkConfig
from .phantom import PhantomConfig
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "DESPECKLE_OUTPUT_ROOT"


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    epochs: int = 100
    batch_size: int = 4
    noise_loss: str = "on"
    variant: str = "patch_adversarial"
    center_residuals: bool = True
    checkpoint_every: int = 10
    sample_every: int = 1
    max_steps: int = 0


@dataclass(frozen=True)
class DataSection:
    noisy_dir: str = ""
    clean_dir: str = ""
    boundary_manifest: str = ""
    patchset_dir: str = ""
    split: str = "disjoint"
    train_ids: Optional[list] = None
    patch_size: int = 256
    stride: int = 8
    noise_stride: int = 64
    crop_h: int = 450
    crop_w: int = 900
    min_patch_std: float = 1e-6
    workers: int = 1


@dataclass(frozen=True)
class PhantomSection:
    n_train: int = 6
    n_test: int = 2
    height: int = 450
    width: int = 900
    layer_means: tuple = (0.8, 0.5, 0.3)
    background: float = 0.05
    looks: float = 1.0


@dataclass(frozen=True)
class EvalSection:
    noisy_dir: str = ""
    roi_config: str = ""
    results_dir: str = ""
    checkpoint: str = ""
    method_name: str = "ours"
    baselines: tuple = ("median", "bilateral")


SECTIONS = {
    "train": TrainSection,
    "loss": LossWeights,
    "network": NetworkConfig,
    "data": DataSection,
    "phantom": PhantomSection,
    "eval": EvalSection,
}
TOP_LEVEL = {"output_dir": str, "seed": int}


@dataclass(frozen=True)
class ExperimentConfig:
    output_dir: str = "runs/default"
    seed: int = 0
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    data: DataSection = field(default_factory=DataSection)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, weights=self.loss, network=self.network, **asdict(self.train))

    def phantom_config(self) -> PhantomConfig:
        p = self.phantom
        return PhantomConfig(height=p.height, width=p.width, layer_means=tuple(p.layer_means),
                             background=p.background, looks=p.looks, seed=self.seed)

    def output_path(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def to_flat(self) -> dict:
        flat = {k: getattr(self, k) for k in TOP_LEVEL}
        for sec in SECTIONS:
            for k, v in asdict(getattr(self, sec)).items():
                flat[f"{sec}.{k}"] = list(v) if isinstance(v, tuple) else v
        return flat

    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_flat().items())


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(key: str, value, kind):
    if kind is bool or kind == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "on", "off", "yes", "no"):
            return value.lower() in ("true", "on", "yes")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if kind is int or kind == "int":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if kind is float or kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if kind is str or kind == "str":
        if isinstance(value, (dict, list)):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return str(value)
    if kind in (tuple, "tuple"):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected an array, got {value!r}")
        return tuple(value)
    if value is None or isinstance(value, list):
        return value
    raise ConfigError(f"{key}: expected an array or null, got {value!r}")


def _field_kind(dc, name):
    for f in fields(dc):
        if f.name == name:
            t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
            return {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple,
                    "tuple[float, ...]": tuple}.get(t, t)
    return None


def apply_overrides(cfg: ExperimentConfig, items: dict) -> ExperimentConfig:
    top, sections = {}, {s: {} for s in SECTIONS}
    for key, raw in items.items():
        if key in TOP_LEVEL:
            top[key] = _coerce(key, raw, TOP_LEVEL[key])
            continue
        sec, _, name = key.partition(".")
        if sec not in SECTIONS or not name or _field_kind(SECTIONS[sec], name) is None:
            raise ConfigError(f"unknown config key {key!r}")
        sections[sec][name] = _coerce(key, raw, _field_kind(SECTIONS[sec], name))
    try:
        updated = {s: replace(getattr(cfg, s), **vals) for s, vals in sections.items() if vals}
        return replace(cfg, **top, **updated)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in items:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        items[key] = _parse_value(value)
    return items


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read a config file (optional) and apply ``key=value`` override strings on top."""
    cfg = ExperimentConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        cfg = apply_overrides(cfg, parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    extra = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        k, _, v = item.partition("=")
        extra[k.strip()] = _parse_value(v)
    cfg = apply_overrides(cfg, extra) if extra else cfg
    cfg.train_config()  # cross-field checks (e.g. noise_loss=off with gaussian_kl)
    cfg.phantom_config()
    return cfg
