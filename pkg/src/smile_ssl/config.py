"""Run configuration: nested dataclasses, strict JSON loading, dotted overrides."""

from __future__ import annotations

import json
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .data import AugmentPolicy, DataConfig
from .encoders import ModelConfig
from .errors import ConfigurationError
from .losses import LossConfig
from .train import TrainConfig


@dataclass
class EvalConfig:
    k: int = 10
    use_max_template: bool = False
    class_subset: list[int] = field(default_factory=lambda: [0, 4])
    target_domain_shift: float = 2.0
    target_noise_sd: float = 1.0
    target_seed_offset: int = 1000

    def validate(self) -> None:
        if self.k < 2:
            raise ConfigurationError("eval.k must be >= 2")
        if not self.class_subset:
            raise ConfigurationError("eval.class_subset must be non-empty")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.data.validate()
        self.train.validate()
        self.eval.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int) -> "RunConfig":
        """All randomness derives from one seed: data, training and splits."""
        cfg = from_dict(RunConfig, self.to_dict())
        cfg.data.seed = seed
        cfg.train.seed = seed
        return cfg


KEY_DOCS: dict[str, str] = {
    "data.n_subjects": "number of synthetic subjects",
    "data.samples_per_subject": "samples generated per subject (classes cycle per subject)",
    "data.n_classes": "expression classes; must match the prompt mode",
    "data.input_dim": "length of each view feature vector",
    "data.view_count": "views per sample, spread over -30..+30 degrees",
    "data.noise_sd": "per-view sensor noise sd",
    "data.subject_sd": "per-subject identity offset sd",
    "data.view_strength": "rotation per radian of view angle in the view transforms",
    "data.domain_shift": "sensor rotation applied to every view (0 = source domain)",
    "data.prompt_mode": "basic-six (6 emotions) or micro-five (micro-expressions)",
    "data.temporal": "generate T-frame sequences and rank-pool them into views",
    "data.sequence_length": "frames per sequence when temporal",
    "data.seed": "sample seed (overridden by --seed)",
    "data.anchor_seed": "class anchor seed; null = data.seed",
    "data.view_seed": "view transform seed; null = data.seed",
    "train.epochs": "training epochs",
    "train.batch_size": "mini-batch size B (>= 2)",
    "train.learning_rate": "Adam learning rate",
    "train.weight_decay": "decoupled weight decay factor",
    "train.adam_beta1": "Adam first-moment decay",
    "train.adam_beta2": "Adam second-moment decay",
    "train.adam_eps": "Adam epsilon",
    "train.lr_schedule": "learning-rate schedule (constant)",
    "train.seed": "initialization/shuffling seed (overridden by --seed)",
    "train.checkpoint_every": "write a checkpoint every n epochs (0 = never)",
    "train.disabled_components": "loss components switched off: mv_bt, vl_align, red_min",
    "train.model.input_dim": "encoder input length (taken from the dataset at build time)",
    "train.model.hidden": "visual encoder hidden width",
    "train.model.dim": "shared embedding dimension d",
    "train.model.fusion_hidden": "fusion score MLP hidden width",
    "train.model.text_pretrain_steps": "prompt-bank fitting steps before the text encoder is frozen",
    "train.loss.alpha": "weight of the multi-view decorrelation loss",
    "train.loss.beta": "weight of the vision-language alignment loss",
    "train.loss.gamma": "weight of the cross-modal redundancy loss",
    "train.loss.lambda_mv_bt": "off-diagonal weight in the multi-view loss",
    "train.loss.lambda_red_min": "off-diagonal weight in the redundancy loss",
    "train.loss.tau": "contrastive temperature",
    "train.loss.standardize": "standardize batch columns before cross-correlation",
    "train.loss.symmetric_align": "add the text-to-visual contrastive direction",
    "train.augment.noise_sd": "augmentation Gaussian noise sd",
    "train.augment.dropout": "augmentation per-feature dropout probability",
    "train.augment.scale_low": "augmentation random scale lower bound",
    "train.augment.scale_high": "augmentation random scale upper bound",
    "eval.k": "cross-validation folds",
    "eval.use_max_template": "match against the best template instead of the class centroid",
    "eval.class_subset": "class ids kept in cross-domain evaluation",
    "eval.target_domain_shift": "sensor rotation of the cross-domain target dataset",
    "eval.target_noise_sd": "noise sd of the cross-domain target dataset",
    "eval.target_seed_offset": "added to the seed for the target and held-out datasets",
}


def leaf_keys(cls=RunConfig, prefix: str = "") -> list[str]:
    keys = []
    hints = typing.get_type_hints(cls)
    for f in fields(cls):
        t = hints[f.name]
        if is_dataclass(t):
            keys += leaf_keys(t, f"{prefix}{f.name}.")
        else:
            keys.append(prefix + f.name)
    return keys


def from_dict(cls, obj: dict, path: str = ""):
    """Build dataclass ``cls`` from ``obj``; unknown keys are rejected."""
    if not isinstance(obj, dict):
        raise ConfigurationError(f"{path or 'config'}: expected an object, got {type(obj).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for key, val in obj.items():
        t = hints[key]
        if is_dataclass(t):
            kwargs[key] = from_dict(t, val, f"{path}{key}.")
        else:
            kwargs[key] = _coerce(val, t, path + key)
    return cls(**kwargs)


def _coerce(val: Any, t, key: str):
    origin = typing.get_origin(t)
    args = typing.get_args(t)
    if val is None:
        if type(None) in args:
            return None
        raise ConfigurationError(f"{key}: null is not allowed")
    if origin is typing.Union or str(origin) == "types.UnionType":
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(val, inner, key)
    if origin is list:
        if not isinstance(val, list):
            raise ConfigurationError(f"{key}: expected a list")
        return [_coerce(v, args[0], key) for v in val]
    if t is bool:
        if not isinstance(val, bool):
            raise ConfigurationError(f"{key}: expected true/false")
        return val
    if t is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigurationError(f"{key}: expected an integer")
        return val
    if t is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigurationError(f"{key}: expected a number")
        return float(val)
    if t is str:
        if not isinstance(val, str):
            raise ConfigurationError(f"{key}: expected a string")
        return val
    return val


def apply_overrides(obj: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values parse as JSON, else as strings."""
    valid = set(leaf_keys())
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in valid:
            raise ConfigurationError(f"unknown config key {key!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = obj
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return obj


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    base = benchmark_config().to_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        from_dict(RunConfig, user)  # reject unknown keys before merging
        base = _merge(base, user)
    cfg = from_dict(RunConfig, apply_overrides(base, overrides or []))
    cfg.validate()
    return cfg


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def benchmark_config() -> RunConfig:
    """The bundled default synthetic benchmark (mirrors configs/default.json)."""
    return RunConfig(
        data=DataConfig(input_dim=32, subject_sd=1.0, view_strength=3.0),
        train=TrainConfig(
            learning_rate=1e-3,
            loss=LossConfig(lambda_mv_bt=1.0 / 32),
            model=ModelConfig(input_dim=32),
            augment=AugmentPolicy(),
        ),
        eval=EvalConfig(),
    )
