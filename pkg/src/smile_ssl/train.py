"""Deterministic mini-batch training of the joint objective with Adam."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import AugmentPolicy, Dataset, augment_pair, sample_prompt
from .encoders import Model, ModelConfig, checkpoint_paths, load_model, save_model
from .errors import BatchTooSmallError, ConfigurationError, DivergenceError
from .losses import (
    LossBreakdown,
    LossConfig,
    average_correlation,
    cross_correlation,
    joint_loss,
    mv_bt_loss,
    red_min_loss,
    vl_align_loss,
)
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

COMPONENTS = ("mv_bt", "vl_align", "red_min")
METRICS_HEADER = ["epoch", "step", "mv_bt", "vl_align", "red_min", "total",
                  "cbar_diag_mean", "cbar_offdiag_mean", "fusion_entropy"]
DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_schedule: str = "constant"
    seed: int = 0
    checkpoint_every: int = 0
    disabled_components: list[str] = field(default_factory=list)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError("train.epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigurationError("train.batch_size must be >= 2 (batch standardization)")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigurationError("train.learning_rate must be > 0 and weight_decay >= 0")
        if self.lr_schedule != "constant":
            raise ConfigurationError(f"unknown lr_schedule {self.lr_schedule!r}; only 'constant' is available")
        unknown = set(self.disabled_components) - set(COMPONENTS)
        if unknown:
            raise ConfigurationError(f"unknown loss components {sorted(unknown)}; expected {COMPONENTS}")
        self.model.validate()
        self.loss.validate()
        self.augment.validate()

    def effective_loss(self) -> LossConfig:
        """Loss config with disabled components' weights set to zero."""
        cfg = LossConfig(**asdict(self.loss))
        for name, attr in zip(COMPONENTS, ("alpha", "beta", "gamma")):
            if name in self.disabled_components:
                setattr(cfg, attr, 0.0)
        return cfg


class Adam:
    """Adam with decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).

    Parameters without a gradient are treated as having a zero gradient.
    """

    def __init__(self, params, lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if not isinstance(params, dict):
            params = {str(i): p for i, p in enumerate(params)}
        self.params = {k: p for k, p in params.items() if p.requires_grad}
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"opt/m/{k}"] = self.m[k]
            out[f"opt/v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            self.m[k] = np.array(arrays[f"opt/m/{k}"])
            self.v[k] = np.array(arrays[f"opt/v/{k}"])
        self.step_count = step_count


def make_optimizer(model: Model, cfg: TrainConfig) -> Adam:
    return Adam(model.trainable_parameters(), lr=cfg.learning_rate,
                betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


@dataclass
class ViewBatch:
    views: np.ndarray
    subject_ids: np.ndarray
    class_ids: np.ndarray
    prompts: list[tuple[int, ...]]

    def __len__(self) -> int:
        return len(self.views)


def make_batch(dataset: Dataset, idx: np.ndarray, rng: np.random.Generator) -> ViewBatch:
    classes = dataset.class_ids[idx]
    prompts = [sample_prompt(int(c), dataset.bank, rng) for c in classes]
    return ViewBatch(dataset.views[idx], dataset.subject_ids[idx], classes, prompts)


@dataclass
class StepResult:
    breakdown: LossBreakdown
    cbar_diag_mean: float
    cbar_offdiag_mean: float
    fusion_entropy: float
    simplex_error: float
    min_weight: float


def correlation_stats(cbar: np.ndarray) -> tuple[float, float]:
    d = cbar.shape[0]
    off = ~np.eye(d, dtype=bool)
    return float(np.diag(cbar).mean()), float(np.abs(cbar[off]).mean()) if d > 1 else 0.0


def forward_losses(batch: ViewBatch, model: Model, cfg: TrainConfig, rng: np.random.Generator):
    """Augment, encode, fuse and evaluate every enabled loss component.

    Returns (total, breakdown, cbar values, fusion weights). Disabled
    components are not built into the graph and report 0.
    """
    b = len(batch)
    if b < 2:
        raise BatchTooSmallError(f"training batches need B >= 2, got {b}")
    loss_cfg = cfg.effective_loss()
    x_a, x_b = augment_pair(batch.views, cfg.augment, rng)
    n = batch.views.shape[1]
    z = model.encode_views(np.concatenate([x_a, x_b, batch.views], axis=0))
    # encode_views returns per view a [3B, d] block: rows A | B | clean
    pairs = [(zi[:b], zi[b:2 * b]) for zi in z]
    clean = [zi[2 * b:] for zi in z]
    fused, weights = model.fuse(clean)
    text = model.text.encode_batch(batch.prompts)

    parts: dict[str, Tensor] = {}
    if loss_cfg.alpha != 0.0:
        cbar = average_correlation([cross_correlation(a_, b_, loss_cfg.standardize) for a_, b_ in pairs])
        parts["mv_bt"] = mv_bt_loss(cbar, loss_cfg.lambda_mv_bt)
    else:
        with no_grad():
            cbar = average_correlation([cross_correlation(a_.detach(), b_.detach(), loss_cfg.standardize)
                                        for a_, b_ in pairs])
    if loss_cfg.beta != 0.0:
        parts["vl_align"] = vl_align_loss(clean, fused, text, loss_cfg.tau, loss_cfg.symmetric_align)
    if loss_cfg.gamma != 0.0:
        parts["red_min"] = red_min_loss(fused, text, loss_cfg.lambda_red_min, loss_cfg.standardize)
    _check_divergence(parts)
    total, breakdown = joint_loss(parts, loss_cfg)
    return total, breakdown, cbar.values.data, weights.data


def _check_divergence(parts: dict[str, Tensor]) -> None:
    for name, part in parts.items():
        val = part.item()
        if not math.isfinite(val) or abs(val) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"loss component {name} diverged (value {val})", name)


def train_step(batch: ViewBatch, model: Model, cfg: TrainConfig, optimizer: Adam,
               rng: np.random.Generator) -> StepResult:
    """One forward, backward and Adam update; returns pre-update statistics."""
    total, breakdown, cbar, weights = forward_losses(batch, model, cfg, rng)
    if not math.isfinite(breakdown.total) or abs(breakdown.total) > DIVERGENCE_LIMIT:
        raise DivergenceError(f"total loss diverged (value {breakdown.total})", "total")
    optimizer.zero_grad()
    if total.requires_grad:
        total.backward()
    optimizer.step()
    diag, offdiag = correlation_stats(cbar)
    entropy = float(-(weights * np.log(np.clip(weights, 1e-300, None))).sum(axis=1).mean())
    return StepResult(breakdown, diag, offdiag, entropy,
                      float(np.abs(weights.sum(axis=1) - 1.0).max()), float(weights.min()))


# ---------------------------------------------------------------- epoch loop
def batch_rng(seed: int, epoch: int, batch_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, batch_index, 7])


def epoch_batches(train_idx: np.ndarray, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch, 11]).permutation(train_idx)
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    # batch standardization needs two samples
    return [bt for bt in batches if len(bt) >= 2]


@dataclass
class TrainResult:
    model: Model
    optimizer: Adam
    log: list[dict] = field(default_factory=list)
    epoch: int = 0
    max_simplex_error: float = 0.0
    min_fusion_weight: float = 1.0
    checkpoints: list[Path] = field(default_factory=list)
    frozen_digest_start: str = ""
    frozen_digest_end: str = ""

    @property
    def frozen_unchanged(self) -> bool:
        return self.frozen_digest_start == self.frozen_digest_end


def frozen_digest(model: Model) -> str:
    """sha256 over every parameter the optimizer does not own."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if not p.requires_grad:
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def build_model(dataset: Dataset, cfg: TrainConfig) -> Model:
    mcfg = ModelConfig(**{**asdict(cfg.model), "input_dim": dataset.input_dim})
    return Model(mcfg, dataset.bank, seed=cfg.seed)


def save_training_checkpoint(result: TrainResult, cfg: TrainConfig, path: str | Path) -> Path:
    save_model(result.model, path, extra=result.optimizer.state_arrays(),
               meta={"epoch": result.epoch, "optimizer_step": result.optimizer.step_count,
                     "train_config": asdict(cfg)})
    return checkpoint_paths(path)[0]


def run_training(dataset: Dataset, fold: Sequence[int] | None, cfg: TrainConfig,
                 checkpoint_dir: str | Path | None = None, resume_from: str | Path | None = None,
                 stop_after: int | None = None,
                 on_step: Callable[[StepResult], None] | None = None) -> TrainResult:
    """Train on ``dataset`` rows ``fold`` (all rows when None).

    ``resume_from`` continues a checkpoint written by this function;
    ``stop_after`` halts after that epoch (for interrupted runs).
    """
    cfg.validate()
    train_idx = np.arange(len(dataset)) if fold is None else np.asarray(fold)
    if len(train_idx) < 2:
        raise BatchTooSmallError("training split needs at least 2 samples")
    if resume_from is not None:
        model, manifest, extra = load_model(resume_from)
        opt = make_optimizer(model, cfg)
        opt.load_state_arrays(extra, manifest["optimizer_step"])
        result = TrainResult(model, opt, epoch=manifest["epoch"])
    else:
        model = build_model(dataset, cfg)
        result = TrainResult(model, make_optimizer(model, cfg))
    result.frozen_digest_start = frozen_digest(model)
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(result.epoch + 1, last + 1):
        rows = []
        for bi, idx in enumerate(epoch_batches(train_idx, cfg.batch_size, cfg.seed, epoch)):
            rng = batch_rng(cfg.seed, epoch, bi)
            step = train_step(make_batch(dataset, idx, rng), model, cfg, result.optimizer, rng)
            result.max_simplex_error = max(result.max_simplex_error, step.simplex_error)
            result.min_fusion_weight = min(result.min_fusion_weight, step.min_weight)
            if on_step is not None:
                on_step(step)
            rows.append(step)
        result.epoch = epoch
        result.log.append(_epoch_row(epoch, result.optimizer.step_count, rows))
        if checkpoint_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"epoch_{epoch:04d}"
            result.checkpoints.append(save_training_checkpoint(result, cfg, path))
    result.frozen_digest_end = frozen_digest(model)
    return result


def _epoch_row(epoch: int, step: int, rows: list[StepResult]) -> dict:
    def mean(get):
        return float(np.mean([get(r) for r in rows]))

    return {
        "epoch": epoch,
        "step": step,
        "mv_bt": mean(lambda r: r.breakdown.mv_bt),
        "vl_align": mean(lambda r: r.breakdown.vl_align),
        "red_min": mean(lambda r: r.breakdown.red_min),
        "total": mean(lambda r: r.breakdown.total),
        "cbar_diag_mean": mean(lambda r: r.cbar_diag_mean),
        "cbar_offdiag_mean": mean(lambda r: r.cbar_offdiag_mean),
        "fusion_entropy": mean(lambda r: r.fusion_entropy),
    }


def probe_correlation(model: Model, dataset: Dataset, idx: Sequence[int], cfg: TrainConfig,
                      seed: int = 12345) -> tuple[float, float]:
    """(diag mean, mean |off-diagonal|) of the averaged view cross-correlation
    on a fixed augmentation of ``idx``; independent of the training stream."""
    views = dataset.views[np.asarray(idx)]
    b = len(views)
    rng = np.random.default_rng([seed, 13])
    x_a, x_b = augment_pair(views, cfg.augment, rng)
    with no_grad():
        z = model.encode_views(np.concatenate([x_a, x_b], axis=0))
        cbar = average_correlation([cross_correlation(zi[:b], zi[b:], cfg.loss.standardize) for zi in z])
    return correlation_stats(cbar.values.data)


def format_metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for r in rows:
        writer.writerow([r["epoch"], r["step"]] + [repr(float(r[k])) for k in METRICS_HEADER[2:]])
    return buf.getvalue()


def write_metrics_csv(rows: list[dict], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_metrics_csv(rows))
