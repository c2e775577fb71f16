"""Multi-view decorrelation, vision-language alignment and cross-modal
redundancy losses, and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BatchTooSmallError, ConfigurationError, DimensionError, EmptyInputError, NumericError
from .tensor import Tensor, column_standardize, cosine_matrix, log_softmax, stack


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    lambda_mv_bt: float = 5e-3
    lambda_red_min: float = 5e-3
    tau: float = 0.07
    standardize: bool = True
    symmetric_align: bool = False

    def validate(self) -> None:
        for name in ("alpha", "beta", "gamma", "lambda_mv_bt", "lambda_red_min"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"loss.{name} must be >= 0, got {getattr(self, name)}")
        if not self.tau > 0:
            raise ConfigurationError(f"loss.tau must be > 0, got {self.tau}")


@dataclass
class CorrelationMatrix:
    values: Tensor
    source: str = "view"

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass
class LossBreakdown:
    mv_bt: float
    vl_align: float
    red_min: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {"mv_bt": self.mv_bt, "vl_align": self.vl_align, "red_min": self.red_min, "total": self.total}


def _matrix(m) -> Tensor:
    return m.values if isinstance(m, CorrelationMatrix) else m


def cross_correlation(z_a: Tensor, z_b: Tensor, standardize: bool = True, source: str = "view") -> CorrelationMatrix:
    """(1/B) * z_a^T z_b over the batch, columns standardized first by default."""
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise DimensionError(f"cross_correlation needs two B x d batches of equal shape, got {z_a.shape}, {z_b.shape}")
    b = z_a.shape[0]
    if b < 2:
        raise BatchTooSmallError(f"cross-correlation needs B >= 2, got B={b}")
    if standardize:
        z_a, z_b = column_standardize(z_a), column_standardize(z_b)
    return CorrelationMatrix((z_a.T @ z_b) * (1.0 / b), source)


def average_correlation(mats: Sequence) -> CorrelationMatrix:
    if len(mats) == 0:
        raise EmptyInputError("average_correlation of an empty list")
    vals = [_matrix(m) for m in mats]
    if any(v.shape != vals[0].shape for v in vals):
        raise DimensionError("correlation matrices disagree in shape")
    return CorrelationMatrix(stack(vals).mean(axis=0), "averaged")


def redundancy_penalty(c, lam: float) -> Tensor:
    """sum_k (C_kk - 1)^2 + lam * sum_{k != l} C_kl^2."""
    c = _matrix(c)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DimensionError(f"expected a square matrix, got {c.shape}")
    eye = np.eye(c.shape[0])
    weights = eye + lam * (1.0 - eye)
    return (((c - eye) ** 2) * weights).sum()


def mv_bt_loss(cbar, lambda_mv_bt: float = 5e-3) -> Tensor:
    return redundancy_penalty(cbar, lambda_mv_bt)


def mv_bt_from_views(pairs: Sequence[tuple[Tensor, Tensor]], lambda_mv_bt: float = 5e-3,
                     standardize: bool = True) -> tuple[Tensor, CorrelationMatrix]:
    """Per-view cross-correlations of the (A, B) distortions, averaged, penalized."""
    cbar = average_correlation([cross_correlation(a, b, standardize) for a, b in pairs])
    return mv_bt_loss(cbar, lambda_mv_bt), cbar


def _info_nce(visual: Tensor, text: Tensor, tau: float) -> Tensor:
    # sum over rows of -log softmax(sim / tau)[b, b]
    logits = cosine_matrix(visual, text) * (1.0 / tau)
    return -(log_softmax(logits, axis=1) * np.eye(visual.shape[0])).sum()


def vl_align_loss(view_embeds: Sequence[Tensor], fused: Tensor, text: Tensor, tau: float = 0.07,
                  symmetric: bool = False) -> Tensor:
    """InfoNCE of every view embedding and the fused embedding against the
    batch's text embeddings, averaged over the N + 1 groups and B samples.

    ``symmetric`` adds the text-to-visual direction and averages the two.
    """
    if not tau > 0:
        raise ConfigurationError(f"tau must be > 0, got {tau}")
    groups = list(view_embeds) + [fused]
    b = text.shape[0] if text.ndim == 2 else 0
    if b == 0:
        raise EmptyInputError("vl_align_loss on an empty batch")
    for g in groups:
        if g.shape != text.shape:
            raise DimensionError(f"embedding shape {g.shape} does not match text {text.shape}")
    total = _info_nce(groups[0], text, tau)
    for g in groups[1:]:
        total = total + _info_nce(g, text, tau)
    if symmetric:
        for g in groups:
            total = total + _info_nce(text, g, tau)
        total = total * 0.5
    return total * (1.0 / (len(groups) * b))


def red_min_loss(fused: Tensor, text: Tensor, lambda_red_min: float = 5e-3, standardize: bool = True) -> Tensor:
    c_vt = cross_correlation(fused, text, standardize, source="visual-text")
    return redundancy_penalty(c_vt, lambda_red_min)


def joint_loss(parts: dict, config: LossConfig) -> tuple[Tensor, LossBreakdown]:
    """alpha * mv_bt + beta * vl_align + gamma * red_min.

    ``parts`` maps component name to a scalar Tensor or float. A component with
    weight 0 is left out of the total entirely, so it contributes no gradient.
    """
    config.validate()
    weights = {"mv_bt": config.alpha, "vl_align": config.beta, "red_min": config.gamma}
    values = {}
    total = Tensor(0.0)
    for name, w in weights.items():
        part = parts.get(name, 0.0)
        val = part.item() if isinstance(part, Tensor) else float(part)
        if not math.isfinite(val):
            raise NumericError(f"loss component {name} is not finite ({val})")
        values[name] = val
        if w != 0.0:
            total = total + (part * w if isinstance(part, Tensor) else Tensor(val * w))
    return total, LossBreakdown(values["mv_bt"], values["vl_align"], values["red_min"], total.item())
