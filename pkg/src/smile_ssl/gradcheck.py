"""Finite-difference checks of every loss and of the model-through-loss composite."""

from __future__ import annotations

import numpy as np

from .data import PromptBank, sample_prompt
from .encoders import Model, ModelConfig
from .losses import LossConfig, average_correlation, cross_correlation, joint_loss, mv_bt_loss, red_min_loss, \
    vl_align_loss
from .tensor import Tensor, finite_difference_check
from .train import TrainConfig, ViewBatch, forward_losses

CHECKS = ("mv_bt", "vl_align", "red_min", "joint", "model")


def _leaf(rng: np.random.Generator, base: np.ndarray, rows: int) -> Tensor:
    # shared direction plus per-row spread, like encoder outputs; fully independent
    # rows at tau = 0.07 saturate the softmax and leave gradients near 1e-7,
    # below what central differences at h = 1e-5 can resolve in float64
    return Tensor(base + rng.uniform(-1, 1, size=(rows, base.size)), requires_grad=True)


def gradient_report(seed: int = 0, batch: int = 4, views: int = 3, dim: int = 8,
                    h: float = 1e-5) -> dict[str, float]:
    """Max relative error (autodiff vs central differences) per check."""
    rng = np.random.default_rng([seed, 77])
    cfg = LossConfig()
    base = rng.uniform(-2, 2, size=dim)
    pairs = [(_leaf(rng, base, batch), _leaf(rng, base, batch)) for _ in range(views)]
    clean = [_leaf(rng, base, batch) for _ in range(views)]
    fused = _leaf(rng, base, batch)
    text = _leaf(rng, base, batch)
    pair_params = [t for p in pairs for t in p]

    def mv():
        cbar = average_correlation([cross_correlation(a, b) for a, b in pairs])
        return mv_bt_loss(cbar, cfg.lambda_mv_bt)

    def vl():
        return vl_align_loss(clean, fused, text, cfg.tau)

    def red():
        return red_min_loss(fused, text, cfg.lambda_red_min)

    def joint():
        return joint_loss({"mv_bt": mv(), "vl_align": vl(), "red_min": red()}, cfg)[0]

    report = {
        "mv_bt": finite_difference_check(mv, pair_params, h),
        "vl_align": finite_difference_check(vl, clean + [fused, text], h),
        "red_min": finite_difference_check(red, [fused, text], h),
        "joint": finite_difference_check(joint, pair_params + clean + [fused, text], h),
    }

    bank = PromptBank.basic_six()
    input_dim = 6
    model = Model(ModelConfig(input_dim=input_dim, hidden=8, dim=dim, fusion_hidden=4, text_pretrain_steps=0),
                  bank, seed)
    x = rng.uniform(-2, 2, size=(batch, views, input_dim))
    classes = rng.integers(0, bank.n_classes, size=batch)
    prompts = [sample_prompt(int(c), bank, rng) for c in classes]
    vb = ViewBatch(x, np.arange(batch), classes, prompts)
    train_cfg = TrainConfig(model=model.cfg)

    def composite():
        # same augmentation draw on every evaluation
        return forward_losses(vb, model, train_cfg, np.random.default_rng([seed, 78]))[0]

    report["model"] = finite_difference_check(composite, list(model.trainable_parameters().values()), h)
    return report
