"""Overlap metrics and training losses for binary volumetric segmentation.

The dice coefficient comes in two forms: the plain one on binary masks with
a linear denominator, and the soft one with a squared-sum denominator that
accepts probabilistic predictions and is differentiable. The compound loss
combines the negative-log soft dice and a weighted cross entropy on the
logit of the prediction, each raised to an exponent below one; both bases
are floored at eps before exponentiation because the fractional power has an
unbounded derivative at zero (a numerical guard, not part of the loss
definition).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ops
from .engine.tensor import ShapeError, Tensor


@dataclass(frozen=True)
class EllConfig:
    w_dsc: float = 0.8
    w_wcel: float = 0.2
    gamma_dsc: float = 0.3
    gamma_wcel: float = 0.3
    pos_weight: float = 1.0
    eps: float = 1e-7
    prob_clamp: float = 1e-7

    def __post_init__(self):
        if self.w_dsc < 0 or self.w_wcel < 0:
            raise ValueError("loss weights must be >= 0")
        if self.gamma_dsc <= 0 or self.gamma_wcel <= 0:
            raise ValueError("exponents must be > 0")
        if not 0 < self.prob_clamp < 0.5:
            raise ValueError("prob_clamp must lie in (0, 0.5)")


def _as_tensor(v, dtype=None) -> Tensor:
    if isinstance(v, Tensor):
        return v
    return Tensor(np.asarray(v), dtype=dtype)


def _as_const(v, dtype) -> np.ndarray:
    arr = v.data if isinstance(v, Tensor) else np.asarray(v)
    return arr.astype(dtype, copy=False)


def _check_shapes(p_shape, g_shape):
    if tuple(p_shape) != tuple(g_shape):
        raise ShapeError(f"prediction shape {p_shape} != ground truth shape {g_shape}")


def _check_binary(arr, name):
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be binary (0/1 values only)")


def dsc(p, g, eps: float = 1e-7) -> float:
    """Overlap of two binary masks: (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    pa = _as_const(p, np.float64)
    ga = _as_const(g, np.float64)
    if pa.shape != ga.shape:
        raise ShapeError(f"prediction shape {pa.shape} != ground truth shape {ga.shape}")
    _check_binary(pa, "prediction")
    _check_binary(ga, "ground truth")
    return (2.0 * float((pa * ga).sum()) + eps) / (float(pa.sum()) + float(ga.sum()) + eps)


def soft_dsc(p, g, eps: float = 1e-7) -> Tensor:
    """Differentiable dice: (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps).

    p may be a live graph tensor; g is treated as a constant. Returns a
    scalar tensor (use .item() for the value).
    """
    p = _as_tensor(p)
    garr = _as_const(g, p.dtype)
    _check_shapes(p.shape, garr.shape)
    gconst = Tensor(garr)
    num = ops.add_const(ops.mul_const(ops.sum_all(ops.mul(p, gconst)), 2.0), eps)
    den = ops.add_const(ops.sum_all(ops.mul(p, p)), float((garr * garr).sum()) + eps)
    return ops.div(num, den)


def dice_loss(p, g, eps: float = 1e-7) -> Tensor:
    return ops.add_const(ops.neg(soft_dsc(p, g, eps)), 1.0)


def wcel(p, g, pos_weight: float = 1.0, prob_clamp: float = 1e-7) -> Tensor:
    """Weighted cross entropy on logit(p), averaged over voxels.

    p is clamped to [prob_clamp, 1 - prob_clamp] before the logit; the
    log(1 + exp(-x)) term is evaluated in the overflow-safe form
    log(1 + exp(-|x|)) + max(-x, 0).
    """
    p = _as_tensor(p)
    garr = _as_const(g, p.dtype)
    _check_shapes(p.shape, garr.shape)
    pc = ops.clamp(p, prob_clamp, 1.0 - prob_clamp)
    x = ops.sub(ops.log(pc), ops.log(ops.add_const(ops.neg(pc), 1.0)))
    neg_x = ops.neg(x)
    abs_x = ops.add(ops.relu(x), ops.relu(neg_x))
    softplus = ops.log(ops.add_const(ops.exp(ops.neg(abs_x)), 1.0))
    stable = ops.add(softplus, ops.relu(neg_x))
    lw = Tensor(1.0 + (pos_weight - 1.0) * garr)
    one_minus_g = Tensor(1.0 - garr)
    return ops.mean_all(ops.add(ops.mul(x, one_minus_g), ops.mul(stable, lw)))


def ell(p, g, cfg: EllConfig = EllConfig()) -> Tensor:
    """w_dsc * (-ln soft_dsc)^gamma_dsc + w_wcel * wcel^gamma_wcel."""
    p = _as_tensor(p)
    term_dsc = ops.pow_const(
        ops.clamp_min(ops.neg(ops.log(soft_dsc(p, g, cfg.eps))), cfg.eps), cfg.gamma_dsc)
    term_wcel = ops.pow_const(
        ops.clamp_min(wcel(p, g, cfg.pos_weight, cfg.prob_clamp), cfg.eps), cfg.gamma_wcel)
    return ops.add(ops.mul_const(term_dsc, cfg.w_dsc), ops.mul_const(term_wcel, cfg.w_wcel))


def threshold(p, tau: float = 0.5) -> Tensor:
    """Binarize at tau: 1 where p >= tau, else 0. Idempotent on binary input."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {tau}")
    arr = _as_const(p, np.float32)
    return Tensor((arr >= tau).astype(arr.dtype))
