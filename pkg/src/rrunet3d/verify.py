"""The gradient verification suite behind the `gradcheck` command.

Every check runs its program in float64, compares tape gradients against
central finite differences, and reports the max relative error. Random
inputs are kept away from the non-differentiable points of relu, max-pool
ties, and clamp boundaries so the comparison is meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .blocks import (
    DownsampleConfig,
    Drrcu,
    DownsampleStage,
    RecurrentConvLayer,
    Rrcu,
    RrcuConfig,
    SeConfig,
    SeResidual,
    UpsampleStage,
)
from .engine import ops
from .engine.gradcheck import grad_check
from .engine.tensor import Tensor
from .model import ModelConfig, RecurrentResidualUNet3D


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


# Fallback difference steps: a relu kink inside the first window is resolved
# by shrinking the step; real gradient bugs survive every step.
REFINE_STEPS = (1e-5, 1e-6, 2e-7)


def _jitter_params(block, seed, scale=0.2):
    """Move zero-initialized biases (and weights, harmlessly) off the exact
    relu kinks so finite differences are taken at generic points."""
    rng = np.random.default_rng(seed)
    for owner, attr in block.iter_param_slots():
        t = getattr(owner, attr)
        t.data = t.data + rng.uniform(-scale, scale, size=t.shape)


def _away_from_zero(rng, shape, margin=0.2, scale=1.0):
    mag = rng.uniform(margin, margin + scale, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return mag * sign


def _projection(rng, shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def _check_primitive_conv(seed, stride, dilation, padding, bias):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 4, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3)) * 0.5
    spec = ops.ConvSpec(2, 3, (3, 3, 3), stride, dilation, padding, bias)
    out_sp = spec.output_spatial((4, 4, 4))
    r = _projection(np.random.default_rng(seed + 1), (1, 3) + out_sp)
    if bias:
        b = rng.standard_normal((1, 3, 1, 1, 1)) * 0.1

        def fn(ts):
            return ops.sum_all(ops.mul(ops.conv3d(ts[0], ts[1], ts[2], spec), r))
        return grad_check(fn, [x, w, b], refine=REFINE_STEPS)

    def fn(ts):
        return ops.sum_all(ops.mul(ops.conv3d(ts[0], ts[1], None, spec), r))
    return grad_check(fn, [x, w], refine=REFINE_STEPS)


def _check_conv_transpose(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 3, 2, 2, 2))
    w = rng.standard_normal((3, 2, 2, 2, 2)) * 0.5
    b = rng.standard_normal((1, 2, 1, 1, 1)) * 0.1
    spec = ops.ConvSpec(2, 3, (2, 2, 2), (2, 2, 2), (1, 1, 1), "same", True)
    r = _projection(np.random.default_rng(seed + 1), (1, 2, 4, 4, 4))

    def fn(ts):
        return ops.sum_all(ops.mul(ops.conv_transpose3d(ts[0], ts[1], ts[2], spec), r))
    return grad_check(fn, [x, w, b], refine=REFINE_STEPS)


def _check_maxpool(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 4, 4, 4))
    r = _projection(np.random.default_rng(seed + 1), (1, 2, 2, 2, 2))

    def fn(ts):
        return ops.sum_all(ops.mul(ops.maxpool3d(ts[0]), r))
    return grad_check(fn, [x], refine=REFINE_STEPS)


def _check_gap(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 2, 3, 2))
    r = _projection(np.random.default_rng(seed + 1), (2, 3, 1, 1, 1))

    def fn(ts):
        return ops.sum_all(ops.mul(ops.global_avg_pool(ts[0]), r))
    return grad_check(fn, [x], refine=REFINE_STEPS)


def _check_dense(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 5, 1, 1, 1))
    w = rng.standard_normal((3, 5, 1, 1, 1)) * 0.5
    b = rng.standard_normal((1, 3, 1, 1, 1)) * 0.1
    r = _projection(np.random.default_rng(seed + 1), (2, 3, 1, 1, 1))

    def fn(ts):
        return ops.sum_all(ops.mul(ops.dense(ts[0], ts[1], ts[2]), r))
    return grad_check(fn, [x, w, b], refine=REFINE_STEPS)


def _check_elementwise(seed):
    rng = np.random.default_rng(seed)
    shape = (1, 2, 3, 3, 3)
    x = _away_from_zero(rng, shape)
    y = _away_from_zero(rng, shape)
    s = rng.uniform(0.2, 0.9, size=(1, 2, 1, 1, 1))
    r = _projection(np.random.default_rng(seed + 1), shape)
    r2 = _projection(np.random.default_rng(seed + 2), (1, 4, 3, 3, 3))

    def fn(ts):
        xt, yt, st = ts
        e = ops.add(ops.mul(xt, yt), ops.sub(ops.relu(xt), ops.sigmoid(yt)))
        e = ops.add(e, ops.div(xt, ops.add_const(ops.mul(yt, yt), 1.0)))
        e = ops.scale_channels(e, st)
        c = ops.concat_channels(e, xt)
        return ops.add(ops.sum_all(ops.mul(e, r)), ops.sum_all(ops.mul(c, r2)))
    return grad_check(fn, [x, y, s], refine=REFINE_STEPS)


def _check_scalar_chain(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.2, 0.8, size=(1, 1, 2, 2, 2))

    def fn(ts):
        t = ops.clamp(ts[0], 0.01, 0.99)
        t = ops.log(ops.add_const(ops.exp(ops.neg(t)), 1.0))
        t = ops.pow_const(ops.clamp_min(ops.mean_all(t), 1e-7), 0.3)
        return ops.mul_const(t, 2.0)
    return grad_check(fn, [x], refine=REFINE_STEPS)


def _block_check(block, x, seed):
    """FD-check a block's input and every parameter by slot substitution."""
    _jitter_params(block, seed + 50)
    slots = list(block.iter_param_slots())
    originals = [getattr(owner, attr) for owner, attr in slots]
    arrays = [x] + [t.data for t in originals]

    out_probe = block(Tensor(x, dtype=np.float64))
    r = _projection(np.random.default_rng(seed + 1), out_probe.shape)

    def fn(ts):
        for (owner, attr), t in zip(slots, ts[1:]):
            setattr(owner, attr, t)
        out = block(ts[0])
        return ops.sum_all(ops.mul(out, r))
    return grad_check(fn, arrays, refine=REFINE_STEPS)


def _dyn_rng(seed):
    return np.random.default_rng(seed)


def _check_recurrent_layer(seed):
    rng = _dyn_rng(seed)
    block = RecurrentConvLayer(rng, channels=2, depth=2, dtype=np.float64)
    x = rng.standard_normal((1, 2, 3, 3, 3))
    return _block_check(block, x, seed)


def _check_rrcu(seed):
    rng = _dyn_rng(seed)
    cfg = RrcuConfig(filters=3, depth=2, dilation=(2, 2, 2))
    block = Rrcu(rng, 2, cfg, dtype=np.float64)
    x = rng.standard_normal((1, 2, 4, 4, 4))
    return _block_check(block, x, seed)


def _check_se_residual(seed):
    rng = _dyn_rng(seed)
    block = SeResidual(rng, SeConfig(channels=3, reduction=2), dtype=np.float64)
    x = _away_from_zero(rng, (1, 3, 3, 3, 3))
    return _block_check(block, x, seed)


def _check_drrcu(seed):
    rng = _dyn_rng(seed)
    block = Drrcu(rng, 1, RrcuConfig(filters=2, depth=1), SeConfig(2, 2), dtype=np.float64)
    x = rng.standard_normal((1, 1, 4, 4, 4))
    return _block_check(block, x, seed)


def _check_downsample(seed, mode):
    rng = _dyn_rng(seed)
    block = DownsampleStage(rng, DownsampleConfig(mode=mode), dtype=np.float64)
    x = rng.standard_normal((1, 1, 4, 4, 4))
    return _block_check(block, x, seed)


def _check_upsample(seed):
    rng = _dyn_rng(seed)
    block = UpsampleStage(rng, in_channels=2, dtype=np.float64)
    x = rng.standard_normal((1, 2, 2, 2, 2))
    return _block_check(block, x, seed)


def _check_dice_loss(seed):
    rng = _dyn_rng(seed)
    p = rng.uniform(0.1, 0.9, size=(1, 1, 3, 3, 3))
    g = (rng.uniform(size=(1, 1, 3, 3, 3)) > 0.5).astype(np.float64)

    def fn(ts):
        return losses.dice_loss(ts[0], g)
    return grad_check(fn, [p], refine=REFINE_STEPS)


def _check_ell(seed):
    rng = _dyn_rng(seed)
    p = rng.uniform(0.15, 0.85, size=(1, 1, 3, 3, 3))
    g = (rng.uniform(size=(1, 1, 3, 3, 3)) > 0.5).astype(np.float64)
    cfg = losses.EllConfig(pos_weight=2.0)

    def fn(ts):
        return losses.ell(ts[0], g, cfg)
    return grad_check(fn, [p], refine=REFINE_STEPS)


def _check_wcel(seed):
    rng = _dyn_rng(seed)
    p = rng.uniform(0.1, 0.9, size=(1, 1, 3, 3, 3))
    g = (rng.uniform(size=(1, 1, 3, 3, 3)) > 0.5).astype(np.float64)

    def fn(ts):
        return losses.wcel(ts[0], g, pos_weight=2.0)
    return grad_check(fn, [p], refine=REFINE_STEPS)


def _check_toy_model(seed, variant="dynamic", filters=(1, 2, 2, 3), size=16,
                     stem_stages=1, sample=None):
    config = ModelConfig.preset(variant, filters=filters,
                                depths=(1, 2, 3, 4) if variant == "dynamic" else (2, 2, 2, 2),
                                stem_stages=stem_stages, se_reduction=2)
    model = RecurrentResidualUNet3D(config, seed=seed).astype(np.float64)
    _jitter_params(model, seed + 50)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(1, 1, size, size, size))
    g = (rng.uniform(size=(1, 1, size, size, size)) > 0.7).astype(np.float64)
    slots = list(model.iter_param_slots())
    originals = [getattr(owner, attr) for owner, attr in slots]
    arrays = [t.data for t in originals]

    def fn(ts):
        for (owner, attr), t in zip(slots, ts):
            setattr(owner, attr, t)
        return losses.dice_loss(model(Tensor(x, dtype=np.float64)), g)
    return grad_check(fn, arrays, sample=sample, sample_seed=seed, refine=REFINE_STEPS)


def gradient_checks(seed: int = 0):
    """Named checks in suite order; each returns a max relative error."""
    return [
        ("conv3d/same/stride1/dilation1", lambda: _check_primitive_conv(seed, (1, 1, 1), (1, 1, 1), "same", True)),
        ("conv3d/same/stride2/dilation2", lambda: _check_primitive_conv(seed + 1, (2, 2, 2), (2, 2, 2), "same", True)),
        ("conv3d/valid/stride1/dilation1", lambda: _check_primitive_conv(seed + 2, (1, 1, 1), (1, 1, 1), "valid", False)),
        ("conv_transpose3d/2x2x2/stride2", lambda: _check_conv_transpose(seed + 3)),
        ("maxpool3d/2x2x2", lambda: _check_maxpool(seed + 4)),
        ("global_avg_pool", lambda: _check_gap(seed + 5)),
        ("dense", lambda: _check_dense(seed + 6)),
        ("elementwise/add,mul,sub,div,relu,sigmoid,scale,concat", lambda: _check_elementwise(seed + 7)),
        ("scalar/log,exp,pow,clamp", lambda: _check_scalar_chain(seed + 8)),
        ("recurrent_conv_layer/depth2", lambda: _check_recurrent_layer(seed + 9)),
        ("rrcu/depth2/filters3", lambda: _check_rrcu(seed + 10)),
        ("se_residual", lambda: _check_se_residual(seed + 11)),
        ("drrcu/depth1/filters2", lambda: _check_drrcu(seed + 12)),
        ("downsample/add", lambda: _check_downsample(seed + 13, "add")),
        ("downsample/inception", lambda: _check_downsample(seed + 14, "inception")),
        ("upsample", lambda: _check_upsample(seed + 15)),
        ("loss/dice", lambda: _check_dice_loss(seed + 16)),
        ("loss/wcel", lambda: _check_wcel(seed + 17)),
        ("loss/ell", lambda: _check_ell(seed + 18)),
        ("model/toy-dynamic-end-to-end", lambda: _check_toy_model(seed + 19)),
    ]


def run_gradient_suite(tolerance: float = 1e-3, seed: int = 0,
                       name_filter: str = "") -> list[CheckResult]:
    results = []
    for name, fn in gradient_checks(seed):
        if name_filter and name_filter not in name:
            continue
        results.append(CheckResult(name=name, max_error=fn(), tolerance=tolerance))
    return results
