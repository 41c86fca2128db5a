"""Differentiable primitives over 5-axis tensors.

Parameters are also 5-axis tensors: convolution weights are
``[Cout, Cin, kD, kH, kW]``, biases ``[1, C, 1, 1, 1]``, dense weights
``[Fout, Fin, 1, 1, 1]``. Scalars live in ``[1, 1, 1, 1, 1]`` tensors.

ReLU uses subgradient 0 at the origin; max-pool ties break to the first
element in row-major window order; clamps pass gradient only strictly inside
their bounds. These choices keep every backward deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import conv_kernels as ck
from .tensor import ShapeError, Tensor, check_finite, record_op


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 3D convolution (or its adjoint)."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    dilation: tuple[int, int, int] = (1, 1, 1)
    padding: str = "same"
    has_bias: bool = True

    def __post_init__(self):
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        for name in ("kernel", "stride", "dilation"):
            v = getattr(self, name)
            if len(v) != 3 or any(int(e) < 1 for e in v):
                raise ValueError(f"{name} must be three extents >= 1, got {v}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    def output_spatial(self, in_sp):
        return tuple(ck.conv_output_extent(e, k, s, r, self.padding)
                     for e, k, s, r in zip(in_sp, self.kernel, self.stride, self.dilation))


def _bias_vector(b: Tensor | None, channels: int, op: str):
    if b is None:
        return None
    if b.shape != (1, channels, 1, 1, 1):
        raise ShapeError(f"{op}: bias shape {b.shape}, expected {(1, channels, 1, 1, 1)}")
    return b.data.reshape(-1)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec) -> Tensor:
    """3D convolution of x [N,Cin,D,H,W] with w [Cout,Cin,kD,kH,kW]."""
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, spec wants {spec.in_channels}")
    expected_w = (spec.out_channels, spec.in_channels) + spec.kernel
    if w.shape != expected_w:
        raise ShapeError(f"conv3d: weight shape {w.shape}, expected {expected_w}")
    check_finite(x.data, "conv3d input")
    bvec = _bias_vector(b, spec.out_channels, "conv3d")
    out_data = ck.conv3d_forward(x.data, w.data, bvec, spec.stride, spec.dilation, spec.padding)
    inputs = (x, w) if b is None else (x, w, b)

    def make_backward():
        def backward(gout):
            gx, gw, gb = ck.conv3d_grads(
                gout, x.data, w.data, spec.stride, spec.dilation, spec.padding,
                need_x=x.requires_grad, need_w=w.requires_grad,
                need_b=b is not None and b.requires_grad)
            if gx is not None:
                x.accumulate_grad(gx)
            if gw is not None:
                w.accumulate_grad(gw)
            if gb is not None:
                b.accumulate_grad(gb.reshape(1, -1, 1, 1, 1))
        return backward

    return record_op("conv3d", inputs, out_data, make_backward)


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec) -> Tensor:
    """Adjoint of conv3d under the same spec: maps spec.out_channels back to
    spec.in_channels and multiplies every spatial extent by the stride."""
    if x.shape[1] != spec.out_channels:
        raise ShapeError(
            f"conv_transpose3d: input has {x.shape[1]} channels, spec wants {spec.out_channels}")
    expected_w = (spec.out_channels, spec.in_channels) + spec.kernel
    if w.shape != expected_w:
        raise ShapeError(f"conv_transpose3d: weight shape {w.shape}, expected {expected_w}")
    check_finite(x.data, "conv_transpose3d input")
    bvec = _bias_vector(b, spec.in_channels, "conv_transpose3d")
    out_data = ck.conv_transpose3d_forward(
        x.data, w.data, bvec, spec.stride, spec.dilation, spec.padding)
    inputs = (x, w) if b is None else (x, w, b)

    def make_backward():
        def backward(gout):
            gx, gw, gb = ck.conv_transpose3d_grads(
                gout, x.data, w.data, spec.stride, spec.dilation, spec.padding,
                need_x=x.requires_grad, need_w=w.requires_grad,
                need_b=b is not None and b.requires_grad)
            if gx is not None:
                x.accumulate_grad(gx)
            if gw is not None:
                w.accumulate_grad(gw)
            if gb is not None:
                b.accumulate_grad(gb.reshape(1, -1, 1, 1, 1))
        return backward

    return record_op("conv_transpose3d", inputs, out_data, make_backward)


def maxpool3d(x: Tensor, window=(2, 2, 2), stride=(2, 2, 2)) -> Tensor:
    """Windowed maximum; gradient routes to the first argmax per window."""
    in_sp = x.shape[2:]
    if any(k > e for k, e in zip(window, in_sp)):
        raise ShapeError(f"maxpool3d: window {window} larger than input {in_sp}")
    if window == tuple(stride) and any(e % s for e, s in zip(in_sp, stride)):
        raise ShapeError(f"maxpool3d: extents {in_sp} not divisible by stride {stride}")
    n, c = x.shape[:2]
    out_sp = tuple((e - k) // s + 1 for e, k, s in zip(in_sp, window, stride))
    win = sliding_window_view(x.data, window, axis=(2, 3, 4))[
        :, :,
        : (out_sp[0] - 1) * stride[0] + 1: stride[0],
        : (out_sp[1] - 1) * stride[1] + 1: stride[1],
        : (out_sp[2] - 1) * stride[2] + 1: stride[2]]
    flat = win.reshape(n, c, *out_sp, -1)
    idx = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def make_backward():
        def backward(gout):
            wd, wh, ww = np.unravel_index(idx, window)
            nn, cc, od, oh, ow = np.indices(idx.shape, sparse=False)
            gx = np.zeros_like(x.data)
            np.add.at(gx, (nn, cc,
                           od * stride[0] + wd,
                           oh * stride[1] + wh,
                           ow * stride[2] + ww), gout)
            x.accumulate_grad(gx)
        return backward

    return record_op("maxpool3d", (x,), np.ascontiguousarray(out_data), make_backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes, producing [N, C, 1, 1, 1]."""
    voxels = int(np.prod(x.shape[2:]))
    if voxels == 0:
        raise ShapeError("global_avg_pool: empty spatial volume")
    out_data = x.data.mean(axis=(2, 3, 4), keepdims=True)

    def make_backward():
        def backward(gout):
            x.accumulate_grad(np.broadcast_to(gout / voxels, x.shape).copy())
        return backward

    return record_op("global_avg_pool", (x,), out_data, make_backward)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map on the channel axis: [N,Fin,1,1,1] -> [N,Fout,1,1,1]."""
    if x.shape[2:] != (1, 1, 1):
        raise ShapeError(f"dense: expected [N,F,1,1,1] input, got {x.shape}")
    f_out, f_in = w.shape[:2]
    if w.shape[2:] != (1, 1, 1) or f_in != x.shape[1]:
        raise ShapeError(f"dense: weight shape {w.shape} incompatible with input {x.shape}")
    bvec = _bias_vector(b, f_out, "dense")
    x2 = x.data.reshape(x.shape[0], f_in)
    w2 = w.data.reshape(f_out, f_in)
    out2 = x2 @ w2.T + bvec
    out_data = out2.reshape(x.shape[0], f_out, 1, 1, 1)

    def make_backward():
        def backward(gout):
            g2 = gout.reshape(x.shape[0], f_out)
            if x.requires_grad:
                x.accumulate_grad((g2 @ w2).reshape(x.shape))
            if w.requires_grad:
                w.accumulate_grad((g2.T @ x2).reshape(w.shape))
            if b.requires_grad:
                b.accumulate_grad(g2.sum(axis=0).reshape(1, f_out, 1, 1, 1))
        return backward

    return record_op("dense", (x, w, b), out_data, make_backward)


def _check_same_shape(op, x, y):
    if x.shape != y.shape:
        raise ShapeError(f"{op}: shapes {x.shape} and {y.shape} differ")


def add(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape("add", x, y)

    def make_backward():
        def backward(gout):
            if x.requires_grad:
                x.accumulate_grad(gout)
            if y.requires_grad:
                y.accumulate_grad(gout)
        return backward

    return record_op("add", (x, y), x.data + y.data, make_backward)


def sub(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape("sub", x, y)

    def make_backward():
        def backward(gout):
            if x.requires_grad:
                x.accumulate_grad(gout)
            if y.requires_grad:
                y.accumulate_grad(-gout)
        return backward

    return record_op("sub", (x, y), x.data - y.data, make_backward)


def mul(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape("mul", x, y)

    def make_backward():
        def backward(gout):
            if x.requires_grad:
                x.accumulate_grad(gout * y.data)
            if y.requires_grad:
                y.accumulate_grad(gout * x.data)
        return backward

    return record_op("mul", (x, y), x.data * y.data, make_backward)


def div(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape("div", x, y)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = x.data / y.data

    def make_backward():
        def backward(gout):
            if x.requires_grad:
                x.accumulate_grad(gout / y.data)
            if y.requires_grad:
                y.accumulate_grad(-gout * x.data / (y.data * y.data))
        return backward

    return record_op("div", (x, y), out_data, make_backward)


def _relu_grad(x_data, gout):
    return gout * (x_data > 0)


def relu(x: Tensor) -> Tensor:
    def make_backward():
        def backward(gout):
            x.accumulate_grad(_relu_grad(x.data, gout))
        return backward

    return record_op("relu", (x,), np.maximum(x.data, 0), make_backward)


def _sigmoid_grad(out_data, gout):
    return gout * out_data * (1.0 - out_data)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out_data = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                        np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd)))).astype(xd.dtype)

    def make_backward():
        def backward(gout):
            x.accumulate_grad(_sigmoid_grad(out_data, gout))
        return backward

    return record_op("sigmoid", (x,), out_data, make_backward)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply x by per-channel scales s of shape [N, C, 1, 1, 1]."""
    if s.shape != (x.shape[0], x.shape[1], 1, 1, 1):
        raise ShapeError(f"scale_channels: scale shape {s.shape} does not match {x.shape}")

    def make_backward():
        def backward(gout):
            if x.requires_grad:
                x.accumulate_grad(gout * s.data)
            if s.requires_grad:
                s.accumulate_grad((gout * x.data).sum(axis=(2, 3, 4), keepdims=True))
        return backward

    return record_op("scale_channels", (x, s), x.data * s.data, make_backward)


def concat_channels(*xs: Tensor) -> Tensor:
    if len(xs) < 2:
        raise ShapeError("concat_channels needs at least two tensors")
    ref = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0],) + t.shape[2:] != (ref[0],) + ref[2:]:
            raise ShapeError(f"concat_channels: non-channel extents differ: {ref} vs {t.shape}")
    out_data = np.concatenate([t.data for t in xs], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in xs])

    def make_backward():
        def backward(gout):
            for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    t.accumulate_grad(gout[:, lo:hi])
        return backward

    return record_op("concat_channels", xs, out_data, make_backward)


def neg(x: Tensor) -> Tensor:
    return mul_const(x, -1.0)


def add_const(x: Tensor, c: float) -> Tensor:
    def make_backward():
        def backward(gout):
            x.accumulate_grad(gout)
        return backward

    return record_op("add_const", (x,), x.data + c, make_backward)


def mul_const(x: Tensor, c: float) -> Tensor:
    def make_backward():
        def backward(gout):
            x.accumulate_grad(gout * c)
        return backward

    return record_op("mul_const", (x,), x.data * c, make_backward)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(x.data)

    def make_backward():
        def backward(gout):
            x.accumulate_grad(gout / x.data)
        return backward

    return record_op("log", (x,), out_data, make_backward)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def make_backward():
        def backward(gout):
            x.accumulate_grad(gout * out_data)
        return backward

    return record_op("exp", (x,), out_data, make_backward)


def pow_const(x: Tensor, p: float) -> Tensor:
    """x ** p; callers clamp the base away from 0 when p < 1."""
    def make_backward():
        def backward(gout):
            x.accumulate_grad(gout * p * np.power(x.data, p - 1.0))
        return backward

    return record_op("pow_const", (x,), np.power(x.data, p), make_backward)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo); gradient passes only where x > lo."""
    def make_backward():
        def backward(gout):
            x.accumulate_grad(gout * (x.data > lo))
        return backward

    return record_op("clamp_min", (x,), np.maximum(x.data, lo), make_backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """clip(x, lo, hi); gradient passes only strictly inside the bounds."""
    def make_backward():
        def backward(gout):
            x.accumulate_grad(gout * ((x.data > lo) & (x.data < hi)))
        return backward

    return record_op("clamp", (x,), np.clip(x.data, lo, hi), make_backward)


def sum_all(x: Tensor) -> Tensor:
    out_data = np.full((1, 1, 1, 1, 1), x.data.sum(), dtype=x.dtype)

    def make_backward():
        def backward(gout):
            x.accumulate_grad(np.broadcast_to(gout.reshape(()), x.shape).copy())
        return backward

    return record_op("sum_all", (x,), out_data, make_backward)


def mean_all(x: Tensor) -> Tensor:
    out_data = np.full((1, 1, 1, 1, 1), x.data.mean(), dtype=x.dtype)

    def make_backward():
        def backward(gout):
            x.accumulate_grad(np.broadcast_to(gout.reshape(()) / x.size, x.shape).copy())
        return backward

    return record_op("mean_all", (x,), out_data, make_backward)
