"""Raw numpy kernels for 3D convolution, its adjoint, and their gradients.

Two interchangeable forward implementations exist: "direct" accumulates one
kernel tap at a time over strided views (the canonical path), "im2col"
materializes patches and performs a single matrix product. Both must agree
within 1e-5; the choice is a performance knob, never a semantic one.

The transposed convolution is defined as the exact adjoint of the forward
map: its output scatter reuses the same geometry the forward convolution
would use on the upsampled extents.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError

_backend = "direct"


def set_conv_backend(name: str) -> None:
    if name not in ("direct", "im2col"):
        raise ValueError(f"unknown conv backend {name!r}; use 'direct' or 'im2col'")
    global _backend
    _backend = name


def get_conv_backend() -> str:
    return _backend


def same_pads(extent: int, kernel: int, stride: int, dilation: int) -> tuple[int, int]:
    """(before, after) zero padding so the output extent is ceil(extent/stride)."""
    out = -(-extent // stride)
    span = dilation * (kernel - 1) + 1
    total = max((out - 1) * stride + span - extent, 0)
    return total // 2, total - total // 2


def conv_output_extent(extent: int, kernel: int, stride: int, dilation: int,
                       padding: str) -> int:
    span = dilation * (kernel - 1) + 1
    if padding == "same":
        return -(-extent // stride)
    out = (extent - span) // stride + 1
    if out < 1:
        raise ShapeError(
            f"valid convolution needs extent >= {span}, got {extent}")
    return out


def _geometry(in_sp, kernel, stride, dilation, padding):
    out_sp = tuple(conv_output_extent(e, k, s, r, padding)
                   for e, k, s, r in zip(in_sp, kernel, stride, dilation))
    if padding == "same":
        pads = tuple(same_pads(e, k, s, r)
                     for e, k, s, r in zip(in_sp, kernel, stride, dilation))
    else:
        pads = ((0, 0), (0, 0), (0, 0))
    return out_sp, pads


def _pad(x: np.ndarray, pads) -> np.ndarray:
    if all(p == (0, 0) for p in pads):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple(pads))


def _tap_slices(out_sp, stride, dilation, kd, kh, kw):
    return (
        slice(kd * dilation[0], kd * dilation[0] + (out_sp[0] - 1) * stride[0] + 1, stride[0]),
        slice(kh * dilation[1], kh * dilation[1] + (out_sp[1] - 1) * stride[1] + 1, stride[1]),
        slice(kw * dilation[2], kw * dilation[2] + (out_sp[2] - 1) * stride[2] + 1, stride[2]),
    )


def _forward_direct(x, w, stride, dilation, padding):
    out_sp, pads = _geometry(x.shape[2:], w.shape[2:], stride, dilation, padding)
    xp = _pad(x, pads)
    n, c_out = x.shape[0], w.shape[0]
    out = np.zeros((n, c_out) + out_sp, dtype=x.dtype)
    k_d, k_h, k_w = w.shape[2:]
    for kd in range(k_d):
        for kh in range(k_h):
            for kw in range(k_w):
                sd, sh, sw = _tap_slices(out_sp, stride, dilation, kd, kh, kw)
                xs = xp[:, :, sd, sh, sw]
                out += np.einsum("oi,nidhw->nodhw", w[:, :, kd, kh, kw], xs)
    return out


def _forward_im2col(x, w, stride, dilation, padding):
    out_sp, pads = _geometry(x.shape[2:], w.shape[2:], stride, dilation, padding)
    xp = _pad(x, pads)
    n, c_in = x.shape[:2]
    c_out = w.shape[0]
    k_d, k_h, k_w = w.shape[2:]
    span = tuple(r * (k - 1) + 1 for k, r in zip((k_d, k_h, k_w), dilation))
    win = sliding_window_view(xp, span, axis=(2, 3, 4))
    win = win[:, :,
              : (out_sp[0] - 1) * stride[0] + 1: stride[0],
              : (out_sp[1] - 1) * stride[1] + 1: stride[1],
              : (out_sp[2] - 1) * stride[2] + 1: stride[2],
              :: dilation[0], :: dilation[1], :: dilation[2]]
    # [N, Cin, oD, oH, oW, kD, kH, kW] -> [N, oVox, Cin*k]
    patches = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(
        n, out_sp[0] * out_sp[1] * out_sp[2], c_in * k_d * k_h * k_w)
    flat = patches @ w.reshape(c_out, -1).T
    return np.ascontiguousarray(
        flat.transpose(0, 2, 1).reshape(n, c_out, *out_sp))


def conv3d_forward(x, w, b, stride, dilation, padding):
    """x: [N,Cin,D,H,W], w: [Cout,Cin,kD,kH,kW], b: [Cout] or None."""
    fwd = _forward_direct if _backend == "direct" else _forward_im2col
    out = fwd(x, w, stride, dilation, padding)
    if b is not None:
        out += b.reshape(1, -1, 1, 1, 1)
    return out


def _scatter_input_grad(gout, w, in_sp, stride, dilation, padding):
    """Adjoint of the forward map: scatter gout back onto an in_sp-shaped field."""
    out_sp, pads = _geometry(in_sp, w.shape[2:], stride, dilation, padding)
    if out_sp != gout.shape[2:]:
        raise ShapeError(
            f"upstream spatial shape {gout.shape[2:]} does not match the "
            f"forward output {out_sp} for input {in_sp}")
    n, c_in = gout.shape[0], w.shape[1]
    padded_sp = tuple(e + pb + pa for e, (pb, pa) in zip(in_sp, pads))
    gxp = np.zeros((n, c_in) + padded_sp, dtype=gout.dtype)
    k_d, k_h, k_w = w.shape[2:]
    for kd in range(k_d):
        for kh in range(k_h):
            for kw in range(k_w):
                sd, sh, sw = _tap_slices(out_sp, stride, dilation, kd, kh, kw)
                gxp[:, :, sd, sh, sw] += np.einsum(
                    "oi,nodhw->nidhw", w[:, :, kd, kh, kw], gout)
    return gxp[:, :,
                pads[0][0]: pads[0][0] + in_sp[0],
                pads[1][0]: pads[1][0] + in_sp[1],
                pads[2][0]: pads[2][0] + in_sp[2]]


def _weight_grad(x, gout, kernel, stride, dilation, padding):
    out_sp, pads = _geometry(x.shape[2:], kernel, stride, dilation, padding)
    xp = _pad(x, pads)
    c_out, c_in = gout.shape[1], x.shape[1]
    gw = np.zeros((c_out, c_in) + tuple(kernel), dtype=x.dtype)
    for kd in range(kernel[0]):
        for kh in range(kernel[1]):
            for kw in range(kernel[2]):
                sd, sh, sw = _tap_slices(out_sp, stride, dilation, kd, kh, kw)
                xs = xp[:, :, sd, sh, sw]
                gw[:, :, kd, kh, kw] = np.einsum("nodhw,nidhw->oi", gout, xs)
    return gw


def conv3d_grads(gout, x, w, stride, dilation, padding,
                 need_x=True, need_w=True, need_b=False):
    gx = _scatter_input_grad(gout, w, x.shape[2:], stride, dilation, padding) if need_x else None
    gw = _weight_grad(x, gout, w.shape[2:], stride, dilation, padding) if need_w else None
    gb = gout.sum(axis=(0, 2, 3, 4)) if need_b else None
    return gx, gw, gb


def transpose_output_extents(in_sp, stride):
    return tuple(e * s for e, s in zip(in_sp, stride))


def conv_transpose3d_forward(x, w, b, stride, dilation, padding):
    """Adjoint of conv3d: x has w's output channels, result has its input channels.

    Output spatial extents are input extents times stride; the combination of
    kernel/stride/dilation/padding must make the corresponding forward
    convolution land exactly back on x's extents.
    """
    out_sp = transpose_output_extents(x.shape[2:], stride)
    out = _scatter_input_grad(x, w, out_sp, stride, dilation, padding)
    if b is not None:
        out += b.reshape(1, -1, 1, 1, 1)
    return out


def conv_transpose3d_grads(gout, x, w, stride, dilation, padding,
                           need_x=True, need_w=True, need_b=False):
    # The adjoint of the adjoint is the forward map; weight gradient swaps the
    # roles of input and upstream relative to conv3d.
    fwd = _forward_direct if _backend == "direct" else _forward_im2col
    gx = fwd(gout, w, stride, dilation, padding) if need_x else None
    gw = _weight_grad(gout, x, w.shape[2:], stride, dilation, padding) if need_w else None
    gb = gout.sum(axis=(0, 2, 3, 4)) if need_b else None
    return gx, gw, gb
