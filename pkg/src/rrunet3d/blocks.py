"""Composite network units: recurrent residual convolutions, channel
attention, and the strided downsampling / mirrored upsampling stages.

Blocks own their parameters (variance-calibrated normal weights, zero
biases, drawn from the rng they are built with) and act as pure functions
of their input tensor during the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ops
from .engine.tensor import ShapeError, Tensor

DOWNSAMPLE_ADD = "add"
DOWNSAMPLE_INCEPTION = "inception"


@dataclass(frozen=True)
class RrcuConfig:
    """Recurrent residual unit: channel width, recurrence depth, dilation."""

    filters: int
    depth: int = 3
    dilation: tuple[int, int, int] = (1, 1, 1)
    layers_per_unit: int = 2

    def __post_init__(self):
        if self.filters < 1:
            raise ValueError("filters must be >= 1")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.layers_per_unit < 1:
            raise ValueError("layers_per_unit must be >= 1")


@dataclass(frozen=True)
class SeConfig:
    """Channel attention: bottleneck width is max(1, channels // reduction)."""

    channels: int
    reduction: int = 16

    def __post_init__(self):
        if self.channels < 1 or self.reduction < 1:
            raise ValueError("channels and reduction must be >= 1")

    @property
    def reduced(self) -> int:
        return max(1, self.channels // self.reduction)


@dataclass(frozen=True)
class DownsampleConfig:
    """Parallel one-filter strided branches, combined by add or concat+fuse."""

    mode: str = DOWNSAMPLE_ADD
    branch_kernels: tuple = ((1, 1, 1), (3, 3, 3), (5, 5, 5))
    stride: tuple[int, int, int] = (2, 2, 2)
    include_maxpool_branch: bool = True

    def __post_init__(self):
        if self.mode not in (DOWNSAMPLE_ADD, DOWNSAMPLE_INCEPTION):
            raise ValueError(f"mode must be '{DOWNSAMPLE_ADD}' or '{DOWNSAMPLE_INCEPTION}'")
        if not self.branch_kernels:
            raise ValueError("at least one branch kernel required")


def init_normal(rng: np.random.Generator, shape, fan_in: int, *, relu_gain: bool = True,
                gain: float = 1.0, dtype=np.float32) -> np.ndarray:
    """Zero-mean normal weights with fan-in scaling.

    He-style (std = gain * sqrt(2 / fan_in)) for layers feeding a ReLU,
    Xavier-style (sqrt(1 / fan_in)) for linear ones. The extra gain lets
    recurrent and residual structures keep unit activation variance; plain
    He everywhere amplifies variance multiplicatively through the
    re-injected recurrence and the residual sums until the sigmoid head
    saturates float32 at init.
    """
    base = 2.0 if relu_gain else 1.0
    return (rng.standard_normal(shape) * (gain * np.sqrt(base / fan_in))).astype(dtype)


def recurrence_gain(depth: int) -> float:
    """Per-application gain keeping Var(z_depth) = Var(x) for the shared-weight
    recurrence z_k = relu(conv(x + z_{k-1})).

    Solves beta * (1 - beta**(depth+1)) = 1 - beta for the per-step variance
    ratio beta and returns sqrt(beta).
    """
    if depth == 0:
        return 1.0
    lo, hi = 0.5, 1.0
    for _ in range(60):
        beta = 0.5 * (lo + hi)
        if beta * (1.0 - beta ** (depth + 1)) < 1.0 - beta:
            lo = beta
        else:
            hi = beta
    return float(np.sqrt(0.5 * (lo + hi)))


class Layer:
    """Base for parameter-owning blocks; walks attributes for stable paths."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Layer):
                yield from value.named_parameters(path)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.named_parameters(f"{path}.{i}")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def iter_param_slots(self):
        """(owner, attribute) pairs for every parameter, in path order.
        Lets verification code substitute parameter tensors wholesale."""
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield self, name
            elif isinstance(value, Layer):
                yield from value.iter_param_slots()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Layer):
                        yield from item.iter_param_slots()

    def count_parameters(self) -> int:
        return sum(t.size for t in self.parameters())


class Conv3d(Layer):
    def __init__(self, rng, in_channels, out_channels, kernel=(3, 3, 3), *,
                 stride=(1, 1, 1), dilation=(1, 1, 1), padding="same",
                 bias=True, relu_gain=False, gain=1.0, dtype=np.float32):
        kernel = tuple(kernel)
        self.spec = ops.ConvSpec(in_channels, out_channels, kernel,
                                 tuple(stride), tuple(dilation), padding, bias)
        fan_in = in_channels * int(np.prod(kernel))
        self.w = Tensor(init_normal(rng, (out_channels, in_channels) + kernel, fan_in,
                                    relu_gain=relu_gain, gain=gain, dtype=dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros((1, out_channels, 1, 1, 1), dtype=dtype),
                        requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.w, self.b, self.spec)


class ConvTranspose3d(Layer):
    """Strided transposed convolution; maps in_channels to out_channels and
    multiplies every spatial extent by the stride."""

    def __init__(self, rng, in_channels, out_channels, kernel=(2, 2, 2), *,
                 stride=(2, 2, 2), bias=True, dtype=np.float32):
        kernel = tuple(kernel)
        # The adjoint spec is written from the forward-convolution viewpoint.
        self.spec = ops.ConvSpec(out_channels, in_channels, kernel, tuple(stride),
                                 (1, 1, 1), "same", bias)
        # Each output voxel receives prod(kernel)/prod(stride) taps.
        fan_eff = max(1, in_channels * int(np.prod(kernel)) // int(np.prod(stride)))
        self.w = Tensor(init_normal(rng, (in_channels, out_channels) + kernel, fan_eff,
                                    relu_gain=False, dtype=dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros((1, out_channels, 1, 1, 1), dtype=dtype),
                        requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose3d(x, self.w, self.b, self.spec)


class Dense(Layer):
    def __init__(self, rng, in_features, out_features, relu_gain=False, dtype=np.float32):
        self.w = Tensor(init_normal(rng, (out_features, in_features, 1, 1, 1),
                                    in_features, relu_gain=relu_gain, dtype=dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros((1, out_features, 1, 1, 1), dtype=dtype),
                        requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.w, self.b)


class RecurrentConvLayer(Layer):
    """One convolution applied depth+1 times with shared weights.

    z_0 = relu(conv(x)); z_k = relu(conv(x + z_{k-1})). depth = 0 degenerates
    to a plain convolution layer.
    """

    def __init__(self, rng, channels, depth, dilation=(1, 1, 1), dtype=np.float32):
        self.depth = depth
        self.conv = Conv3d(rng, channels, channels, (3, 3, 3), dilation=dilation,
                           relu_gain=True, gain=recurrence_gain(depth), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        z = ops.relu(self.conv(x))
        for _ in range(self.depth):
            z = ops.relu(self.conv(ops.add(x, z)))
        return z


class Rrcu(Layer):
    """Recurrent residual unit: 1x1x1 projection, stacked recurrent
    convolution layers, and a residual sum (no activation after the sum)."""

    def __init__(self, rng, in_channels, cfg: RrcuConfig, dtype=np.float32):
        self.cfg = cfg
        # Projection and recurrent branch each carry half the output variance.
        self.proj = Conv3d(rng, in_channels, cfg.filters, (1, 1, 1),
                           gain=float(np.sqrt(0.5)), dtype=dtype)
        self.layers = [RecurrentConvLayer(rng, cfg.filters, cfg.depth, cfg.dilation, dtype)
                       for _ in range(cfg.layers_per_unit)]

    def __call__(self, x: Tensor) -> Tensor:
        h = self.proj(x)
        y = h
        for layer in self.layers:
            y = layer(y)
        return ops.add(h, y)


class SeResidual(Layer):
    """Channel attention block returning relu(x + x * scale).

    Scales come from a two-layer bottleneck over global channel means, so the
    residual is added to the scaled input rather than replaced by it.
    """

    def __init__(self, rng, cfg: SeConfig, dtype=np.float32):
        self.cfg = cfg
        self.fc1 = Dense(rng, cfg.channels, cfg.reduced, relu_gain=True, dtype=dtype)
        self.fc2 = Dense(rng, cfg.reduced, cfg.channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.channels:
            raise ShapeError(f"se_residual: {x.shape[1]} channels, expected {self.cfg.channels}")
        pooled = ops.global_avg_pool(x)
        s = ops.sigmoid(self.fc2(ops.relu(self.fc1(pooled))))
        return ops.relu(ops.add(x, ops.scale_channels(x, s)))


class Drrcu(Layer):
    """Recurrent residual unit followed by the channel-attention block."""

    def __init__(self, rng, in_channels, rrcu_cfg: RrcuConfig, se_cfg: SeConfig,
                 dtype=np.float32):
        if se_cfg.channels != rrcu_cfg.filters:
            raise ValueError(
                f"se channels {se_cfg.channels} must equal rrcu filters {rrcu_cfg.filters}")
        self.rrcu = Rrcu(rng, in_channels, rrcu_cfg, dtype)
        self.se = SeResidual(rng, se_cfg, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.se(self.rrcu(x))


class DownsampleStage(Layer):
    """Parallel one-filter strided convolutions of different kernel sizes.

    'add' sums the branches; 'inception' concatenates them with a strided
    max-pool branch and fuses back to one channel with a 1x1x1 convolution.
    Spatial extents shrink by the stride either way.
    """

    def __init__(self, rng, cfg: DownsampleConfig, in_channels=1, dtype=np.float32):
        self.cfg = cfg
        self.in_channels = in_channels
        branch_gain = 1.0 / np.sqrt(len(cfg.branch_kernels)) if cfg.mode == DOWNSAMPLE_ADD else 1.0
        self.branches = [
            Conv3d(rng, in_channels, 1, k, stride=cfg.stride, gain=branch_gain, dtype=dtype)
            for k in cfg.branch_kernels]
        if cfg.mode == DOWNSAMPLE_INCEPTION:
            fused_in = len(self.branches) + (in_channels if cfg.include_maxpool_branch else 0)
            self.fuse = Conv3d(rng, fused_in, 1, (1, 1, 1), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        stride = self.cfg.stride
        if any(e % s for e, s in zip(x.shape[2:], stride)):
            raise ShapeError(
                f"downsample: extents {x.shape[2:]} not divisible by stride {stride}")
        outs = [branch(x) for branch in self.branches]
        if self.cfg.mode == DOWNSAMPLE_ADD:
            acc = outs[0]
            for o in outs[1:]:
                acc = ops.add(acc, o)
            return acc
        if self.cfg.include_maxpool_branch:
            outs.append(ops.maxpool3d(x, tuple(stride), tuple(stride)))
        return self.fuse(ops.concat_channels(*outs))


class UpsampleStage(Layer):
    """One-filter 2x2x2 transposed convolution doubling every extent."""

    def __init__(self, rng, in_channels, dtype=np.float32):
        self.up = ConvTranspose3d(rng, in_channels, 1, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.up(x)
