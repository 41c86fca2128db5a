"""Full encoder/decoder network assembly, parameter audit, and checkpoints.

The network shape is a U with a strided multi-branch stem in front and a
mirrored transposed-convolution head behind, so the filter structure reads
1 -> ... -> 1 -> f1 -> f2 -> f3 -> f4 -> f3 -> f2 -> f1 -> 1 -> ... -> 1.
The "default" variant uses plain recurrent residual units and an additive
stem; the "dynamic" variant deepens the recurrence level by level and adds
channel attention, with a concatenating stem.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import blocks
from .blocks import (
    DOWNSAMPLE_ADD,
    DOWNSAMPLE_INCEPTION,
    Conv3d,
    ConvTranspose3d,
    DownsampleConfig,
    Drrcu,
    Layer,
    Rrcu,
    RrcuConfig,
    SeConfig,
)
from .engine import ops
from .engine.tensor import ShapeError, Tensor

VARIANT_DEFAULT = "default"
VARIANT_DYNAMIC = "dynamic"

CHECKPOINT_MAGIC = b"RRUNET3D"
CHECKPOINT_VERSION = 1


TRANSITION_KEEP = "keep"    # 1x1x1 transition conv keeps the pre-pool width
TRANSITION_NEXT = "next"    # transition conv widens to the next level's filters


@dataclass(frozen=True)
class ModelConfig:
    variant: str = VARIANT_DEFAULT
    filters: tuple[int, int, int, int] = (40, 80, 160, 320)
    depths: tuple[int, int, int, int] = (3, 3, 3, 3)
    stem_stages: int = 3
    dilation: int = 2
    downsample: DownsampleConfig = field(default_factory=DownsampleConfig)
    se_reduction: int = 16
    layers_per_unit: int = 2
    transition: str = TRANSITION_KEEP

    def __post_init__(self):
        if self.variant not in (VARIANT_DEFAULT, VARIANT_DYNAMIC):
            raise ValueError(f"unknown variant {self.variant!r}")
        if len(self.filters) != 4 or len(self.depths) != 4:
            raise ValueError("filters and depths must have four entries")
        if any(f < 1 for f in self.filters):
            raise ValueError("every filter count must be >= 1")
        if any(d < 0 for d in self.depths):
            raise ValueError("recurrence depths must be >= 0")
        if self.stem_stages < 0:
            raise ValueError("stem_stages must be >= 0")
        if self.dilation < 1 or self.layers_per_unit < 1 or self.se_reduction < 1:
            raise ValueError("dilation, layers_per_unit, se_reduction must be >= 1")
        if self.transition not in (TRANSITION_KEEP, TRANSITION_NEXT):
            raise ValueError(f"transition must be '{TRANSITION_KEEP}' or '{TRANSITION_NEXT}'")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == VARIANT_DEFAULT:
            base = dict(variant=VARIANT_DEFAULT, filters=(40, 80, 160, 320),
                        depths=(3, 3, 3, 3),
                        downsample=DownsampleConfig(mode=DOWNSAMPLE_ADD))
        elif name == VARIANT_DYNAMIC:
            base = dict(variant=VARIANT_DYNAMIC, filters=(20, 60, 120, 240),
                        depths=(1, 2, 3, 4),
                        downsample=DownsampleConfig(mode=DOWNSAMPLE_INCEPTION))
        else:
            raise ValueError(f"unknown preset {name!r}; use 'default' or 'dynamic'")
        base.update(overrides)
        return cls(**base)

    @property
    def required_divisor(self) -> int:
        return 2 ** (self.stem_stages + 3)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "filters": list(self.filters),
            "depths": list(self.depths),
            "stem_stages": self.stem_stages,
            "dilation": self.dilation,
            "downsample": {
                "mode": self.downsample.mode,
                "branch_kernels": [list(k) for k in self.downsample.branch_kernels],
                "stride": list(self.downsample.stride),
                "include_maxpool_branch": self.downsample.include_maxpool_branch,
            },
            "se_reduction": self.se_reduction,
            "layers_per_unit": self.layers_per_unit,
            "transition": self.transition,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        ds = d.pop("downsample", None)
        downsample = DownsampleConfig(
            mode=ds["mode"],
            branch_kernels=tuple(tuple(k) for k in ds["branch_kernels"]),
            stride=tuple(ds["stride"]),
            include_maxpool_branch=ds["include_maxpool_branch"],
        ) if ds else DownsampleConfig()
        return cls(variant=d["variant"], filters=tuple(d["filters"]),
                   depths=tuple(d["depths"]), stem_stages=d["stem_stages"],
                   dilation=d["dilation"], downsample=downsample,
                   se_reduction=d["se_reduction"], layers_per_unit=d["layers_per_unit"],
                   transition=d.get("transition", TRANSITION_KEEP))


class _Transition(Layer):
    """Encoder level transition: 2x2x2 max-pool then a 1x1x1 convolution.

    The convolution keeps the pre-pool channel count by default; the
    'next' transition mode widens it to the following level instead (a
    parameter-count search knob)."""

    def __init__(self, rng, in_channels, out_channels, dtype):
        self.conv = Conv3d(rng, in_channels, out_channels, (1, 1, 1), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(ops.maxpool3d(x))


class _DecoderStage(Layer):
    """Up-convolution, skip concatenation, 1x1x1 fusion, then the level unit."""

    def __init__(self, rng, in_channels, out_channels, unit, dtype):
        self.up = ConvTranspose3d(rng, in_channels, out_channels, dtype=dtype)
        self.fuse = Conv3d(rng, 2 * out_channels, out_channels, (1, 1, 1), dtype=dtype)
        self.unit = unit

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        return self.unit(self.fuse(ops.concat_channels(self.up(x), skip)))


class RecurrentResidualUNet3D(Layer):
    """The assembled network. Parameters are keyed by stable dotted paths;
    building twice from the same seed is bit-identical."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        f1, f2, f3, f4 = config.filters
        enc_dil = (config.dilation,) * 3

        widen = config.transition == TRANSITION_NEXT
        self.stem = [blocks.DownsampleStage(rng, config.downsample, dtype=dtype)
                     for _ in range(config.stem_stages)]
        self.enc1 = self._unit(rng, 1, 0, enc_dil, dtype)
        self.trans2 = _Transition(rng, f1, f2 if widen else f1, dtype)
        self.enc2 = self._unit(rng, f2 if widen else f1, 1, enc_dil, dtype)
        self.trans3 = _Transition(rng, f2, f3 if widen else f2, dtype)
        self.enc3 = self._unit(rng, f3 if widen else f2, 2, enc_dil, dtype)
        self.trans4 = _Transition(rng, f3, f4 if widen else f3, dtype)
        self.enc4 = self._unit(rng, f4 if widen else f3, 3, enc_dil, dtype)
        self.dec3 = _DecoderStage(rng, f4, f3, self._unit(rng, f3, 2, (1, 1, 1), dtype), dtype)
        self.dec2 = _DecoderStage(rng, f3, f2, self._unit(rng, f2, 1, (1, 1, 1), dtype), dtype)
        self.dec1 = _DecoderStage(rng, f2, f1, self._unit(rng, f1, 0, (1, 1, 1), dtype), dtype)
        head_in = [f1] + [1] * (config.stem_stages - 1) if config.stem_stages else []
        self.head = [blocks.UpsampleStage(rng, c, dtype=dtype) for c in head_in]
        final_in = 1 if config.stem_stages else f1
        self.final = Conv3d(rng, final_in, 1, (1, 1, 1), dtype=dtype)

    def _unit(self, rng, in_channels, level, dilation, dtype):
        cfg = self.config
        rcfg = RrcuConfig(filters=cfg.filters[level], depth=cfg.depths[level],
                          dilation=dilation, layers_per_unit=cfg.layers_per_unit)
        if cfg.variant == VARIANT_DYNAMIC:
            return Drrcu(rng, in_channels, rcfg,
                         SeConfig(cfg.filters[level], cfg.se_reduction), dtype)
        return Rrcu(rng, in_channels, rcfg, dtype)

    def check_input(self, shape) -> None:
        if len(shape) != 5 or shape[1] != 1:
            raise ShapeError(f"expected single-channel [N,1,D,H,W] input, got {shape}")
        div = self.config.required_divisor
        if any(e % div for e in shape[2:]):
            raise ShapeError(
                f"spatial extents {tuple(shape[2:])} must each be divisible by {div} "
                f"(stem_stages={self.config.stem_stages} plus 3 pooling levels)")

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        self.check_input(x.shape)

        def _t(name, t):
            if trace is not None:
                trace.append((name, t.shape))
            return t

        h = x
        for i, stage in enumerate(self.stem):
            h = _t(f"stem.{i}", stage(h))
        e1 = _t("enc1", self.enc1(h))
        e2 = _t("enc2", self.enc2(_t("trans2", self.trans2(e1))))
        e3 = _t("enc3", self.enc3(_t("trans3", self.trans3(e2))))
        e4 = _t("enc4", self.enc4(_t("trans4", self.trans4(e3))))
        d = _t("dec3", self.dec3(e4, e3))
        d = _t("dec2", self.dec2(d, e2))
        d = _t("dec1", self.dec1(d, e1))
        for i, stage in enumerate(self.head):
            d = _t(f"head.{i}", stage(d))
        return _t("final", ops.sigmoid(self.final(d)))

    __call__ = forward

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def astype(self, dtype) -> "RecurrentResidualUNet3D":
        clone = copy.deepcopy(self)
        for _, t in clone.named_parameters():
            t.data = t.data.astype(dtype)
            t.grad = None
        return clone

    def summarize(self, input_shape=None):
        """Per-stage table: (name, output shape, parameter count). Rows sum
        to count_parameters() exactly."""
        if input_shape is None:
            m = self.config.required_divisor
            input_shape = (1, 1, m, m, m)
        trace: list = []
        self.forward(Tensor(np.zeros(input_shape, dtype=np.float32)), trace=trace)
        shapes = dict(trace)
        rows = []
        for name, stage in self._stages():
            rows.append((name, shapes[name], stage.count_parameters()))
        return rows

    def _stages(self):
        for i, s in enumerate(self.stem):
            yield f"stem.{i}", s
        for name in ("enc1", "trans2", "enc2", "trans3", "enc3", "trans4",
                     "enc4", "dec3", "dec2", "dec1"):
            yield name, getattr(self, name)
        for i, s in enumerate(self.head):
            yield f"head.{i}", s
        yield "final", self.final


def count_parameters(model: RecurrentResidualUNet3D) -> int:
    return model.count_parameters()


REFERENCE_PARAMETER_TOTALS = {VARIANT_DEFAULT: 20_306_691, VARIANT_DYNAMIC: 12_953_330}


def save_checkpoint(model: RecurrentResidualUNet3D, path) -> None:
    """Single-file checkpoint: magic, JSON manifest, then little-endian
    float32 payloads in manifest order. Round trips bit-exactly."""
    params = list(model.named_parameters())
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "dtype": "float32",
        "params": [{"name": n, "shape": list(t.shape)} for n, t in params],
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, t in params:
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> RecurrentResidualUNet3D:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(hlen).decode("utf-8"))
        if manifest["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest['format_version']}")
        model = RecurrentResidualUNet3D(ModelConfig.from_dict(manifest["config"]))
        named = dict(model.named_parameters())
        if set(named) != {p["name"] for p in manifest["params"]}:
            raise ValueError("checkpoint parameter names do not match the rebuilt model")
        for entry in manifest["params"]:
            t = named[entry["name"]]
            shape = tuple(entry["shape"])
            if t.shape != shape:
                raise ValueError(f"{entry['name']}: checkpoint shape {shape}, model {t.shape}")
            raw = fh.read(4 * int(np.prod(shape)))
            t.data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return model
