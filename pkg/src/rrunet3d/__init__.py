"""Recurrent residual 3D U-Net toolkit for volumetric binary segmentation.

Self-contained: a numpy tensor engine with tape-based reverse-mode
differentiation, the network blocks and both model variants, dice-based
losses, Adam, a CT preprocessing pipeline, the pool-sampling trainer, a
scikit-learn style estimator facade, and a CLI.
"""

from .blocks import DownsampleConfig, RrcuConfig, SeConfig
from .data import (
    ScanPair,
    Volume,
    make_ellipsoid_phantom,
    normalize,
    preprocess_pair,
    read_internal,
    read_metaimage,
    resample_depth,
    write_internal,
    write_metaimage,
)
from .engine import Tape, Tensor, backward, grad_check
from .estimator import VolumeSegmenter
from .losses import EllConfig, dice_loss, dsc, ell, soft_dsc, threshold, wcel
from .model import (
    ModelConfig,
    RecurrentResidualUNet3D,
    load_checkpoint,
    save_checkpoint,
)
from .optim import Adam, LrSchedule
from .trainer import (
    SmokeSettings,
    TrainConfig,
    TrainLog,
    evaluate,
    overfit_smoke,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Adam", "DownsampleConfig", "EllConfig", "LrSchedule", "ModelConfig",
    "RecurrentResidualUNet3D", "RrcuConfig", "ScanPair", "SeConfig",
    "SmokeSettings", "Tape", "Tensor", "TrainConfig", "TrainLog", "Volume",
    "VolumeSegmenter", "backward", "dice_loss", "dsc", "ell", "evaluate",
    "grad_check", "load_checkpoint", "make_ellipsoid_phantom", "normalize",
    "overfit_smoke", "preprocess_pair", "read_internal", "read_metaimage",
    "resample_depth", "save_checkpoint", "soft_dsc", "threshold", "train",
    "wcel", "write_internal", "write_metaimage",
]
