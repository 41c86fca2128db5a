"""Scikit-learn style front end over the volumetric segmentation pipeline.

`VolumeSegmenter` wraps preprocessing, network construction, the sampling
training loop, and thresholded prediction behind fit/predict/score so the
model composes with pipelines and parameter search from the wider
ecosystem. All heavy lifting stays in the library modules.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Volume, preprocess_pair, volume_to_tensor
from .losses import EllConfig, threshold as binarize
from .model import ModelConfig, RecurrentResidualUNet3D
from .optim import LrSchedule
from .trainer import TrainConfig, evaluate, train
from .validation import check_mask_list, check_volume_list


class VolumeSegmenter(BaseEstimator):
    """Binary volumetric segmenter with an encoder/decoder network.

    Parameters mirror the library configs: `variant` picks the unit style
    ("default": recurrent residual units, additive stem; "dynamic":
    depth-growing recurrence with channel attention, concatenating stem).
    `filters`/`depths` default to the variant presets. Spatial extents of
    the (depth-resampled) volumes must be divisible by
    2**(stem_stages + 3).

    Training follows the pool-sampling strategy: each of `iterations`
    rounds draws `sample_size` scans without replacement and runs
    `epochs_per_iteration` passes over them, one gradient step per scan.
    `schedule` is a tuple of (iteration_count, learning_rate) segments; by
    default the first 80% of iterations run at 1e-3 and the rest at 1e-4.
    """

    def __init__(self, variant="dynamic", filters=None, depths=None,
                 stem_stages=1, dilation=2, se_reduction=16, layers_per_unit=2,
                 transition="keep", loss="dice", ell=None, iterations=24,
                 sample_size=5, epochs_per_iteration=5, schedule=None,
                 target_depth=None, threshold=0.5, seed=0):
        self.variant = variant
        self.filters = filters
        self.depths = depths
        self.stem_stages = stem_stages
        self.dilation = dilation
        self.se_reduction = se_reduction
        self.layers_per_unit = layers_per_unit
        self.transition = transition
        self.loss = loss
        self.ell = ell
        self.iterations = iterations
        self.sample_size = sample_size
        self.epochs_per_iteration = epochs_per_iteration
        self.schedule = schedule
        self.target_depth = target_depth
        self.threshold = threshold
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        overrides = {"stem_stages": self.stem_stages, "dilation": self.dilation,
                     "se_reduction": self.se_reduction,
                     "layers_per_unit": self.layers_per_unit,
                     "transition": self.transition}
        if self.filters is not None:
            overrides["filters"] = tuple(self.filters)
        if self.depths is not None:
            overrides["depths"] = tuple(self.depths)
        return ModelConfig.preset(self.variant, **overrides)

    def _schedule(self) -> LrSchedule:
        if self.schedule is not None:
            return LrSchedule(tuple((int(c), float(r)) for c, r in self.schedule))
        phase1 = max(1, self.iterations * 4 // 5)
        return LrSchedule(((phase1, 1e-3), (max(self.iterations - phase1, 1), 1e-4)))

    def _preprocess(self, image: np.ndarray, mask: np.ndarray | None):
        img = Volume(image)
        msk = Volume(mask) if mask is not None else Volume(np.zeros_like(image))
        depth = self.target_depth if self.target_depth is not None else image.shape[0]
        return preprocess_pair(img, msk, depth)

    def fit(self, X, y):
        """Train on aligned volumes and binary masks.

        X: volume, 4D stack, or sequence of (D,H,W) arrays/Volumes; y: the
        matching masks. Returns self.
        """
        volumes = check_volume_list(X)
        masks = check_mask_list(y, volumes)
        data = {}
        for i, (img, msk) in enumerate(zip(volumes, masks)):
            data[f"scan{i}"] = self._preprocess(img, msk)

        self.model_ = RecurrentResidualUNet3D(self._model_config(), seed=self.seed)
        self.model_.check_input((1, 1) + next(iter(data.values())).image.dims)
        cfg = TrainConfig(
            pool=tuple(data), sample_size=min(self.sample_size, len(data)),
            epochs_per_iteration=self.epochs_per_iteration,
            iterations=self.iterations, schedule=self._schedule(),
            seed=self.seed, loss=self.loss,
            ell=self.ell if self.ell is not None else EllConfig())
        _, self.train_log_ = train(self.model_, data, cfg)
        return self

    def predict_proba(self, X) -> list[np.ndarray]:
        """Per-voxel foreground probabilities, one (D,H,W) array per input.

        Volumes are normalized (and depth-resampled when target_depth is
        set) exactly as during fit, so outputs are at the pipeline depth.
        """
        check_is_fitted(self, "model_")
        out = []
        for img in check_volume_list(X):
            pair = self._preprocess(img, None)
            p = self.model_(volume_to_tensor(pair.image))
            out.append(p.data[0, 0].copy())
        return out

    def predict(self, X) -> list[np.ndarray]:
        """Binary masks obtained by thresholding the probabilities."""
        return [binarize(p[None, None], self.threshold).data[0, 0]
                for p in self.predict_proba(X)]

    def score(self, X, y) -> float:
        """Mean soft dice of raw probabilities against the masks."""
        check_is_fitted(self, "model_")
        volumes = check_volume_list(X)
        masks = check_mask_list(y, volumes)
        scans = [(f"scan{i}", self._preprocess(img, msk))
                 for i, (img, msk) in enumerate(zip(volumes, masks))]
        return evaluate(self.model_, scans, threshold=self.threshold).mean_soft_dsc
