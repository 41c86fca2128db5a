"""Pool-sampling training loop, evaluation, and the overfit smoke harness.

One outer iteration draws a small sample of scans from the pool without
replacement, runs a few epochs over just that sample (one gradient step per
scan, batch size one), and logs the mean loss. Resampling every iteration
keeps the model from overfitting any local subset of the training data.
Everything is deterministic given (seed, data, config).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import losses
from .data import ScanPair, make_ellipsoid_phantom, preprocess_pair, volume_to_tensor
from .engine.tensor import NonFiniteError, Tape, Tensor, backward
from .losses import EllConfig
from .model import ModelConfig, RecurrentResidualUNet3D, save_checkpoint
from .optim import Adam, LrSchedule

LOSS_DICE = "dice"
LOSS_ELL = "ell"


@dataclass(frozen=True)
class TrainConfig:
    pool: tuple
    sample_size: int = 5
    epochs_per_iteration: int = 5
    iterations: int = 500
    schedule: LrSchedule = field(default_factory=LrSchedule)
    batch_size: int = 1
    seed: int = 0
    loss: str = LOSS_DICE
    ell: EllConfig = field(default_factory=EllConfig)

    def __post_init__(self):
        if not self.pool:
            raise ValueError("training pool is empty")
        if not 1 <= self.sample_size <= len(self.pool):
            raise ValueError(
                f"sample_size {self.sample_size} must be in [1, pool size {len(self.pool)}]")
        if self.batch_size != 1:
            raise ValueError("only batch_size = 1 is supported")
        if self.loss not in (LOSS_DICE, LOSS_ELL):
            raise ValueError(f"loss must be '{LOSS_DICE}' or '{LOSS_ELL}'")
        if self.iterations < 0 or self.epochs_per_iteration < 1:
            raise ValueError("iterations must be >= 0 and epochs_per_iteration >= 1")


@dataclass
class IterationRecord:
    iteration: int
    scan_ids: list
    lr: float
    mean_loss: float
    wall_time: float

    def to_json(self, include_timestamps: bool = True) -> str:
        doc = {"iteration": self.iteration, "scan_ids": list(self.scan_ids),
               "lr": self.lr, "mean_loss": self.mean_loss}
        if include_timestamps:
            doc["wall_time"] = self.wall_time
        return json.dumps(doc, sort_keys=True)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def to_jsonl(self, include_timestamps: bool = True) -> str:
        return "".join(r.to_json(include_timestamps) + "\n" for r in self.records)

    def write(self, path, include_timestamps: bool = True) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl(include_timestamps))

    def __len__(self) -> int:
        return len(self.records)


def _loss_tensor(prediction: Tensor, mask: np.ndarray, cfg: TrainConfig) -> Tensor:
    if cfg.loss == LOSS_ELL:
        return losses.ell(prediction, mask, cfg.ell)
    return losses.dice_loss(prediction, mask, cfg.ell.eps)


def _gradient_step(model, opt: Adam, pair: ScanPair, lr: float, cfg: TrainConfig) -> float:
    x = volume_to_tensor(pair.image)
    g = pair.mask.voxels[None, None]
    opt.zero_grad()
    with Tape() as tape:
        loss = _loss_tensor(model(x), g, cfg)
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss {value}")
    backward(loss, tape)
    opt.step(lr)
    return value


def train(model: RecurrentResidualUNet3D, data, cfg: TrainConfig,
          checkpoint_every: int = 0, checkpoint_path=None):
    """Run the full sampling loop; mutates the model in place.

    `data` maps scan id -> ScanPair, or is a callable doing the same. Returns
    (model, TrainLog) with exactly cfg.iterations records.
    """
    fetch = data if callable(data) else data.__getitem__
    pool = list(cfg.pool)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters())
    log = TrainLog()
    for it in range(cfg.iterations):
        lr = cfg.schedule.lr_at(it)
        picked = rng.choice(len(pool), size=cfg.sample_size, replace=False)
        ids = [pool[j] for j in picked]
        pairs = [fetch(sid) for sid in ids]
        t0 = time.perf_counter()
        step_losses = []
        try:
            for _ in range(cfg.epochs_per_iteration):
                order = rng.permutation(cfg.sample_size)
                for j in order:
                    step_losses.append(_gradient_step(model, opt, pairs[j], lr, cfg))
        except NonFiniteError as exc:
            raise NonFiniteError(f"iteration {it}: {exc}") from exc
        log.records.append(IterationRecord(
            iteration=it, scan_ids=ids, lr=lr,
            mean_loss=float(np.mean(step_losses)),
            wall_time=time.perf_counter() - t0))
        if checkpoint_every and checkpoint_path and (it + 1) % checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path)
    return model, log


def count_gradient_steps(log: TrainLog, cfg: TrainConfig) -> int:
    return len(log.records) * cfg.epochs_per_iteration * cfg.sample_size


@dataclass
class EvalRow:
    scan_id: str
    soft_dsc: float
    dsc: float


@dataclass
class EvalReport:
    rows: list
    threshold: float

    @property
    def mean_soft_dsc(self) -> float:
        return float(np.mean([r.soft_dsc for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([r.dsc for r in self.rows])) if self.rows else float("nan")

    def to_jsonl(self) -> str:
        lines = [json.dumps({"scan_id": r.scan_id, "soft_dsc": r.soft_dsc, "dsc": r.dsc},
                            sort_keys=True) for r in self.rows]
        if self.rows:
            lines.append(json.dumps({"scan_id": "__mean__", "soft_dsc": self.mean_soft_dsc,
                                     "dsc": self.mean_dsc}, sort_keys=True))
        return "".join(line + "\n" for line in lines)


def evaluate(model: RecurrentResidualUNet3D, scans, threshold: float = 0.5) -> EvalReport:
    """Per-scan soft dice on raw probabilities plus plain dice on the
    thresholded mask; row order matches input order."""
    if isinstance(scans, Mapping):
        scans = list(scans.items())
    rows = []
    for scan_id, pair in scans:
        p = model(volume_to_tensor(pair.image))
        g = pair.mask.voxels[None, None]
        soft = losses.soft_dsc(p, g).item()
        hard = losses.dsc(losses.threshold(p, threshold), g)
        rows.append(EvalRow(scan_id=str(scan_id), soft_dsc=soft, dsc=hard))
    return EvalReport(rows=rows, threshold=threshold)


@dataclass(frozen=True)
class SmokeSettings:
    """Desk-scale overfit harness: tiny dynamic-variant model, no stem
    stages (the strided stem exists to dodge GPU memory limits, which do
    not apply at phantom scale and only blur the tiny masks)."""

    num_scans: int = 5
    dims: tuple[int, int, int] = (16, 32, 32)
    noise_sigma: float = 0.1
    seed: int = 0
    iterations: int = 14
    sample_size: int = 5
    epochs_per_iteration: int = 5
    filters: tuple[int, int, int, int] = (4, 8, 12, 16)
    depths: tuple[int, int, int, int] = (1, 2, 3, 4)
    stem_stages: int = 0
    se_reduction: int = 4


@dataclass
class SmokeReport:
    baseline_soft_dsc: float
    final_soft_dsc: float
    log: TrainLog


def smoke_model_config(settings: SmokeSettings = SmokeSettings()) -> ModelConfig:
    return ModelConfig.preset(
        "dynamic", filters=settings.filters, depths=settings.depths,
        stem_stages=settings.stem_stages, se_reduction=settings.se_reduction)


def smoke_dataset(settings: SmokeSettings = SmokeSettings()) -> dict:
    rng = np.random.default_rng(settings.seed)
    data = {}
    for i in range(settings.num_scans):
        pair = make_ellipsoid_phantom(rng, settings.dims, settings.noise_sigma)
        data[f"phantom{i}"] = preprocess_pair(pair.image, pair.mask, settings.dims[0])
    return data


def overfit_smoke(settings: SmokeSettings = SmokeSettings()) -> SmokeReport:
    """Train a toy dynamic-variant model on a handful of ellipsoid phantoms
    and report the training-set soft dice before and after."""
    data = smoke_dataset(settings)
    model = RecurrentResidualUNet3D(smoke_model_config(settings), seed=settings.seed)
    baseline = evaluate(model, data).mean_soft_dsc
    phase1 = max(1, settings.iterations * 4 // 5)
    schedule = LrSchedule(((phase1, 1e-3), (max(settings.iterations - phase1, 1), 1e-4)))
    cfg = TrainConfig(pool=tuple(data), sample_size=min(settings.sample_size, len(data)),
                      epochs_per_iteration=settings.epochs_per_iteration,
                      iterations=settings.iterations, schedule=schedule,
                      seed=settings.seed, loss=LOSS_DICE)
    _, log = train(model, data, cfg)
    final = evaluate(model, data).mean_soft_dsc
    return SmokeReport(baseline_soft_dsc=baseline, final_soft_dsc=final, log=log)
