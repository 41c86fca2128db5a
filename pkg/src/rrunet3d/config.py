"""On-disk run configuration: one JSON document driving every CLI command.

Parsing is strict: any key the schema does not know is rejected with its
full dotted path, so a typo can never silently fall back to a default.
Relative paths resolve against the directory containing the config file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .blocks import DownsampleConfig
from .losses import EllConfig
from .model import ModelConfig, VARIANT_DEFAULT, VARIANT_DYNAMIC
from .optim import LrSchedule
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Malformed run configuration."""


def _take(doc: dict, allowed: dict, context: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"{context or 'config'}: expected an object, got {type(doc).__name__}")
    unknown = set(doc) - set(allowed)
    if unknown:
        where = f"{context}." if context else ""
        raise ConfigError(f"unknown key '{where}{sorted(unknown)[0]}'")
    out = dict(allowed)
    out.update(doc)
    return out


@dataclass(frozen=True)
class RunPaths:
    data_root: str | None = None
    checkpoint: str | None = None
    train_log: str | None = None
    report: str | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig | None
    paths: RunPaths
    eval_pool: tuple | None
    target_depth: int | None
    threshold: float
    seed: int


_MODEL_KEYS = {"variant": None, "filters": None, "depths": None, "stem_stages": None,
               "dilation": None, "downsample": None, "se_reduction": None,
               "layers_per_unit": None, "transition": None}
_DOWNSAMPLE_KEYS = {"mode": None, "branch_kernels": None, "stride": None,
                    "include_maxpool_branch": None}
_TRAIN_KEYS = {"pool": None, "sample_size": 5, "epochs_per_iteration": 5,
               "iterations": 500, "schedule": None, "batch_size": 1,
               "seed": None, "loss": "dice"}
_ELL_KEYS = {"w_dsc": 0.8, "w_wcel": 0.2, "gamma_dsc": 0.3, "gamma_wcel": 0.3,
             "pos_weight": 1.0, "eps": 1e-7, "prob_clamp": 1e-7}
_PATH_KEYS = {"data_root": None, "checkpoint": None, "train_log": None, "report": None}
_TOP_KEYS = {"preset": None, "model": None, "train": None, "ell": None, "paths": None,
             "eval_pool": None, "target_depth": None, "threshold": 0.5, "seed": 0}


def _parse_model(preset: str | None, doc: dict | None) -> ModelConfig:
    fields = _take(doc or {}, _MODEL_KEYS, "model")
    overrides = {}
    if fields["filters"] is not None:
        overrides["filters"] = tuple(fields["filters"])
    if fields["depths"] is not None:
        overrides["depths"] = tuple(fields["depths"])
    for key in ("stem_stages", "dilation", "se_reduction", "layers_per_unit"):
        if fields[key] is not None:
            overrides[key] = int(fields[key])
    if fields["transition"] is not None:
        overrides["transition"] = str(fields["transition"])
    if fields["downsample"] is not None:
        ds = _take(fields["downsample"], _DOWNSAMPLE_KEYS, "model.downsample")
        kwargs = {}
        if ds["mode"] is not None:
            kwargs["mode"] = ds["mode"]
        if ds["branch_kernels"] is not None:
            kwargs["branch_kernels"] = tuple(tuple(k) for k in ds["branch_kernels"])
        if ds["stride"] is not None:
            kwargs["stride"] = tuple(ds["stride"])
        if ds["include_maxpool_branch"] is not None:
            kwargs["include_maxpool_branch"] = bool(ds["include_maxpool_branch"])
        overrides["downsample"] = DownsampleConfig(**kwargs)
    variant = fields["variant"] or preset
    if variant is None:
        variant = VARIANT_DEFAULT
    if variant not in (VARIANT_DEFAULT, VARIANT_DYNAMIC):
        raise ConfigError(f"unknown variant/preset {variant!r}")
    try:
        return ModelConfig.preset(variant, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_train(doc: dict | None, ell_doc: dict | None, default_seed: int) -> TrainConfig | None:
    if doc is None:
        return None
    fields = _take(doc, _TRAIN_KEYS, "train")
    if fields["pool"] is None:
        raise ConfigError("train.pool is required")
    ell_fields = _take(ell_doc or {}, _ELL_KEYS, "ell")
    schedule = LrSchedule(tuple((int(c), float(r)) for c, r in fields["schedule"])) \
        if fields["schedule"] is not None else LrSchedule()
    try:
        return TrainConfig(
            pool=tuple(str(s) for s in fields["pool"]),
            sample_size=int(fields["sample_size"]),
            epochs_per_iteration=int(fields["epochs_per_iteration"]),
            iterations=int(fields["iterations"]),
            schedule=schedule,
            batch_size=int(fields["batch_size"]),
            seed=int(fields["seed"]) if fields["seed"] is not None else default_seed,
            loss=fields["loss"],
            ell=EllConfig(**{k: float(v) for k, v in ell_fields.items()}),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_run_config(doc: dict, base_dir: str = ".") -> RunConfig:
    fields = _take(doc, _TOP_KEYS, "")
    seed = int(fields["seed"])
    model = _parse_model(fields["preset"], fields["model"])
    train = _parse_train(fields["train"], fields["ell"], seed)
    raw_paths = _take(fields["paths"] or {}, _PATH_KEYS, "paths")
    paths = RunPaths(**{k: os.path.join(base_dir, v) if v is not None else None
                        for k, v in raw_paths.items()})
    threshold = float(fields["threshold"])
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    target_depth = int(fields["target_depth"]) if fields["target_depth"] is not None else None
    if target_depth is not None and target_depth < 1:
        raise ConfigError("target_depth must be >= 1")
    eval_pool = tuple(str(s) for s in fields["eval_pool"]) if fields["eval_pool"] else None
    return RunConfig(model=model, train=train, paths=paths, eval_pool=eval_pool,
                     target_depth=target_depth, threshold=threshold, seed=seed)


def load_run_config(path) -> RunConfig:
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_run_config(doc, base_dir=os.path.dirname(os.path.abspath(path)))
