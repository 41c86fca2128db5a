"""Command-line surface: summarize, gradcheck, preprocess, train, eval, segment.

Exit codes: 0 success, 1 usage or configuration error, 2 verification
failure, 3 I/O error. Every command is deterministic given its config and
seed; reports exclude wall-clock fields under --no-timestamps so reruns are
byte-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import data as dio
from .config import ConfigError, load_run_config
from .data import VolumeFormatError, volume_to_tensor
from .engine.conv_kernels import set_conv_backend
from .losses import threshold as binarize
from .model import (
    REFERENCE_PARAMETER_TOTALS,
    ModelConfig,
    RecurrentResidualUNet3D,
    load_checkpoint,
    save_checkpoint,
)
from .trainer import evaluate, train
from .verify import run_gradient_suite

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_IO = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="rrunet3d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summarize", help="print the per-layer table and parameter audit")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--preset", choices=("default", "dynamic"), help="built-in model preset")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--filter", dest="name_filter", default="",
                   help="run only checks whose name contains this substring")
    p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("preprocess", help="resample/normalize one volume into the internal format")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", dest="out_path", required=True)
    p.add_argument("--target-depth", type=int, default=None)
    p.add_argument("--kind", choices=("image", "mask"), default="image")

    p = sub.add_parser("train", help="run the pool-sampling training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", help="checkpoint output (overrides paths.checkpoint)")
    p.add_argument("--out", help="train log output (overrides paths.train_log)")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="also write the checkpoint every N iterations")
    p.add_argument("--seed", type=int, default=None, help="override config seeds")
    p.add_argument("--no-timestamps", action="store_true")
    p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("eval", help="per-scan soft dice report for a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="machine report output (overrides paths.report)")
    p.add_argument("--threshold", type=float, default=None)

    p = sub.add_parser("segment", help="segment one scan with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--out", required=True, help="binary mask output (internal format)")
    p.add_argument("--proba", help="also write the raw probability volume here")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--target-depth", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    return parser


def _read_volume(path: str) -> dio.Volume:
    if path.endswith((".mhd", ".mha")):
        return dio.read_metaimage(path)
    return dio.read_internal(path)


def _model_from_args(args) -> tuple[ModelConfig, int]:
    if args.config:
        cfg = load_run_config(args.config)
        return cfg.model, args.seed
    preset = args.preset or "default"
    return ModelConfig.preset(preset), args.seed


def _load_pair(data_root: str, scan_id: str, target_depth: int | None) -> dio.ScanPair:
    image = _read_volume(os.path.join(data_root, f"{scan_id}.image.rvol"))
    mask = _read_volume(os.path.join(data_root, f"{scan_id}.mask.rvol"))
    depth = target_depth if target_depth is not None else image.dims[0]
    return dio.preprocess_pair(image, mask, depth)


def _require(value, what: str):
    if value is None:
        raise ConfigError(f"{what} is required (set it in the config or pass the flag)")
    return value


def cmd_summarize(args) -> int:
    config, seed = _model_from_args(args)
    model = RecurrentResidualUNet3D(config, seed=seed)
    rows = model.summarize()
    total = model.count_parameters()
    name_w = max(len(r[0]) for r in rows)
    shape_w = max(len(str(list(r[1]))) for r in rows)
    print(f"{'layer':<{name_w}}  {'output shape':<{shape_w}}  params")
    for name, shape, count in rows:
        print(f"{name:<{name_w}}  {str(list(shape)):<{shape_w}}  {count}")
    row_sum = sum(r[2] for r in rows)
    print(f"total parameters: {total}")
    if row_sum != total:
        print(f"ERROR: summary rows sum to {row_sum}, not {total}", file=sys.stderr)
        return EXIT_VERIFY
    target = REFERENCE_PARAMETER_TOTALS[config.variant]
    print(f"reference total ({config.variant}): {target}  delta: {total - target:+d}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.deterministic:
        set_conv_backend("direct")
    results = run_gradient_suite(tolerance=args.tolerance, seed=args.seed,
                                 name_filter=args.name_filter)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name}  max_rel_err={r.max_error:.3e}  tol={r.tolerance:.1e}")
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_preprocess(args) -> int:
    volume = _read_volume(args.in_path)
    depth = args.target_depth if args.target_depth is not None else volume.dims[0]
    volume = dio.resample_depth(volume, depth)
    if args.kind == "image":
        volume = dio.normalize(volume)
    else:
        volume = dio.Volume((volume.voxels >= 0.5).astype(np.float32), spacing=volume.spacing)
    dio.write_internal(volume, args.out_path)
    print(f"wrote {args.out_path} dims={list(volume.dims)}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.deterministic:
        set_conv_backend("direct")
    run = load_run_config(args.config)
    tcfg = _require(run.train, "train section")
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    seed = args.seed if args.seed is not None else run.seed
    data_root = _require(run.paths.data_root, "paths.data_root")
    ckpt_path = args.checkpoint or run.paths.checkpoint
    log_path = args.out or run.paths.train_log
    _require(ckpt_path, "checkpoint path")

    cache = {}

    def fetch(scan_id: str) -> dio.ScanPair:
        if scan_id not in cache:
            cache[scan_id] = _load_pair(data_root, scan_id, run.target_depth)
        return cache[scan_id]

    model = RecurrentResidualUNet3D(run.model, seed=seed)
    _, log = train(model, fetch, tcfg,
                   checkpoint_every=args.checkpoint_every, checkpoint_path=ckpt_path)
    save_checkpoint(model, ckpt_path)
    if log_path:
        log.write(log_path, include_timestamps=not args.no_timestamps)
        print(f"train log: {log_path}")
    print(f"checkpoint: {ckpt_path}")
    if log.records:
        print(f"iterations: {len(log)}  final mean loss: {log.records[-1].mean_loss:.6f}")
    else:
        print("iterations: 0")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = load_run_config(args.config)
    model = load_checkpoint(args.checkpoint)
    data_root = _require(run.paths.data_root, "paths.data_root")
    pool = run.eval_pool or (run.train.pool if run.train else None)
    pool = _require(pool, "eval_pool (or train.pool)")
    threshold = args.threshold if args.threshold is not None else run.threshold
    scans = [(sid, _load_pair(data_root, sid, run.target_depth)) for sid in pool]
    report = evaluate(model, scans, threshold=threshold)
    print(f"{'scan':<16}  soft_dsc  dsc@{threshold:.2f}")
    for row in report.rows:
        print(f"{row.scan_id:<16}  {row.soft_dsc:.4f}    {row.dsc:.4f}")
    print(f"{'mean':<16}  {report.mean_soft_dsc:.4f}    {report.mean_dsc:.4f}")
    out_path = args.out or run.paths.report
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(report.to_jsonl())
        print(f"report: {out_path}")
    return EXIT_OK


def cmd_segment(args) -> int:
    if args.deterministic:
        set_conv_backend("direct")
    model = load_checkpoint(args.checkpoint)
    volume = _read_volume(args.scan)
    depth = args.target_depth if args.target_depth is not None else volume.dims[0]
    volume = dio.normalize(dio.resample_depth(volume, depth))
    proba = model(volume_to_tensor(volume))
    mask = binarize(proba, args.threshold)
    dio.write_internal(dio.Volume(mask.data[0, 0], spacing=volume.spacing), args.out)
    print(f"mask: {args.out}")
    if args.proba:
        dio.write_internal(dio.Volume(proba.data[0, 0], spacing=volume.spacing), args.proba)
        print(f"probabilities: {args.proba}")
    return EXIT_OK


_COMMANDS = {
    "summarize": cmd_summarize,
    "gradcheck": cmd_gradcheck,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "segment": cmd_segment,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VolumeFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
