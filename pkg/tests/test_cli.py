"""End-to-end command-line behavior and exit codes."""

import json

import numpy as np

from rrunet3d import cli
from rrunet3d.data import (
    Volume,
    make_ellipsoid_phantom,
    read_internal,
    write_internal,
    write_metaimage,
)
from rrunet3d.engine import ops
from rrunet3d.engine.tensor import Tensor


def write_dataset(root, n=2, dims=(16, 16, 16), seed=0):
    rng = np.random.default_rng(seed)
    ids = []
    for i in range(n):
        pair = make_ellipsoid_phantom(rng, dims=dims)
        write_internal(pair.image, root / f"scan{i}.image.rvol")
        write_internal(pair.mask, root / f"scan{i}.mask.rvol")
        ids.append(f"scan{i}")
    return ids


def write_config(path, ids, **top):
    doc = {
        "preset": "dynamic",
        "model": {"filters": [2, 3, 4, 5], "depths": [1, 1, 1, 1],
                  "stem_stages": 1, "se_reduction": 2},
        "train": {"pool": ids, "sample_size": 1, "epochs_per_iteration": 1,
                  "iterations": 2, "schedule": [[2, 1e-3]]},
        "paths": {"data_root": "."},
        "seed": 0,
    }
    doc.update(top)
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


class TestSummarize:
    def test_default_preset_prints_delta(self, capsys):
        assert cli.main(["summarize", "--preset", "default"]) == 0
        out = capsys.readouterr().out
        assert "total parameters: 9901929" in out
        assert "20306691" in out and "delta: -10404762" in out

    def test_dynamic_preset_prints_delta(self, capsys):
        assert cli.main(["summarize", "--preset", "dynamic"]) == 0
        out = capsys.readouterr().out
        assert "total parameters: 5521241" in out
        assert "12953330" in out and "delta: -7432089" in out

    def test_toy_config_total_matches_library(self, tmp_path, capsys):
        from rrunet3d.model import ModelConfig, RecurrentResidualUNet3D
        cfg_path = write_config(tmp_path / "run.json", ["scan0"])
        assert cli.main(["summarize", "--config", str(cfg_path)]) == 0
        out = capsys.readouterr().out
        model = RecurrentResidualUNet3D(ModelConfig.preset(
            "dynamic", filters=(2, 3, 4, 5), depths=(1, 1, 1, 1),
            stem_stages=1, se_reduction=2))
        assert f"total parameters: {model.count_parameters()}" in out

    def test_rows_listed_per_stage(self, capsys):
        cli.main(["summarize", "--preset", "dynamic"])
        out = capsys.readouterr().out
        for stage in ("stem.0", "enc1", "trans2", "enc4", "dec3", "dec1", "final"):
            assert stage in out


class TestGradcheckCommand:
    def test_filtered_run_passes(self, capsys):
        assert cli.main(["gradcheck", "--filter", "dense"]) == 0
        out = capsys.readouterr().out
        assert "PASS  dense" in out and "1/1 gradient checks passed" in out

    def test_one_line_per_check(self, capsys):
        assert cli.main(["gradcheck", "--filter", "loss"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 3  # one line for each of the three loss checks
        assert "3/3 gradient checks passed" in out

    def test_corrupted_backward_named_and_nonzero_exit(self, monkeypatch, capsys):
        def broken(out_data, gout):
            return gout * out_data
        monkeypatch.setattr(ops, "_sigmoid_grad", broken)
        code = cli.main(["gradcheck", "--filter", "sigmoid"])
        out = capsys.readouterr().out
        assert code == cli.EXIT_VERIFY
        assert "FAIL" in out and "sigmoid" in out


class TestPreprocessCommand:
    def test_metaimage_to_internal_roundtrip(self, tmp_path, capsys):
        from rrunet3d.data import normalize, resample_depth
        rng = np.random.default_rng(0)
        vol = Volume(rng.uniform(-1000, 400, size=(6, 5, 4)).astype(np.float32))
        write_metaimage(vol, tmp_path / "scan.mhd")
        out_path = tmp_path / "scan.rvol"
        assert cli.main(["preprocess", "--in", str(tmp_path / "scan.mhd"),
                         "--out", str(out_path), "--target-depth", "8"]) == 0
        back = read_internal(out_path)
        assert back.dims == (8, 5, 4)
        expected = normalize(resample_depth(vol, 8)).voxels
        assert back.voxels.tobytes() == expected.tobytes()

    def test_mask_kind_rebinarizes_without_normalize(self, tmp_path):
        mask = np.zeros((4, 4, 4), dtype=np.float32)
        mask[1:3, 1:3, 1:3] = 1.0
        write_internal(Volume(mask), tmp_path / "m.rvol")
        assert cli.main(["preprocess", "--in", str(tmp_path / "m.rvol"),
                         "--out", str(tmp_path / "m8.rvol"),
                         "--target-depth", "8", "--kind", "mask"]) == 0
        back = read_internal(tmp_path / "m8.rvol")
        assert set(np.unique(back.voxels)) <= {0.0, 1.0}
        assert back.dims == (8, 4, 4)

    def test_missing_input_is_io_error(self, tmp_path):
        code = cli.main(["preprocess", "--in", str(tmp_path / "nope.rvol"),
                         "--out", str(tmp_path / "x.rvol")])
        assert code == cli.EXIT_IO


class TestTrainEvalCommands:
    def test_train_writes_checkpoint_and_log(self, tmp_path, capsys):
        ids = write_dataset(tmp_path)
        cfg = write_config(tmp_path / "run.json", ids)
        code = cli.main(["train", "--config", str(cfg),
                         "--checkpoint", str(tmp_path / "m.ckpt"),
                         "--out", str(tmp_path / "log.jsonl"), "--no-timestamps"])
        assert code == 0
        assert (tmp_path / "m.ckpt").exists()
        lines = (tmp_path / "log.jsonl").read_text().strip().split("\n")
        assert len(lines) == 2
        assert json.loads(lines[0])["lr"] == 1e-3

    def test_deterministic_reruns_byte_identical(self, tmp_path):
        ids = write_dataset(tmp_path)
        cfg = write_config(tmp_path / "run.json", ids)

        def run(tag):
            ckpt = tmp_path / f"{tag}.ckpt"
            log = tmp_path / f"{tag}.jsonl"
            assert cli.main(["train", "--config", str(cfg), "--checkpoint", str(ckpt),
                             "--out", str(log), "--no-timestamps",
                             "--deterministic"]) == 0
            return ckpt.read_bytes(), log.read_bytes()
        a_ckpt, a_log = run("a")
        b_ckpt, b_log = run("b")
        assert a_ckpt == b_ckpt
        assert a_log == b_log

    def test_eval_reports_rows_and_mean(self, tmp_path, capsys):
        ids = write_dataset(tmp_path)
        cfg = write_config(tmp_path / "run.json", ids)
        assert cli.main(["train", "--config", str(cfg),
                         "--checkpoint", str(tmp_path / "m.ckpt"),
                         "--no-timestamps"]) == 0
        capsys.readouterr()
        report = tmp_path / "report.jsonl"
        assert cli.main(["eval", "--config", str(cfg),
                         "--checkpoint", str(tmp_path / "m.ckpt"),
                         "--out", str(report)]) == 0
        out = capsys.readouterr().out
        assert "scan0" in out and "scan1" in out and "mean" in out
        lines = report.read_text().strip().split("\n")
        assert len(lines) == 3  # two scans plus the mean row
        assert json.loads(lines[-1])["scan_id"] == "__mean__"
        first = report.read_bytes()
        assert cli.main(["eval", "--config", str(cfg),
                         "--checkpoint", str(tmp_path / "m.ckpt"),
                         "--out", str(report)]) == 0
        assert report.read_bytes() == first  # reruns are byte-identical

    def test_checkpoint_every_flag(self, tmp_path):
        ids = write_dataset(tmp_path)
        cfg = write_config(tmp_path / "run.json", ids)
        ckpt = tmp_path / "m.ckpt"
        assert cli.main(["train", "--config", str(cfg), "--checkpoint", str(ckpt),
                         "--checkpoint-every", "1", "--no-timestamps"]) == 0
        assert ckpt.exists()


class _IdentityModel:
    def __call__(self, t):
        return Tensor(t.data.copy())


class TestSegmentCommand:
    def test_identity_model_roundtrips_mask(self, tmp_path, monkeypatch):
        rng = np.random.default_rng(1)
        mask = (rng.uniform(size=(4, 4, 4)) > 0.6).astype(np.float32)
        write_internal(Volume(mask), tmp_path / "scan.rvol")
        monkeypatch.setattr(cli, "load_checkpoint", lambda path: _IdentityModel())
        assert cli.main(["segment", "--checkpoint", "stub.ckpt",
                         "--scan", str(tmp_path / "scan.rvol"),
                         "--out", str(tmp_path / "mask.rvol"),
                         "--proba", str(tmp_path / "proba.rvol")]) == 0
        got = read_internal(tmp_path / "mask.rvol")
        assert got.voxels.tobytes() == mask.tobytes()
        proba = read_internal(tmp_path / "proba.rvol")
        assert proba.dims == (4, 4, 4)

    def test_segment_with_trained_checkpoint(self, tmp_path, capsys):
        ids = write_dataset(tmp_path)
        cfg = write_config(tmp_path / "run.json", ids)
        assert cli.main(["train", "--config", str(cfg),
                         "--checkpoint", str(tmp_path / "m.ckpt"),
                         "--no-timestamps"]) == 0
        assert cli.main(["segment", "--checkpoint", str(tmp_path / "m.ckpt"),
                         "--scan", str(tmp_path / "scan0.image.rvol"),
                         "--out", str(tmp_path / "seg.rvol"),
                         "--threshold", "0.5"]) == 0
        seg = read_internal(tmp_path / "seg.rvol")
        assert set(np.unique(seg.voxels)) <= {0.0, 1.0}


class TestExitCodes:
    def test_unknown_config_key_is_usage_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"preset": "dynamic", "typo_key": 1}))
        assert cli.main(["summarize", "--config", str(bad)]) == cli.EXIT_USAGE
        assert "typo_key" in capsys.readouterr().err

    def test_invalid_nested_key_reported_with_path(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": {"filters": [2, 3, 4, 5], "oops": 1}}))
        assert cli.main(["summarize", "--config", str(bad)]) == cli.EXIT_USAGE
        assert "model.oops" in capsys.readouterr().err

    def test_bad_json_is_usage_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert cli.main(["summarize", "--config", str(bad)]) == cli.EXIT_USAGE

    def test_unknown_flag_is_usage_error(self, capsys):
        assert cli.main(["summarize", "--nope"]) == cli.EXIT_USAGE

    def test_missing_checkpoint_is_io_error(self, tmp_path):
        ids = ["scan0"]
        cfg = write_config(tmp_path / "run.json", ids)
        assert cli.main(["eval", "--config", str(cfg),
                         "--checkpoint", str(tmp_path / "missing.ckpt")]) == cli.EXIT_IO

    def test_missing_train_section_is_config_error(self, tmp_path, capsys):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"preset": "dynamic", "paths": {"data_root": "."}}))
        assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_USAGE
