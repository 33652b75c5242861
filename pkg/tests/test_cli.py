import csv
import json

import numpy as np
import pytest

from spectral_cnn.cli import main
from spectral_cnn.dataio import load_manifest, load_model, save_model
from spectral_cnn.evaluate import read_report_csv
from spectral_cnn.models import NetConfig, PreprocNet

TINY = ["--depth", "3", "--width", "4", "--epochs", "2", "--batch", "8"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--shots", 24, "--bins", 64, "--shots-per-target", 3,
               "--seed", 7, "--out", root / "train") == 0
    assert run("synth", "--shots", 12, "--bins", 64, "--shots-per-target", 3,
               "--seed", 8, "--out", root / "test") == 0
    return root


@pytest.fixture(scope="module")
def models(data):
    for mode in ("preproc", "e2e"):
        assert run("train", mode, "--data", data / "train", "--out",
                   data / f"{mode}.model", *TINY) == 0
    assert run("train", "calib", "--data", data / "train", "--use-reference-clean",
               "--out", data / "calib.model", *TINY) == 0
    return data


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestSynth:
    def test_counts_and_summary(self, data, capsys):
        m = load_manifest(data / "train")
        assert len(m) == 24 and len(m.axis) == 64
        assert len(m.target_ids) == 8

    def test_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            assert run("synth", "--shots", 5, "--bins", 48, "--seed", 3, "--out", tmp_path / d) == 0
        for name in ("manifest.jsonl", "axis.csv", "dataset.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        for f in (tmp_path / "a" / "spectra").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / "spectra" / f.name).read_bytes()

    def test_zero_shots_is_usage_error(self, tmp_path, capsys):
        assert run("synth", "--shots", 0, "--out", tmp_path) == 1
        assert "shots" in capsys.readouterr().err

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert run("synth", "--shots", 2, "--bins", 48, "--out", blocker / "sub") == 1


class TestTrain:
    def test_trace_rows(self, models):
        rows = read_csv(models / "preproc.trace.csv")
        assert rows[0] == ["epoch", "split", "loss"]
        assert [r[0] for r in rows[1:]] == ["0", "1"]

    def test_lr_zero_keeps_init(self, data, tmp_path):
        args = ["train", "e2e", "--data", data / "train", "--lr", 0, *TINY]
        assert run(*args, "--out", tmp_path / "a.model") == 0
        assert run(*args, "--epochs", 0, "--out", tmp_path / "init.model") == 0
        a = dict(load_model(tmp_path / "a.model").parameters())
        b = dict(load_model(tmp_path / "init.model").parameters())
        for k in b:
            assert np.array_equal(a[k], b[k]), k

    def test_bit_reproducible(self, data, tmp_path):
        args = ["train", "preproc", "--data", data / "train", "--threads", 0, "--seed", 4, *TINY]
        assert run(*args, "--out", tmp_path / "a.model") == 0
        assert run(*args, "--out", tmp_path / "b.model") == 0
        assert (tmp_path / "a.model").read_bytes() == (tmp_path / "b.model").read_bytes()

    def test_calib_needs_clean_source(self, data, tmp_path, capsys):
        assert run("train", "calib", "--data", data / "train", "--out", tmp_path / "c.model",
                   *TINY) == 1
        assert "--preproc-model" in capsys.readouterr().err

    def test_missing_labels_named(self, data, tmp_path, capsys):
        assert run("synth", "--shots", 3, "--bins", 64, "--level", "1a",
                   "--out", tmp_path / "d") == 0
        assert run("train", "preproc", "--data", tmp_path / "d", "--out", tmp_path / "m",
                   *TINY) == 2
        assert "clean_1b" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path):
        assert run("train", "preproc", "--data", tmp_path / "nope", "--out", tmp_path / "m") == 1
        (tmp_path / "empty").mkdir()
        assert run("train", "preproc", "--data", tmp_path / "empty", "--out", tmp_path / "m") == 2

    def test_config_file_and_override(self, data, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"epochs": 1, "depth": 3, "width": 4, "batch": 8}))
        assert run("train", "preproc", "--config", cfg, "--data", data / "train",
                   "--out", tmp_path / "a.model") == 0
        assert len(read_csv(tmp_path / "a.trace.csv")) == 2
        assert run("train", "preproc", "--config", cfg, "--epochs", 3, "--data", data / "train",
                   "--out", tmp_path / "b.model") == 0
        assert len(read_csv(tmp_path / "b.trace.csv")) == 4
        assert load_model(tmp_path / "b.model").config.depth == 3

    def test_config_unknown_key(self, data, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"bogus": 1}))
        assert run("train", "preproc", "--config", cfg, "--data", data / "train",
                   "--out", tmp_path / "a.model") == 1


class TestInference:
    def test_preprocess_zero_residual(self, data, tmp_path):
        m = load_manifest(data / "test")
        net = PreprocNet(NetConfig(input_length=64, depth=3, width=4), np.random.default_rng(0))
        net.last.weight[:] = 0
        net.last.bias[:] = 0
        save_model(net, tmp_path / "zero.model")
        assert run("preprocess", "--model", tmp_path / "zero.model", "--data", data / "test",
                   "--out", tmp_path / "out") == 0
        for r in m:
            rows = read_csv(tmp_path / "out" / f"{r.shot_id}_preprocessed.csv")
            vals = np.array([float(v) for _, v in rows[1:]])
            assert np.array_equal(vals, r.raw.intensities)
            assert abs(vals.max() - 1.0) < 1e-12

    def test_length_mismatch(self, models, tmp_path):
        assert run("synth", "--shots", 2, "--bins", 48, "--out", tmp_path / "d") == 0
        assert run("preprocess", "--model", models / "preproc.model", "--data", tmp_path / "d",
                   "--out", tmp_path / "o") == 2

    def test_calibrate_columns(self, models, tmp_path):
        assert run("calibrate", "--model", models / "e2e.model", "--data", models / "test",
                   "--out", tmp_path / "p.csv") == 0
        rows = read_csv(tmp_path / "p.csv")
        assert len(rows) == 13 and len(rows[0]) == 9 and rows[0][0] == "shot_id"

    def test_clamp(self, models, tmp_path):
        assert run("calibrate", "--model", models / "e2e.model", "--data", models / "test",
                   "--clamp", "--out", tmp_path / "p.csv") == 0
        vals = np.array([[float(v) for v in r[1:]] for r in read_csv(tmp_path / "p.csv")[1:]])
        assert vals.min() >= 0 and vals.max() <= 100

    def test_compositional_equals_e2e_with_same_weights(self, models, tmp_path):
        e2e = load_model(models / "e2e.model")
        save_model(e2e.trunk, tmp_path / "trunk.model")
        save_model(e2e.head, tmp_path / "head.model")
        assert run("calibrate", "--model", models / "e2e.model", "--data", models / "test",
                   "--out", tmp_path / "a.csv") == 0
        assert run("calibrate", "--model", tmp_path / "head.model", "--preproc-model",
                   tmp_path / "trunk.model", "--data", models / "test",
                   "--out", tmp_path / "b.csv") == 0
        a = read_csv(tmp_path / "a.csv")
        b = read_csv(tmp_path / "b.csv")
        assert a[0] == b[0]
        np.testing.assert_allclose(np.array(a[1:])[:, 1:].astype(float),
                                   np.array(b[1:])[:, 1:].astype(float), rtol=0, atol=1e-9)

    def test_wrong_model_kind(self, models, tmp_path):
        assert run("preprocess", "--model", models / "e2e.model", "--data", models / "test",
                   "--out", tmp_path / "o") == 1

    def test_corrupt_model(self, models, tmp_path):
        (tmp_path / "bad.model").write_bytes(b"garbage bytes")
        assert run("preprocess", "--model", tmp_path / "bad.model", "--data", models / "test",
                   "--out", tmp_path / "o") == 2


class TestEvaluate:
    def test_preproc_reports(self, models, tmp_path):
        assert run("evaluate", "--model", models / "preproc.model", "--data", models / "test",
                   "--out", tmp_path) == 0
        rows = read_report_csv(tmp_path / "preproc_report.csv")
        assert {r[0] for r in rows} == {"preproc_rmse", "identity_baseline_rmse"}
        bins = read_report_csv(tmp_path / "distance_report.csv")
        assert len(bins) == 7 and sum(r[4] for r in bins) == 12

    def test_perfect_model_zero(self, models, tmp_path):
        net = PreprocNet(NetConfig(input_length=64, depth=3, width=4), np.random.default_rng(0))
        net.last.weight[:] = 0
        net.last.bias[:] = 0
        save_model(net, tmp_path / "zero.model")
        # a dataset whose raw spectra already are the clean labels
        m = load_manifest(models / "test")
        for r in m:
            object.__setattr__(r, "raw", r.clean_1b)
        from spectral_cnn.dataio import save_manifest
        save_manifest(m, tmp_path / "clean" / "manifest.jsonl")
        assert run("evaluate", "--model", tmp_path / "zero.model", "--data", tmp_path / "clean",
                   "--out", tmp_path / "r") == 0
        rows = read_report_csv(tmp_path / "r" / "preproc_report.csv")
        assert all(r[3] == 0.0 for r in rows)
        assert all(r[3] == 0.0 for r in read_report_csv(tmp_path / "r" / "distance_report.csv")
                   if r[4] > 0)

    @pytest.mark.parametrize("kind,extra", [("e2e", []), ("calib", ["--use-reference-clean"])])
    def test_calib_reports(self, models, tmp_path, kind, extra):
        assert run("evaluate", "--model", models / f"{kind}.model", "--data", models / "test",
                   "--train-data", models / "train", *extra, "--out", tmp_path) == 0
        rows = read_report_csv(tmp_path / "calib_report.csv")
        assert sum(r[0] == "calib_rmse" for r in rows) == 8
        assert sum(r[0] == "mean_predictor_rmse" for r in rows) == 8
        assert len(read_csv(tmp_path / "scatter.csv")) == 1 + 8 * 12
        lines = json.loads((tmp_path / "regression_lines.json").read_text())
        assert len(lines) == 8 and {"slope", "intercept", "defined"} <= set(next(iter(lines.values())))

    def test_calib_needs_train_data(self, models, tmp_path):
        assert run("evaluate", "--model", models / "e2e.model", "--data", models / "test",
                   "--out", tmp_path) == 1


class TestGradcheckAndBench:
    def test_gradcheck_subset(self, capsys):
        assert run("gradcheck", "--component", "conv1d", "--component", "dense") == 0
        out = capsys.readouterr().out
        assert "conv1d" in out and "dense" in out and "batchnorm" not in out
        assert "FAIL" not in out

    def test_gradcheck_ignores_single_precision(self):
        assert run("gradcheck", "--component", "loss_e2e", "--precision", "single") == 0

    def test_unknown_component(self):
        assert run("gradcheck", "--component", "lstm") == 1

    def test_bench_small(self, tmp_path, capsys):
        assert run("bench", "--length", 256, "--depth", 4, "--width", 8, "--iterations", 1000,
                   "--warmup", 5, "--precision", "single", "--json", tmp_path / "b.json") == 0
        out = capsys.readouterr().out
        assert "shots/s" in out and "parameters:" in out and "~4K" in out and "~1MB" in out
        stats = json.loads((tmp_path / "b.json").read_text())
        assert stats["hz"] > 0 and stats["iterations"] == 1000

    def test_bench_min_iterations(self):
        assert run("bench", "--length", 64, "--iterations", 10) == 1

    def test_bad_threads(self):
        assert run("gradcheck", "--threads", -1) == 1

    def test_help(self):
        assert run("--help") == 0
