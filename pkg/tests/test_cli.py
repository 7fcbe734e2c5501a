import os

import numpy as np
import pytest

from dbcc import cli
from dbcc import network as net
from dbcc.data import encode_ppm, read_manifest, read_ppm, write_ppm
from dbcc.metrics import read_per_sample, summarize
from dbcc.tensor import Rng

SMALL = ["--input-size", "32", "--stem-filters", "4", "--batch-size", "4"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "12", str(root), "--seed", "3", "--size", "32"]) == 0
    return root / "manifest.csv"


def _train(run_dir, manifest, *extra):
    return cli.main(["train", "--manifest", str(manifest), "--run-dir", str(run_dir), *SMALL, *extra])


class TestSynth:
    def test_zero_is_usage_error(self, tmp_path, capsys):
        assert cli.main(["synth", "0", str(tmp_path / "x")]) == 2
        assert "n must be" in capsys.readouterr().err

    def test_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            assert cli.main(["synth", "5", str(tmp_path / d), "--seed", "7", "--size", "16"]) == 0
        names = sorted(os.listdir(tmp_path / "a" / "images"))
        assert names == sorted(os.listdir(tmp_path / "b" / "images"))
        for rel in ["manifest.csv"] + [f"images/{n}" for n in names]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
        assert len(read_manifest(tmp_path / "a" / "manifest.csv")) == 5


class TestTrain:
    def test_missing_manifest(self, tmp_path, capsys):
        assert _train(tmp_path / "run", tmp_path / "nope.csv") == 2
        assert "manifest not found" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, dataset):
        cfg = tmp_path / "c.txt"
        cfg.write_text("lr = 0.001\nlearning_speed = 3\n")
        assert cli.main(["train", "--config", str(cfg), "--manifest", str(dataset)]) == 2

    def test_zero_lr_keeps_initialization(self, tmp_path, dataset):
        assert _train(tmp_path / "run", dataset, "--lr", "0", "--epochs", "1") == 0
        model = net.load(tmp_path / "run" / "model.dbcc")
        init = net.build(model.config, Rng(0, stream=1))
        for k, v in init.params.items():
            assert model.params[k].tobytes() == v.tobytes()

    def test_artifacts_and_reproducibility(self, tmp_path, dataset):
        cfg = tmp_path / "c.txt"
        cfg.write_text("# small run\nepochs = 2\nlr = 0.01   # overridden below\nvariant = design-b\n")
        for d in ("a", "b"):
            rc = cli.main(
                ["train", "--config", str(cfg), "--lr", "0.002", "--manifest", str(dataset),
                 "--run-dir", str(tmp_path / d), *SMALL]
            )
            assert rc == 0
        expected = {"config.txt", "model.dbcc", "train_log.tsv", "loss_curve.png", "val_per_sample.csv",
                    "val_summary.csv", "val_errors.png"}
        assert set(os.listdir(tmp_path / "a")) == expected
        for name in expected:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        echo = (tmp_path / "a" / "config.txt").read_text()
        assert "lr = 0.002\n" in echo and "variant = design-b\n" in echo and "epochs = 2\n" in echo
        log = (tmp_path / "a" / "train_log.tsv").read_text().splitlines()
        assert log[0] == "epoch\ttrain_mse\tval_mean_deg" and len(log) == 3

    def test_echoed_config_reproduces_run(self, tmp_path, dataset):
        assert _train(tmp_path / "a", dataset, "--epochs", "1") == 0
        cfg = tmp_path / "a" / "config.txt"
        assert cli.main(["train", "--config", str(cfg), "--run-dir", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "model.dbcc").read_bytes()
        assert a == (tmp_path / "b" / "model.dbcc").read_bytes()

    def test_default_run_dir_name(self, tmp_path, dataset):
        rc = cli.main(["train", "--manifest", str(dataset), "--run-root", str(tmp_path), "--epochs", "1",
                       "--seed", "4", *SMALL])
        assert rc == 0
        (name,) = os.listdir(tmp_path)
        assert name.endswith("-seed4")


class TestEval:
    def test_checkpoint_eval_consistent(self, tmp_path, dataset):
        assert _train(tmp_path / "run", dataset, "--epochs", "1") == 0
        out = tmp_path / "ev"
        rc = cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "model.dbcc"), "--manifest", str(dataset),
                       "--out", str(out)])
        assert rc == 0
        ids, errs = read_per_sample(out / "per_sample.csv")
        assert len(ids) == 12
        rows = dict(line.split(",") for line in (out / "summary.csv").read_text().splitlines()[1:])
        for k, v in summarize(errs).stats().items():
            assert float(rows[k]) == pytest.approx(v, abs=1e-9)
        assert (out / "errors.png").stat().st_size > 0

    def test_empty_manifest(self, tmp_path):
        (tmp_path / "m.csv").write_text("file,gt_r,gt_g,gt_b\n")
        assert cli.main(["eval", "--checkpoint", "x", "--manifest", str(tmp_path / "m.csv")]) == 2

    def test_shape_incompatible_checkpoint(self, tmp_path, dataset):
        model = net.build(net.ModelConfig(input_size=(64, 64), stem_filters=4, num_blocks=3), Rng(0))
        net.save(model, tmp_path / "m.dbcc")
        rc = cli.main(["eval", "--checkpoint", str(tmp_path / "m.dbcc"), "--manifest", str(dataset),
                       "--out", str(tmp_path / "ev")])
        assert rc == 2

    def test_folds(self, tmp_path, dataset):
        out = tmp_path / "ev"
        rc = cli.main(["eval", "--folds", "3", "--manifest", str(dataset), "--epochs", "1", "--out", str(out), *SMALL])
        assert rc == 0
        ids, _ = read_per_sample(out / "per_sample.csv")
        assert len(ids) == 12
        assert len((out / "folds.csv").read_text().splitlines()) == 4

    def test_overfit_one_sample(self, tmp_path):
        root = tmp_path / "one"
        assert cli.main(["synth", "1", str(root), "--seed", "1", "--size", "32"]) == 0
        m = str(root / "manifest.csv")
        rc = cli.main(["train", "--manifest", m, "--val-manifest", m, "--run-dir", str(tmp_path / "run"),
                       "--epochs", "300", "--lr", "0.003", "--crop", "false", "--hflip", "false",
                       "--vflip", "false", "--patience", "300", *SMALL])
        assert rc == 0
        out = tmp_path / "ev"
        cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "model.dbcc"), "--manifest", m, "--out", str(out)])
        _, errs = read_per_sample(out / "per_sample.csv")
        assert errs[0] < 0.5


class TestWhiteBalance:
    @pytest.fixture
    def checkpoint(self, tmp_path):
        path = tmp_path / "m.dbcc"
        model = net.build(net.ModelConfig(input_size=(32, 32), stem_filters=4), Rng(2))
        # non-negative weights keep every channel of the estimate positive
        model.params = {k: np.abs(v) for k, v in model.params.items()}
        net.save(model, path)
        return path

    def test_writes_estimate_and_image(self, tmp_path, checkpoint, capsys):
        img = np.random.default_rng(0).random((48, 40, 3)) * 0.5
        write_ppm(tmp_path / "in.ppm", img)
        rc = cli.main(["wb", str(checkpoint), str(tmp_path / "in.ppm"), str(tmp_path / "out.ppm"),
                       "--gt", "1", "1", "1"])
        assert rc == 0
        lines = capsys.readouterr().out.splitlines()
        est = np.array([float(v) for v in lines[0].split()])
        assert est.shape == (3,) and abs(np.linalg.norm(est) - 1) < 1e-5
        assert lines[1].startswith("angular_error_deg ")
        assert read_ppm(tmp_path / "out.ppm").shape == (48, 40, 3)

    def test_corrupt_image(self, tmp_path, checkpoint):
        (tmp_path / "bad.ppm").write_bytes(encode_ppm(np.ones((4, 4, 3)), 255)[:-3])
        assert cli.main(["wb", str(checkpoint), str(tmp_path / "bad.ppm"), str(tmp_path / "o.ppm")]) == 2

    def test_negative_channel_is_degenerate(self, tmp_path):
        model = net.build(net.ModelConfig(input_size=(32, 32), stem_filters=4), Rng(2))
        net.save(model, tmp_path / "m.dbcc")
        write_ppm(tmp_path / "in.ppm", np.random.default_rng(0).random((32, 32, 3)))
        assert cli.main(["wb", str(tmp_path / "m.dbcc"), str(tmp_path / "in.ppm"), str(tmp_path / "o.ppm")]) == 3

    def test_black_image_is_degenerate(self, tmp_path, checkpoint):
        write_ppm(tmp_path / "black.ppm", np.zeros((32, 32, 3)))
        assert cli.main(["wb", str(checkpoint), str(tmp_path / "black.ppm"), str(tmp_path / "o.ppm")]) == 3
        assert not (tmp_path / "o.ppm").exists()


def test_count(capsys):
    assert cli.main(["count", "--input-size", "224"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "variant,params,flops_at_224x224"
    table = {row.split(",")[0]: (int(row.split(",")[1]), int(row.split(",")[2])) for row in lines[1:]}
    assert set(table) == {"design-a", "design-b", "baseline"}
    assert 0.065e6 <= table["design-a"][0] <= 0.195e6
    assert 0.055e9 <= table["design-a"][1] <= 0.165e9
    assert table["design-b"][0] < table["design-a"][0] and table["design-b"][1] < table["design-a"][1]


def test_config_parser():
    vals = cli.resolve_config(cli.parse_config_text("input_size = 64x32\ncrop = no\nclip_norm = none\n"), {})
    assert vals["input_size"] == (64, 32) and vals["crop"] is False and vals["clip_norm"] is None
    with pytest.raises(cli.ConfigError):
        cli.parse_config_text("just words")
    with pytest.raises(cli.ConfigError):
        cli.resolve_config({"crop": "maybe"}, {})
