import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from insmos import cli, io
from insmos import tensor as T
from insmos.events import EventSlice, write_events_binary


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["simulate", "--out", str(root), "--count", "4", "--seed", "3"]) == 0
    return root


@pytest.fixture(scope="module")
def run_dir(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["--seed", "1", "train", "--data", str(dataset), "--out", str(out), "--steps", "2",
                     "--ffe", "sf+uf"]) == 0
    return out


def test_simulate_layout(dataset):
    scenes = sorted(p.name for p in dataset.iterdir())
    assert scenes == [f"scene_{i:04d}" for i in range(4)] or len(scenes) == 4
    assert (next(dataset.iterdir()) / "mask_0.pgm").exists()


def test_simulate_rejects_zero_count(tmp_path):
    assert cli.main(["simulate", "--out", str(tmp_path), "--count", "0"]) == 1


class TestVoxelize:
    def test_two_event_fixture(self, tmp_path):
        src = tmp_path / "ev.txt"
        src.write_text("0 0 0 1\n1 1 0 0\n")
        out = tmp_path / "grid.tns"
        assert cli.main(["--dtype", "f64", "voxelize", "--events", str(src), "--out", str(out), "--bins", "2",
                         "--width", "2", "--height", "1"]) == 0
        expected = np.zeros((1, 2, 2))
        expected[0, 0, 0], expected[0, 1, 1] = 1, -1
        assert_array_equal(io.load_tensor(out), expected)

    def test_binary_input_and_mask(self, tmp_path, rng):
        s = EventSlice.from_events([(int(rng.integers(4)), int(rng.integers(3)), i, 1) for i in range(20)], 4, 3)
        write_events_binary(s, tmp_path / "ev.evt")
        assert cli.main(["voxelize", "--events", str(tmp_path / "ev.evt"), "--out", str(tmp_path / "g.tns"),
                         "--mask-out", str(tmp_path / "m.tns"), "--deterministic"]) == 0
        assert io.load_tensor(tmp_path / "m.tns").shape == (3, 4)

    def test_missing_file_is_io_error(self, tmp_path):
        assert cli.main(["voxelize", "--events", str(tmp_path / "nope"), "--out", str(tmp_path / "g")]) == 2

    def test_malformed_file_is_io_error(self, tmp_path):
        (tmp_path / "bad.txt").write_text("0 0 0\n")
        assert cli.main(["voxelize", "--events", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "g"),
                         "--width", "2", "--height", "2"]) == 2


class TestTrainInferEval:
    def test_train_outputs(self, run_dir):
        for name in ("model.ckpt", "model.json", "train.json", "losses.csv", "losses.png"):
            assert (run_dir / name).exists(), name
        assert json.loads((run_dir / "train.json").read_text())["seed"] == 1

    def test_unknown_option_is_validation_error(self, dataset, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"bogus": 1}))
        assert cli.main(["--config", str(cfg), "train", "--data", str(dataset), "--out", str(tmp_path)]) == 1

    def test_invalid_config_json(self, dataset, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{")
        assert cli.main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path)]) == 1

    def test_infer_then_eval(self, run_dir, dataset, tmp_path):
        pred = tmp_path / "pred"
        assert cli.main(["infer", "--model", str(run_dir), "--data", str(dataset), "--out", str(pred),
                         "--flow"]) == 0
        assert len(list(pred.glob("pred_*.pgm"))) == 4
        assert len(list(pred.glob("pred_*.flo"))) == 4
        report = tmp_path / "r" / "report.json"
        assert cli.main(["eval", "--pred", str(pred), "--gt", str(dataset), "--report", str(report)]) == 0
        rep = json.loads(report.read_text())
        assert 0.0 <= rep["mAP"] <= 1.0 and len(rep["samples"]) == 4
        assert report.with_suffix(".csv").exists() and report.with_suffix(".png").exists()

    def test_infer_bad_theta(self, run_dir, dataset, tmp_path):
        assert cli.main(["infer", "--model", str(run_dir), "--data", str(dataset), "--out", str(tmp_path),
                         "--theta", "2"]) == 1

    def test_eval_identical_dirs(self, dataset, tmp_path, capsys):
        report = tmp_path / "report.json"
        assert cli.main(["eval", "--pred", str(dataset), "--gt", str(dataset), "--report", str(report)]) == 0
        rep = json.loads(report.read_text())
        assert rep["mAP"] == 1.0 and rep["mIoU_ins"] == 1.0
        assert "mAP 1.0000" in capsys.readouterr().out

    def test_eval_missing_predictions(self, dataset, tmp_path):
        assert cli.main(["eval", "--pred", str(tmp_path), "--gt", str(dataset), "--report",
                         str(tmp_path / "r.json")]) == 2


class TestViz:
    def test_zero_flow_is_mid_gray(self, tmp_path):
        io.write_flo(tmp_path / "z.flo", np.zeros((2, 5, 6), np.float32))
        assert cli.main(["viz", "--flow", str(tmp_path / "z.flo"), "--out", str(tmp_path / "z.ppm")]) == 0
        img = io.read_ppm(tmp_path / "z.ppm")
        assert img.shape == (5, 6, 3)
        assert (img == 128).all()

    def test_scene_overlay(self, dataset, tmp_path):
        scene = sorted(dataset.iterdir())[0]
        assert cli.main(["viz", "--scene", str(scene), "--out", str(tmp_path / "o.ppm")]) == 0
        assert io.read_ppm(tmp_path / "o.ppm").shape == (48, 48, 3)

    def test_needs_a_source(self, tmp_path):
        assert cli.main(["viz", "--out", str(tmp_path / "o.ppm")]) == 1


class TestGradcheck:
    def test_release_gate(self, capsys):
        assert cli.main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "all cases passed" in out and "full_model" in out

    def test_corrupted_matmul_is_named(self, monkeypatch, capsys):
        def bad_matmul(a, b):
            a, b = T.as_tensor(a), T.as_tensor(b)

            def backward(g):
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                return 1.5 * ga, np.zeros(b.shape)

            return T._result(np.matmul(a.data, b.data), (a, b), backward, "matmul")

        monkeypatch.setattr(T, "matmul", bad_matmul)
        assert cli.main(["gradcheck", "--skip-model"]) == 1
        failed = [line for line in capsys.readouterr().out.splitlines() if line.startswith("FAILED:")]
        assert failed and "matmul" in failed[0].split(":", 1)[1].strip().split(", ")
