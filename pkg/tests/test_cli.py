"""CLI behavior: exit codes, file outputs, determinism, JSON results."""

import json

import numpy as np
import pytest

from yolokit import cli
from yolokit.detect import Box, Detection
from yolokit.evaluation import format_predictions, format_visdrone, GroundTruthBox
from yolokit.ppm import PALETTE, encode_ppm, parse_ppm, read_ppm, write_ppm
from yolokit.verify import CheckResult


@pytest.fixture
def scene(tmp_path):
    rng = np.random.default_rng(11)
    path = tmp_path / "scene.ppm"
    write_ppm(path, rng.uniform(0, 1, (3, 64, 96)))
    return path


def run(argv):
    return cli.main([str(a) for a in argv])


class TestPpm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        image = np.round(rng.uniform(0, 1, (3, 5, 7)) * 255) / 255
        path = tmp_path / "x.ppm"
        write_ppm(path, image)
        again = read_ppm(path)
        np.testing.assert_allclose(again, image, atol=1e-9)

    def test_comments_in_header(self):
        data = b"P6\n# a comment\n2 1\n255\n" + bytes(6)
        assert parse_ppm(data).shape == (3, 1, 2)

    def test_bad_magic(self):
        from yolokit.errors import ValidationError

        with pytest.raises(ValidationError):
            parse_ppm(b"P5\n1 1\n255\n\x00")

    def test_truncated_raster(self):
        from yolokit.errors import ValidationError

        with pytest.raises(ValidationError):
            parse_ppm(b"P6\n2 2\n255\n\x00\x00\x00")

    def test_encode_clips(self):
        image = np.array([[[-1.0, 2.0]]] * 3)
        data = encode_ppm(image)
        assert data.endswith(bytes([0, 0, 0, 255, 255, 255]))


class TestDetect:
    def test_high_threshold_empty_predictions(self, scene, tmp_path):
        out = tmp_path / "preds.txt"
        code = run(
            ["detect", scene, "--model", "yolov3-tiny", "--classes", "2",
             "--size", "64", "--conf", "0.999", "--precision", "single",
             "--seed", "5", "--out", out]
        )
        assert code == 0
        assert out.read_text() == ""

    def test_indivisible_size_is_usage_error(self, scene, tmp_path):
        code = run(
            ["detect", scene, "--model", "yolov3-tiny", "--size", "100",
             "--out", tmp_path / "p.txt"]
        )
        assert code == 2

    def test_missing_model_is_usage_error(self, scene, tmp_path):
        assert run(["detect", scene, "--out", tmp_path / "p.txt"]) == 2

    def test_missing_image_is_runtime_error(self, tmp_path):
        code = run(
            ["detect", tmp_path / "nope.ppm", "--model", "yolov3-tiny",
             "--size", "64", "--out", tmp_path / "p.txt"]
        )
        assert code == 1

    def test_deterministic_predictions(self, scene, tmp_path):
        args = ["detect", scene, "--model", "yolov3-tiny", "--classes", "2",
                "--size", "64", "--conf", "0.05", "--precision", "single", "--seed", "9"]
        out1, out2 = tmp_path / "a.txt", tmp_path / "b.txt"
        assert run(args + ["--out", out1]) == 0
        assert run(args + ["--out", out2]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_render_writes_outlined_copy(self, scene, tmp_path):
        rendered = tmp_path / "rendered"
        code = run(
            ["detect", scene, "--model", "yolov3-tiny", "--classes", "2",
             "--size", "64", "--conf", "0.05", "--precision", "single",
             "--seed", "9", "--out", tmp_path / "p.txt", "--render", rendered]
        )
        assert code == 0
        out = read_ppm(rendered / "scene.ppm")
        assert out.shape == (3, 64, 96)
        palette = np.array(PALETTE, dtype=float) / 255.0
        flat = out.reshape(3, -1).T
        hits = (np.abs(flat[:, None, :] - palette[None, :, :]).max(axis=2) < 1e-9).any()
        assert hits  # at least one pixel painted in a palette color

    def test_env_seed_matches_explicit(self, scene, tmp_path, monkeypatch):
        args = ["detect", scene, "--model", "yolov3-tiny", "--classes", "2",
                "--size", "64", "--conf", "0.05", "--precision", "single"]
        explicit, from_env = tmp_path / "a.txt", tmp_path / "b.txt"
        assert run(args + ["--seed", "21", "--out", explicit]) == 0
        monkeypatch.setenv("YOLOKIT_SEED", "21")
        assert run(args + ["--out", from_env]) == 0
        assert explicit.read_bytes() == from_env.read_bytes()


class TestEval:
    def _write_fixture(self, tmp_path):
        gt_dir = tmp_path / "gt"
        gt_dir.mkdir()
        truth = [
            GroundTruthBox("im0", 0, Box(20, 20, 10, 10)),
            GroundTruthBox("im0", 0, Box(60, 60, 10, 10)),
        ]
        (gt_dir / "im0.txt").write_text(format_visdrone(truth))
        dets = [
            Detection("im0", 0, 0.9, Box(20, 20, 10, 10)),
            Detection("im0", 0, 0.8, Box(40, 40, 10, 10)),
            Detection("im0", 0, 0.7, Box(60, 60, 10, 10)),
        ]
        pred = tmp_path / "preds.txt"
        pred.write_text(format_predictions(dets))
        return gt_dir, pred

    def test_hand_fixture_prints_83_3(self, tmp_path, capsys):
        gt_dir, pred = self._write_fixture(tmp_path)
        code = run(["eval", "--gt", gt_dir, "--pred", pred, "--classes", "1",
                    "--out-dir", tmp_path / "out"])
        assert code == 0
        captured = capsys.readouterr().out
        assert "83.3" in captured
        assert "mAP50 83.3" in captured
        assert (tmp_path / "out" / "report.csv").exists()
        assert (tmp_path / "out" / "pr_class0.csv").exists()

    def test_perfect_predictions_print_100(self, tmp_path, capsys):
        gt_dir = tmp_path / "gt"
        gt_dir.mkdir()
        truth = [GroundTruthBox("im0", 1, Box(30, 30, 12, 12))]
        (gt_dir / "im0.txt").write_text(format_visdrone(truth))
        pred = tmp_path / "p.txt"
        pred.write_text(format_predictions(
            [Detection("im0", 1, 1.0, Box(30, 30, 12, 12))]
        ))
        code = run(["eval", "--gt", gt_dir, "--pred", pred, "--classes", "10",
                    "--out-dir", tmp_path / "out"])
        assert code == 0
        assert "mAP50 100.0" in capsys.readouterr().out

    def test_empty_predictions_zero_map(self, tmp_path, capsys):
        gt_dir, _ = self._write_fixture(tmp_path)
        pred = tmp_path / "empty.txt"
        pred.write_text("")
        code = run(["eval", "--gt", gt_dir, "--pred", pred, "--classes", "1",
                    "--out-dir", tmp_path / "out"])
        assert code == 0
        assert "mAP50 0.0" in capsys.readouterr().out

    def test_malformed_predictions_fail_with_line(self, tmp_path, capsys):
        gt_dir, _ = self._write_fixture(tmp_path)
        pred = tmp_path / "bad.txt"
        pred.write_text("im0 0 not-a-number 1 1 1 1\n")
        code = run(["eval", "--gt", gt_dir, "--pred", pred, "--classes", "1",
                    "--out-dir", tmp_path / "out"])
        assert code == 1
        assert "line 1" in capsys.readouterr().err


class TestVerifyCommand:
    def _stub_results(self, all_pass=True):
        return [
            CheckResult("alpha", True, "ok", "exact", 0.1),
            CheckResult("beta", all_pass, "meh", "exact", 0.2),
        ]

    def test_json_document(self, monkeypatch, capsys):
        monkeypatch.setattr(cli, "run_all", lambda **kw: self._stub_results())
        assert run(["verify", "--json"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert [entry["name"] for entry in doc] == ["alpha", "beta"]
        assert all(entry["passed"] for entry in doc)

    def test_failing_check_exits_nonzero(self, monkeypatch, capsys):
        monkeypatch.setattr(cli, "run_all", lambda **kw: self._stub_results(False))
        assert run(["verify"]) == 1
        assert "[FAIL] beta" in capsys.readouterr().out

    def test_zero_toy_steps_is_usage_error(self):
        assert run(["verify", "--toy-steps", "0"]) == 2

    def test_fault_flag_reaches_the_battery(self, monkeypatch, capsys):
        seen = {}

        def spy(**kwargs):
            seen.update(kwargs)
            return self._stub_results()

        monkeypatch.setattr(cli, "run_all", spy)
        assert run(["verify", "--inject-grad-fault", "0.01"]) == 0
        assert seen["fault"] == 0.01


class TestTrainToyCommand:
    def test_writes_history_csv(self, tmp_path, capsys):
        out = tmp_path / "loss.csv"
        assert run(["train-toy", "--steps", "2", "--seed", "0", "--out", out]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == 3
        assert "loss" in capsys.readouterr().out

    def test_negative_steps_usage_error(self, tmp_path):
        assert run(["train-toy", "--steps", "-1", "--out", tmp_path / "x.csv"]) == 2
