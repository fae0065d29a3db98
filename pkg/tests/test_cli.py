"""Command line surface: every subcommand exercised through main()."""

import json

import numpy as np
import pytest

from emomask.cli import main
from emomask.emotion import EmotionLabel
from emomask.facedetect import (
    load_svm,
    synthetic_face_chip,
    synthetic_negative_chip,
    train_default_detector,
)
from emomask.imagecore import read_image, write_image
from emomask.nn import VGG_BA_SMALL, save_weights
from emomask.facedetect import save_svm
from emomask.pipeline import synthetic_frames
from tests.test_facedetect import plant_face
from tests.test_nn import random_model

LABEL_NAMES = {lab.label_name for lab in EmotionLabel}


def blank_frame(size=192):
    from emomask.imagecore import Image

    return Image(np.full((size, size, 1), 110, dtype=np.uint8))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared artifacts: emoji set, weights, svm, a few frames, a config."""
    root = tmp_path_factory.mktemp("cli")

    emoji_dir = root / "emoji"
    assert main(["make-emoji", "--out", str(emoji_dir)]) == 0

    weights = root / "model.vggw"
    save_weights(weights, random_model(VGG_BA_SMALL, np.random.default_rng(3), scale=0.05))

    svm_path = root / "detector.hsvm"
    save_svm(svm_path, train_default_detector())

    frames = root / "frames"
    frames.mkdir()
    for i in range(3):
        g = plant_face(80, 80, 60, seed=i)
        write_image(frames / f"frame_{i}.ppm", type(g)(g.pixels.repeat(3, axis=2)))

    config = root / "config.json"
    config.write_text(
        json.dumps(
            {
                "emoji_dir": str(emoji_dir),
                "weights": str(weights),
                "svm": str(svm_path),
                "out_dir": str(root / "out"),
                "metrics": str(root / "metrics.jsonl"),
            }
        )
    )
    return root


class TestMakeEmoji:
    def test_writes_set(self, workdir, capsys):
        files = sorted(p.name for p in (workdir / "emoji").iterdir())
        assert len(files) == 14  # 7 images + 7 sidecars
        assert "happy.png" in files and "happy.json" in files


class TestTrainSvm:
    def test_trains_from_chip_dirs(self, tmp_path, capsys):
        rng = np.random.default_rng(1)
        pos = tmp_path / "pos"
        neg = tmp_path / "neg"
        pos.mkdir()
        neg.mkdir()
        for i in range(10):
            write_image(pos / f"p{i}.pgm", synthetic_face_chip(rng))
            write_image(neg / f"n{i}.pgm", synthetic_negative_chip(rng))
        out = tmp_path / "model.hsvm"
        rc = main(
            ["train-svm", "--pos", str(pos), "--neg", str(neg),
             "--out", str(out), "--seed", "3", "--epochs", "10"]
        )
        assert rc == 0
        svm = load_svm(out)
        assert svm.weights.shape == (1764,)
        assert "wrote" in capsys.readouterr().out

    def test_empty_dir_fails_cleanly(self, tmp_path, capsys):
        (tmp_path / "pos").mkdir()
        (tmp_path / "neg").mkdir()
        rc = main(
            ["train-svm", "--pos", str(tmp_path / "pos"), "--neg",
             str(tmp_path / "neg"), "--out", str(tmp_path / "m.hsvm")]
        )
        assert rc == 2
        assert "error:" in capsys.readouterr().err


class TestDetect:
    def test_prints_boxes(self, workdir, tmp_path, capsys):
        img = tmp_path / "face.png"
        write_image(img, plant_face(80, 80, 60, seed=4))
        rc = main(["detect", "--image", str(img), "--svm", str(workdir / "detector.hsvm")])
        assert rc == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert len(out) >= 1
        fields = out[0].split()
        assert len(fields) == 5
        x, y, w, h, score = map(float, fields)
        assert w == h > 0

    def test_no_detections_on_blank(self, workdir, tmp_path, capsys):
        img = tmp_path / "blank.png"
        write_image(img, blank_frame())
        rc = main(["detect", "--image", str(img), "--svm", str(workdir / "detector.hsvm")])
        assert rc == 0
        assert capsys.readouterr().out.strip() == ""


class TestClassify:
    def test_with_explicit_box(self, workdir, tmp_path, capsys):
        img = tmp_path / "face.png"
        write_image(img, plant_face(80, 80, 60, seed=5))
        rc = main(
            ["classify", "--image", str(img), "--weights", str(workdir / "model.vggw"),
             "--box", "80,60,80,80"]
        )
        assert rc == 0
        assert capsys.readouterr().out.strip() in LABEL_NAMES

    def test_no_face_exit_code(self, workdir, tmp_path, capsys):
        img = tmp_path / "blank.png"
        write_image(img, blank_frame())
        rc = main(
            ["classify", "--image", str(img), "--weights", str(workdir / "model.vggw"),
             "--svm", str(workdir / "detector.hsvm")]
        )
        assert rc == 1

    def test_bad_box_argument(self, workdir, capsys):
        with pytest.raises(SystemExit):
            main(["classify", "--image", "x.png", "--box", "1,2,3"])


class TestMask:
    def test_writes_masked_image(self, workdir, tmp_path, capsys):
        img = tmp_path / "face.png"
        frame = plant_face(80, 80, 60, seed=6)
        write_image(img, type(frame)(frame.pixels.repeat(3, axis=2)))
        out = tmp_path / "masked.png"
        rc = main(
            ["mask", "--image", str(img), "--out", str(out),
             "--emoji-dir", str(workdir / "emoji"),
             "--weights", str(workdir / "model.vggw"),
             "--svm", str(workdir / "detector.hsvm")]
        )
        assert rc == 0
        masked = read_image(out)
        assert not np.array_equal(masked.pixels, read_image(img).pixels)
        assert "label:" in capsys.readouterr().out


class TestRun:
    def test_end_to_end(self, workdir, capsys):
        rc = main(["run", "--config", str(workdir / "config.json"),
                   "--in", str(workdir / "frames")])
        assert rc == 0
        outs = list((workdir / "out").iterdir())
        assert len(outs) == 3
        lines = (workdir / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 3
        summary = capsys.readouterr().out
        assert "frames: 3" in summary and "fps:" in summary

    def test_missing_config_error_exit(self, tmp_path, capsys):
        rc = main(["run", "--config", str(tmp_path / "nope.json"), "--in", str(tmp_path)])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_bad_source_error_exit(self, workdir, tmp_path, capsys):
        rc = main(["run", "--config", str(workdir / "config.json"),
                   "--in", str(tmp_path / "missing")])
        assert rc == 2


class TestBenchCommand:
    def test_synthetic_report(self, workdir, tmp_path, capsys):
        report_dir = tmp_path / "rep"
        rc = main(
            ["bench", "--config", str(workdir / "config.json"),
             "--synthetic", "2", "--repeats", "1",
             "--report-dir", str(report_dir)]
        )
        assert rc == 0
        names = {p.name for p in report_dir.iterdir()}
        assert names == {"bench.csv", "stats.csv", "stage_latency.png", "frame_times.png"}
        out = capsys.readouterr().out
        assert "samples: 2" in out and "fps:" in out

    def test_frames_dir_source(self, workdir, tmp_path, capsys):
        report_dir = tmp_path / "rep"
        rc = main(
            ["bench", "--config", str(workdir / "config.json"),
             "--frames", str(workdir / "frames"), "--repeats", "2",
             "--report-dir", str(report_dir)]
        )
        assert rc == 0
        assert "samples: 6" in capsys.readouterr().out

    def test_frames_and_synthetic_conflict(self, workdir):
        with pytest.raises(SystemExit):
            main(["bench", "--config", str(workdir / "config.json"),
                  "--frames", "x", "--synthetic", "2"])
