"""Verification for emomask.facedetect.

Gradient and histogram behavior is checked against hand-evaluated edges and
symmetry arguments; window scoring is checked against an explicit
slice-and-dot loop; detection is checked by planting known positives into
synthetic frames.
"""

import math
import struct

import numpy as np
import pytest

from emomask import BadMagic, VersionUnsupported
from emomask.facedetect import (
    CorruptModelFile,
    DimensionMismatch,
    EmptyClass,
    FaceBox,
    HogParams,
    ImageTooSmall,
    LinearSvm,
    NonFiniteModel,
    SizeMismatch,
    UntrainedModel,
    _score_windows,
    build_pyramid,
    detect_faces,
    gradients,
    hog_block_map,
    hog_descriptor,
    iou,
    load_svm,
    make_training_set,
    nms,
    predict_margin,
    save_svm,
    synthetic_face_chip,
    synthetic_negative_chip,
    train_default_detector,
    train_linear_svm,
)
from emomask.imagecore import Image, resize_bilinear


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def face_svm():
    return train_default_detector()


def gray(arr) -> Image:
    return Image(np.asarray(arr, dtype=np.uint8)[:, :, None])


def plant_face(face_size, fx, fy, seed, frame_size=256):
    """Synthetic frame with one face chip pasted at a known location."""
    r = np.random.default_rng(seed)
    canvas = np.clip(r.normal(110, 6, (frame_size, frame_size)), 0, 255)
    chip = synthetic_face_chip(r, 64)
    if face_size != 64:
        chip = resize_bilinear(chip, face_size, face_size)
    canvas[fy : fy + face_size, fx : fx + face_size] = chip.pixels[:, :, 0]
    return gray(np.floor(canvas + 0.5))


class TestGradients:
    def test_constant_image_zero_magnitude(self):
        mag, _ = gradients(gray(np.full((8, 8), 90)))
        assert np.all(mag == 0)

    def test_vertical_step_edge(self):
        img = np.zeros((8, 8))
        img[:, 4:] = 255
        mag, ori = gradients(gray(img))
        # central difference spans the step at columns 3 and 4
        assert np.allclose(mag[2:6, 3], 255.0)
        assert np.allclose(mag[2:6, 4], 255.0)
        assert np.allclose(ori[2:6, 3], 0.0)

    def test_rotation_swaps_orientations(self):
        img = np.zeros((8, 8))
        img[:, 4:] = 255
        _, ori_v = gradients(gray(img))
        _, ori_h = gradients(gray(np.rot90(img).copy()))
        assert np.allclose(ori_v[3, 4], 0.0)
        assert np.allclose(ori_h[4, 3], 90.0)

    def test_orientation_range(self, rng):
        _, ori = gradients(gray(rng.integers(0, 256, (16, 16))))
        assert np.all(ori >= 0.0) and np.all(ori < 180.0)

    def test_too_small_rejected(self):
        with pytest.raises(ImageTooSmall):
            gradients(gray(np.zeros((2, 5))))


class TestHogDescriptor:
    def test_length_formula_default(self, rng):
        d = hog_descriptor(gray(rng.integers(0, 256, (64, 64))))
        assert d.shape == (1764,)

    @pytest.mark.parametrize("window,cell", [(32, 8), (64, 16), (48, 8)])
    def test_length_formula_other_geometries(self, rng, window, cell):
        p = HogParams(cell_size=cell, window=window)
        d = hog_descriptor(gray(rng.integers(0, 256, (window, window))), p)
        blocks = window // cell - 1
        assert d.shape == (blocks * blocks * 36,)

    def test_flat_field_zero_descriptor(self):
        d = hog_descriptor(gray(np.full((64, 64), 137)))
        assert np.all(d == 0.0)

    def test_components_bounded(self, rng):
        d = hog_descriptor(gray(rng.integers(0, 256, (64, 64))))
        assert np.all(d >= 0.0) and np.all(d <= 1.0)

    def test_block_norms_bounded(self, rng):
        d = hog_descriptor(gray(rng.integers(0, 256, (64, 64)))).reshape(-1, 36)
        norms = np.linalg.norm(d, axis=1)
        assert np.all(norms <= 1.0 + 1e-6)

    def test_additive_shift_invariance(self, rng):
        base = rng.integers(40, 160, (64, 64))
        d1 = hog_descriptor(gray(base))
        d2 = hog_descriptor(gray(base + 50))
        assert np.max(np.abs(d1 - d2)) <= 1e-4

    def test_multiplicative_scale_invariance(self, rng):
        base = rng.integers(0, 120, (64, 64))
        d1 = hog_descriptor(gray(base))
        d2 = hog_descriptor(gray(base * 2))
        assert np.max(np.abs(d1 - d2)) <= 1e-4

    def test_wrong_size_rejected(self, rng):
        with pytest.raises(SizeMismatch):
            hog_descriptor(gray(rng.integers(0, 256, (32, 64))))

    def test_descriptor_is_block_map_slice(self, rng):
        """Whole-window descriptor == flattened block map of that window."""
        img = gray(rng.integers(0, 256, (64, 64)))
        assert np.array_equal(hog_descriptor(img), hog_block_map(img).reshape(-1))


class TestPyramid:
    def test_window_sized_input_single_level(self, rng):
        img = gray(rng.integers(0, 256, (64, 64)))
        levels = build_pyramid(img, min_size=64, window=64)
        assert len(levels) == 1
        assert levels[0][0] == 1.0
        assert levels[0][1] is img

    def test_levels_shrink_geometrically(self, rng):
        img = gray(rng.integers(0, 256, (720, 1280)))
        levels = build_pyramid(img, scale_step=1.2, min_size=0, window=64)
        assert len(levels) > 5
        for (s0, a), (s1, b) in zip(levels, levels[1:]):
            assert s0 / s1 == pytest.approx(1.2, rel=1e-9)
            assert a.width / b.width == pytest.approx(1.2, rel=0.02)

    def test_min_size_floor(self, rng):
        """Every level maps a window hit to a frame box of >= min_size px."""
        img = gray(rng.integers(0, 256, (720, 1280)))
        for scale, _ in build_pyramid(img, min_size=80, window=64):
            assert 64.0 / scale >= 80.0 - 1e-9

    def test_all_levels_hold_window(self, rng):
        img = gray(rng.integers(0, 256, (200, 300)))
        for _, level in build_pyramid(img, min_size=64):
            assert level.width >= 64 and level.height >= 64

    def test_bad_step_rejected(self, rng):
        with pytest.raises(ValueError):
            build_pyramid(gray(rng.integers(0, 256, (64, 64))), scale_step=1.0)


class TestScoreWindows:
    def test_matches_slice_dot_loop(self, rng):
        """The 49-shift accumulation equals scoring each window's descriptor
        slice explicitly."""
        params = HogParams()
        img = gray(rng.integers(0, 256, (96, 112)))
        bm = hog_block_map(img, params)
        svm = LinearSvm(
            weights=rng.standard_normal(params.descriptor_length).astype(np.float32),
            bias=0.25,
        )
        score, oy, ox = _score_windows(bm, svm, params, 1)
        bw = params.blocks_per_window
        for yi in range(oy):
            for xi in range(ox):
                desc = bm[yi : yi + bw, xi : xi + bw].reshape(-1)
                want = float(desc @ svm.weights + svm.bias)
                assert score[yi, xi] == pytest.approx(want, abs=2e-4)

    def test_stride_subsamples_positions(self, rng):
        params = HogParams()
        img = gray(rng.integers(0, 256, (96, 96)))
        bm = hog_block_map(img, params)
        svm = LinearSvm(
            weights=rng.standard_normal(params.descriptor_length).astype(np.float32),
            bias=0.0,
        )
        full, _, _ = _score_windows(bm, svm, params, 1)
        half, _, _ = _score_windows(bm, svm, params, 2)
        assert np.array_equal(half, full[::2, ::2])


class TestNms:
    def test_single_box(self):
        b = FaceBox(0, 0, 10, 10, 1.0)
        assert nms([b], 0.3) == [b]

    def test_identical_boxes_keep_highest(self):
        hi = FaceBox(0, 0, 10, 10, 2.0)
        lo = FaceBox(0, 0, 10, 10, 1.0)
        assert nms([lo, hi], 0.3) == [hi]

    def test_disjoint_all_kept(self):
        boxes = [FaceBox(0, 0, 5, 5, 1.0), FaceBox(20, 20, 5, 5, 0.5),
                 FaceBox(40, 0, 5, 5, 2.0)]
        kept = nms(boxes, 0.3)
        assert len(kept) == 3
        assert kept[0].score == 2.0

    def test_pairwise_iou_bounded_and_subset(self, rng):
        boxes = [
            FaceBox(rng.uniform(0, 80), rng.uniform(0, 80), 20, 20, rng.uniform(0, 5))
            for _ in range(40)
        ]
        kept = nms(boxes, 0.3)
        assert all(k in boxes for k in kept)
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                assert iou(a, b) <= 0.3
        assert max(boxes, key=lambda b: b.score) in kept

    def test_iou_known_value(self):
        a = FaceBox(0, 0, 10, 10)
        b = FaceBox(5, 0, 10, 10)
        assert iou(a, b) == pytest.approx(50.0 / 150.0)


class TestTrainer:
    def toy_set(self, rng, n=40):
        pos = rng.normal(0, 0.1, (n, 2)) + np.array([2.0, 2.0])
        neg = rng.normal(0, 0.1, (n, 2)) + np.array([-2.0, -2.0])
        return pos, neg

    def test_separable_toy_perfect(self, rng):
        pos, neg = self.toy_set(rng)
        svm = train_linear_svm(pos, neg, seed=3)
        assert np.all(predict_margin(svm, pos) > 0)
        assert np.all(predict_margin(svm, neg) <= 0)

    def test_unlearnable_no_crash(self, rng):
        same = rng.normal(0, 1, (20, 3))
        svm = train_linear_svm(same, same.copy(), seed=1)
        correct = np.sum(predict_margin(svm, same) > 0) + np.sum(
            predict_margin(svm, same) <= 0
        )
        assert correct / (2 * len(same)) <= 0.5 + 1e-9

    def test_same_seed_bit_identical(self, rng):
        pos, neg = self.toy_set(rng)
        a = train_linear_svm(pos, neg, seed=11)
        b = train_linear_svm(pos, neg, seed=11)
        assert np.array_equal(a.weights, b.weights) and a.bias == b.bias

    def test_objective_curve_non_increasing(self, rng):
        pos, neg = self.toy_set(rng)
        svm = train_linear_svm(pos, neg, seed=5, epochs=25)
        curve = np.array(svm.objective_curve)
        assert np.all(np.diff(curve) <= 1e-12)

    def test_empty_class_rejected(self, rng):
        with pytest.raises(EmptyClass):
            train_linear_svm(np.zeros((0, 2)), rng.normal(0, 1, (5, 2)))

    def test_dimension_mismatch_rejected(self, rng):
        with pytest.raises(DimensionMismatch):
            train_linear_svm(rng.normal(0, 1, (5, 3)), rng.normal(0, 1, (5, 4)))


class TestDetect:
    def test_plant_and_recover(self, face_svm):
        frame = plant_face(64, 80, 60, seed=42)
        boxes = detect_faces(frame, face_svm, min_size=64)
        assert boxes
        assert iou(boxes[0], FaceBox(80, 60, 64, 64)) >= 0.5

    def test_plant_and_recover_double_scale(self, face_svm):
        frame = plant_face(128, 50, 70, seed=43)
        boxes = detect_faces(frame, face_svm, min_size=64)
        assert boxes
        assert iou(boxes[0], FaceBox(50, 70, 128, 128)) >= 0.5

    def test_blank_frame_empty(self, face_svm):
        blank = gray(np.full((256, 256), 128))
        assert detect_faces(blank, face_svm, min_size=64) == []

    def test_deterministic(self, face_svm):
        frame = plant_face(64, 100, 90, seed=44)
        a = detect_faces(frame, face_svm, min_size=64)
        b = detect_faces(frame, face_svm, min_size=64)
        assert a == b

    def test_results_sorted_and_separated(self, face_svm):
        frame = plant_face(64, 100, 90, seed=45)
        boxes = detect_faces(frame, face_svm, min_size=64, nms_iou=0.3)
        scores = [b.score for b in boxes]
        assert scores == sorted(scores, reverse=True)
        for i, a in enumerate(boxes):
            for b in boxes[i + 1 :]:
                assert iou(a, b) <= 0.3

    def test_length_mismatch_rejected(self, rng):
        svm = LinearSvm(weights=np.ones(10, dtype=np.float32), bias=0.0)
        with pytest.raises(UntrainedModel):
            detect_faces(gray(rng.integers(0, 256, (64, 64))), svm)

    def test_rgb_input_accepted(self, face_svm, rng):
        frame = plant_face(64, 64, 64, seed=46)
        rgb = Image(np.repeat(frame.pixels, 3, axis=2))
        boxes = detect_faces(rgb, face_svm, min_size=64)
        assert boxes and iou(boxes[0], FaceBox(64, 64, 64, 64)) >= 0.5


class TestModelFile:
    def test_round_trip(self, rng, tmp_path):
        svm = LinearSvm(
            weights=rng.standard_normal(1764).astype(np.float32),
            bias=-1.25,
            threshold=0.5,
        )
        path = tmp_path / "m.hsvm"
        save_svm(path, svm)
        back = load_svm(path)
        assert np.array_equal(back.weights, svm.weights)
        assert back.bias == pytest.approx(svm.bias, abs=1e-7)
        assert back.threshold == pytest.approx(svm.threshold, abs=1e-7)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.hsvm"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(BadMagic):
            load_svm(path)

    def test_version_unsupported(self, rng, tmp_path):
        path = tmp_path / "m.hsvm"
        save_svm(path, LinearSvm(weights=np.ones(4, np.float32), bias=0.0))
        data = bytearray(path.read_bytes())
        data[4:8] = struct.pack("<I", 3)
        path.write_bytes(bytes(data))
        with pytest.raises(VersionUnsupported):
            load_svm(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "m.hsvm"
        save_svm(path, LinearSvm(weights=np.ones(8, np.float32), bias=0.0))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CorruptModelFile):
            load_svm(path)

    def test_nonfinite_rejected(self, tmp_path):
        path = tmp_path / "m.hsvm"
        save_svm(path, LinearSvm(weights=np.ones(4, np.float32), bias=0.0))
        data = bytearray(path.read_bytes())
        data[20:24] = struct.pack("<f", math.nan)
        path.write_bytes(bytes(data))
        with pytest.raises(NonFiniteModel):
            load_svm(path)


class TestSyntheticChips:
    def test_chips_are_window_sized_gray(self, rng):
        face = synthetic_face_chip(rng)
        noise = synthetic_negative_chip(rng)
        assert face.pixels.shape == (64, 64, 1)
        assert noise.pixels.shape == (64, 64, 1)

    def test_training_set_shapes(self):
        pos, neg = make_training_set(4, 6, seed=2)
        assert pos.shape == (4, 1764) and neg.shape == (6, 1764)

    def test_classes_separable_by_trained_model(self, face_svm):
        pos, neg = make_training_set(30, 60, seed=999)
        acc = (
            np.sum(predict_margin(face_svm, pos) > 0)
            + np.sum(predict_margin(face_svm, neg) <= 0)
        ) / 90.0
        assert acc >= 0.9
