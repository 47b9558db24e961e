"""Letterboxing, box decoding, IoU, and non-maximum suppression."""

import math

import numpy as np
import pytest

from yolokit.detect import (
    Box,
    Detection,
    IDENTITY_TRANSFORM,
    LetterboxTransform,
    decode,
    iou,
    letterbox,
    nms,
)
from yolokit.errors import ShapeError, UsageError
from yolokit.network import HeadOutput
from yolokit.oracles import iou_grid_count


def head_with_raw(raw, stride=32, anchors=None, num_classes=2):
    anchors = anchors or [(116.0, 90.0), (156.0, 198.0), (373.0, 326.0)]
    rows, cols = raw.shape[1], raw.shape[2]
    return HeadOutput((rows, cols), stride, raw, anchors, num_classes)


class TestLetterbox:
    def test_square_identity(self):
        image = np.random.default_rng(0).uniform(0, 1, (3, 64, 64))
        out, transform = letterbox(image, 64)
        assert transform == LetterboxTransform(1.0, 0.0, 0.0)
        assert np.array_equal(out, image)

    def test_wide_image_pads_x(self):
        image = np.random.default_rng(1).uniform(0, 1, (3, 320, 640))
        out, transform = letterbox(image, 640)
        assert transform.scale == 1.0
        assert (transform.pad_x, transform.pad_y) == (0.0, 160.0)
        assert out.shape == (3, 640, 640)
        assert np.all(out[:, :160, :] == 0.5)
        assert np.all(out[:, 480:, :] == 0.5)

    def test_target_must_be_divisible(self):
        with pytest.raises(UsageError):
            letterbox(np.zeros((3, 64, 64)), 100)

    def test_box_round_trip_within_pixel(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            h = int(rng.integers(40, 700))
            w = int(rng.integers(40, 700))
            _, transform = letterbox(np.zeros((3, h, w)), 320)
            box = Box(
                float(rng.uniform(5, w - 5)),
                float(rng.uniform(5, h - 5)),
                float(rng.uniform(2, 30)),
                float(rng.uniform(2, 30)),
            )
            back = transform.to_original(transform.to_input(box))
            assert abs(back.x - box.x) <= 1 and abs(back.y - box.y) <= 1
            assert abs(back.w - box.w) <= 1 and abs(back.h - box.h) <= 1


class TestDecode:
    def test_zero_logit_score_product(self):
        raw = np.full((21, 1, 1), -800.0)
        raw[4, 0, 0] = 0.0                      # objectness 0.5
        raw[5, 0, 0] = math.log(0.8 / 0.2)      # class prob 0.8
        head = head_with_raw(raw)
        dets = decode(head, 0.0, IDENTITY_TRANSFORM, "img")
        best = max(dets, key=lambda d: d.score)
        assert best.class_index == 0
        assert abs(best.score - 0.4) < 1e-12

    def test_hand_decoded_box(self):
        raw = np.full((21, 1, 1), -800.0)
        raw[0:5, 0, 0] = [0.0, 0.0, 0.0, 0.0, 800.0]
        raw[5, 0, 0] = 800.0
        head = head_with_raw(raw)
        det = decode(head, 0.5, IDENTITY_TRANSFORM, "img")[0]
        assert (det.box.x, det.box.y) == (16.0, 16.0)
        assert (det.box.w, det.box.h) == (116.0, 90.0)
        assert det.score == 1.0

    def test_high_threshold_empty(self):
        raw = np.zeros((21, 2, 2))
        dets = decode(head_with_raw(raw), 0.999, IDENTITY_TRANSFORM, "img")
        assert dets == []

    def test_threshold_range_validated(self):
        raw = np.zeros((21, 1, 1))
        with pytest.raises(UsageError):
            decode(head_with_raw(raw), 1.0, IDENTITY_TRANSFORM, "img")

    def test_centers_stay_in_cell(self):
        rng = np.random.default_rng(3)
        raw = rng.normal(0, 2, (21, 3, 3))
        for det in decode(head_with_raw(raw), 0.0, IDENTITY_TRANSFORM, "img"):
            col = int(det.box.x // 32)
            row = int(det.box.y // 32)
            assert 0 <= col < 3 and 0 <= row < 3

    def test_score_factorization(self):
        rng = np.random.default_rng(4)
        raw = rng.normal(0, 1, (21, 2, 2))
        head = head_with_raw(raw)
        shaped = raw.reshape(3, 7, 2, 2)
        for index, det in enumerate(decode(head, 0.0, IDENTITY_TRANSFORM, "img")):
            a, rest = divmod(index, 4)
            i, j = divmod(rest, 2)
            obj = 1 / (1 + math.exp(-shaped[a, 4, i, j]))
            prob = 1 / (1 + math.exp(-shaped[a, 5 + det.class_index, i, j]))
            assert det.score == pytest.approx(obj * prob, abs=1e-15)

    def test_transform_applied(self):
        raw = np.full((21, 1, 1), -800.0)
        raw[0:5, 0, 0] = [0.0, 0.0, 0.0, 0.0, 800.0]
        raw[5, 0, 0] = 800.0
        transform = LetterboxTransform(scale=0.5, pad_x=10.0, pad_y=0.0)
        det = decode(head_with_raw(raw), 0.5, transform, "img")[0]
        assert det.box.x == (16.0 - 10.0) / 0.5
        assert det.box.w == 116.0 / 0.5


class TestIou:
    def test_identity(self):
        b = Box(10, 10, 4, 6)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 2, 2), Box(10, 10, 2, 2)) == 0.0

    def test_one_third_case(self):
        # corner rectangles (0,0)-(2,2) and (1,0)-(3,2)
        a = Box(1, 1, 2, 2)
        b = Box(2, 1, 2, 2)
        assert iou(a, b) == pytest.approx(1 / 3, abs=1e-15)
        assert iou_grid_count(a, b) == pytest.approx(1 / 3, abs=2e-2)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a = Box(*rng.uniform(0, 50, 2), *rng.uniform(1, 20, 2))
            b = Box(*rng.uniform(0, 50, 2), *rng.uniform(1, 20, 2))
            assert iou(a, b) == iou(b, a)
            assert 0.0 <= iou(a, b) <= 1.0

    def test_grid_oracle_agreement(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            a = Box(*rng.uniform(10, 40, 2), *rng.uniform(5, 25, 2))
            b = Box(*rng.uniform(10, 40, 2), *rng.uniform(5, 25, 2))
            assert iou(a, b) == pytest.approx(iou_grid_count(a, b), abs=2e-2)

    def test_degenerate_box_rejected(self):
        with pytest.raises(ShapeError):
            Box(0, 0, 0, 5)


class TestNms:
    def test_singleton(self):
        det = Detection("img", 0, 0.5, Box(10, 10, 5, 5))
        assert nms([det], 0.45) == [det]

    def test_overlapping_pair_suppressed(self):
        # same-size boxes offset to overlap at IoU 0.6 exactly
        a = Detection("img", 0, 0.9, Box(10.0, 10.0, 10.0, 10.0))
        b = Detection("img", 0, 0.8, Box(12.5, 10.0, 10.0, 10.0))
        assert iou(a.box, b.box) == pytest.approx(0.6)
        assert nms([a, b], 0.45) == [a]
        assert nms([b, a], 0.45) == [a]

    def test_classwise_suppression(self):
        a = Detection("img", 0, 0.9, Box(10, 10, 10, 10))
        b = Detection("img", 1, 0.8, Box(10, 10, 10, 10))
        assert set(nms([a, b], 0.45)) == {a, b}

    def test_threshold_validated(self):
        with pytest.raises(UsageError):
            nms([], 0.0)

    def test_survivor_pairs_below_threshold(self):
        rng = np.random.default_rng(7)
        dets = [
            Detection(
                "img",
                int(rng.integers(2)),
                float(score),
                Box(*rng.uniform(10, 60, 2), *rng.uniform(8, 30, 2)),
            )
            for score in np.linspace(0.95, 0.05, 40)
        ]
        survivors = nms(dets, 0.45)
        for a in survivors:
            for b in survivors:
                if a is not b and a.class_index == b.class_index:
                    assert iou(a.box, b.box) <= 0.45

    def test_equal_scores_keep_input_order(self):
        a = Detection("img", 0, 0.8, Box(10.0, 10.0, 10.0, 10.0))
        b = Detection("img", 0, 0.8, Box(11.0, 10.0, 10.0, 10.0))
        assert nms([a, b], 0.45) == [a]
        assert nms([b, a], 0.45) == [b]

    def test_permutation_invariance(self):
        rng = np.random.default_rng(8)
        dets = [
            Detection(
                "img",
                int(rng.integers(3)),
                float(score),
                Box(*rng.uniform(10, 60, 2), *rng.uniform(8, 30, 2)),
            )
            for score in rng.permutation(np.linspace(0.9, 0.1, 30))
        ]
        baseline = set(nms(dets, 0.45))
        for _ in range(5):
            shuffled = list(dets)
            rng.shuffle(shuffled)
            assert set(nms(shuffled, 0.45)) == baseline
