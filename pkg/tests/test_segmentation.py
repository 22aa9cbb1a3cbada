"""
Segmentation: distal mask, BCE loss, IOU
"""
import math

import numpy as np
import pytest
from scipy import ndimage

from c2cl.exceptions import DimensionMismatchError, ImageFormatError, SegmentationFailedError
from c2cl.services.imaging import GrayImage
from c2cl.services.segmentation import (
    Mask, ProbMask, iou, load_mask, save_mask, seg_bce_grad, seg_bce_loss, segment_distal,
)
from c2cl.services.synthetic import finger_blob


def _single_component(mask):
    _, count = ndimage.label(mask.bits, structure=ndimage.generate_binary_structure(2, 1))
    return count == 1


class TestSegmentDistal:
    def test_compact_fingertip(self, rng):
        img, gt = finger_blob(width=400, height=480, rng=rng)
        mask = segment_distal(img)
        assert mask.shape == img.shape
        assert iou(mask, gt) > 0.9
        assert _single_component(mask)
        assert not mask.low_confidence

    def test_whole_finger_is_cropped_to_distal_part(self):
        img, gt = finger_blob(palm=True)
        mask = segment_distal(img)
        assert _single_component(mask)
        assert not mask.bits[400:].any()
        cy, cx = 120, 160
        assert mask.bits[cy, cx] == 1
        assert mask.area < int(np.count_nonzero(img.pixels > 0.5))

    def test_uniform_image(self):
        with pytest.raises(SegmentationFailedError):
            segment_distal(GrayImage(np.full((64, 64), 0.4)))

    def test_tiny_foreground_is_low_confidence(self):
        pixels = np.full((200, 200), 0.1)
        pixels[96:104, 96:104] = 0.9
        mask = segment_distal(GrayImage(pixels))
        assert mask.area > 0
        assert mask.low_confidence

    def test_deterministic(self):
        img, _ = finger_blob(width=400, height=480)
        assert np.array_equal(segment_distal(img).bits, segment_distal(img).bits)


class TestMaskType:
    def test_rejects_non_binary(self):
        with pytest.raises(ImageFormatError):
            Mask(np.array([[0, 2]]))

    def test_bool_input(self):
        assert Mask(np.array([[True, False]])).area == 1

    def test_round_trip(self, tmp_path):
        bits = (np.indices((12, 9)).sum(axis=0) % 3 == 0).astype(np.uint8)
        loaded = load_mask(save_mask(Mask(bits), tmp_path / "m.png"))
        np.testing.assert_array_equal(loaded.bits, bits)

    def test_prob_mask_range(self):
        with pytest.raises(ImageFormatError):
            ProbMask(np.array([[1.2]]))


class TestBCE:
    def test_half_probability(self):
        gt = Mask(np.array([[1, 0], [0, 1]]))
        pred = ProbMask(np.full((2, 2), 0.5))
        assert seg_bce_loss(pred, gt) == pytest.approx(4 * math.log(2))
        assert seg_bce_loss(pred, gt, reduction="mean") == pytest.approx(math.log(2))

    def test_perfect_prediction_is_near_zero(self):
        gt = Mask(np.array([[1, 0]]))
        assert seg_bce_loss(ProbMask(np.array([[1.0, 0.0]])), gt) < 1e-6

    def test_gradient(self):
        gt = Mask(np.array([[1, 0, 1]]))
        grad = seg_bce_grad(ProbMask(np.array([[0.25, 0.25, 0.0]])), gt)
        np.testing.assert_allclose(grad, [[-4.0, 1.0 / 0.75, 0.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            seg_bce_loss(ProbMask(np.zeros((2, 2))), Mask(np.zeros((2, 3), dtype=np.uint8)))


class TestIOU:
    def test_values(self):
        a = Mask(np.array([[1, 1, 0, 0]]))
        b = Mask(np.array([[0, 1, 1, 0]]))
        assert iou(a, b) == pytest.approx(1 / 3)
        assert iou(a, a) == 1.0
        empty = Mask(np.zeros((1, 4), dtype=np.uint8))
        assert iou(empty, empty) == 1.0
