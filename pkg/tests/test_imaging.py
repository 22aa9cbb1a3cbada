"""
Imaging: raster type, CLAHE, inversion, masking and canvas normalization
"""
import numpy as np
import pytest

from c2cl.exceptions import DimensionMismatchError, ImageFormatError, ParameterError
from c2cl.services.imaging import (
    CLAHE_BINS, GrayImage, apply_mask, clahe, invert, load_image, resize_pad, save_image,
)
from c2cl.services.segmentation import Mask


class TestGrayImage:
    def test_rejects_out_of_range(self):
        with pytest.raises(ImageFormatError):
            GrayImage(np.full((4, 4), 1.5))

    def test_rejects_empty_and_bad_ppi(self):
        with pytest.raises(ImageFormatError):
            GrayImage(np.zeros((0, 3)))
        with pytest.raises(ImageFormatError):
            GrayImage(np.zeros((3, 3)), ppi=0.0)

    def test_pixels_are_read_only(self):
        img = GrayImage(np.zeros((3, 3)))
        with pytest.raises(ValueError):
            img.pixels[0, 0] = 1.0

    def test_png_round_trip_is_8bit(self, tmp_path, rng):
        img = GrayImage.from_uint8(rng.integers(0, 256, (20, 30)))
        loaded = load_image(save_image(img, tmp_path / "a.png"))
        assert loaded.equals(img)

    def test_pgm_and_colour_input(self, tmp_path):
        from PIL import Image
        rgb = np.zeros((4, 5, 3), dtype=np.uint8)
        rgb[..., 1] = 200
        Image.fromarray(rgb).save(tmp_path / "c.png")
        loaded = load_image(tmp_path / "c.png")
        assert loaded.shape == (4, 5)
        assert abs(loaded.pixels[0, 0] - round(0.587 * 200) / 255) <= 1.5 / 255

        save_image(GrayImage(np.full((3, 3), 0.5)), tmp_path / "g.pgm")
        assert load_image(tmp_path / "g.pgm").pixels[1, 1] == pytest.approx(128 / 255)

    def test_unreadable_file(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not an image")
        with pytest.raises(ImageFormatError):
            load_image(tmp_path / "bad.png")


class TestClahe:
    def test_constant_image_unchanged(self):
        img = GrayImage(np.full((32, 32), 0.3))
        assert clahe(img).equals(img)

    def test_single_tile_without_clipping_is_histogram_equalization(self, rng):
        img = GrayImage(rng.beta(2.0, 5.0, (40, 50)))
        out = clahe(img, clip_limit=1e4, tiles=(1, 1))

        q = np.clip(np.round(img.pixels * (CLAHE_BINS - 1)), 0, CLAHE_BINS - 1).astype(int)
        cdf = np.cumsum(np.bincount(q.ravel(), minlength=CLAHE_BINS)) / q.size
        # 8-bit lookup tables round the mapping to the nearest level
        np.testing.assert_allclose(out.pixels, cdf[q], atol=0.5 / 255 + 1e-9)

    def test_output_range_and_shape(self, rng):
        img = GrayImage(rng.uniform(0.0, 1.0, (37, 53)))
        out = clahe(img, 3.0, (4, 6))
        assert out.shape == img.shape
        assert 0.0 <= out.pixels.min() and out.pixels.max() <= 1.0

    def test_clip_limit_bounds_contrast_stretch(self, rng):
        img = GrayImage(rng.uniform(0.4, 0.5, (64, 64)))
        limited = clahe(img, clip_limit=1.0, tiles=(1, 1))
        free = clahe(img, clip_limit=1e4, tiles=(1, 1))
        # a flat clipped histogram maps levels almost linearly
        assert np.ptp(limited.pixels) < 0.3
        assert np.ptp(free.pixels) > 0.9

    def test_tile_grid_larger_than_image(self, rng):
        img = GrayImage(rng.uniform(0.0, 1.0, (5, 7)))
        assert clahe(img, 2.0, (8, 8)).shape == (5, 7)

    def test_bad_tile_grid(self, rng):
        with pytest.raises(ParameterError):
            clahe(GrayImage(rng.uniform(0.0, 1.0, (8, 8))), tiles=(0, 4))

    def test_non_positive_clip_limit(self):
        with pytest.raises(ParameterError):
            clahe(GrayImage(np.zeros((8, 8))), clip_limit=0.0)

    def test_deterministic(self, rng):
        img = GrayImage(rng.uniform(0.0, 1.0, (48, 48)))
        assert clahe(img).equals(clahe(img))


class TestPointOperations:
    def test_invert_values(self):
        img = GrayImage(np.array([[0.0, 0.25]]))
        np.testing.assert_array_equal(invert(img).pixels, [[1.0, 0.75]])

    def test_invert_is_an_involution(self, rng):
        img = GrayImage(rng.uniform(0.0, 1.0, (17, 19)))
        assert invert(invert(img)).equals(img)

    def test_apply_mask(self, rng):
        img = GrayImage(rng.uniform(0.1, 1.0, (6, 6)))
        assert apply_mask(img, Mask.full(6, 6)).equals(img)
        assert not apply_mask(img, Mask(np.zeros((6, 6), dtype=np.uint8))).pixels.any()

        checker = (np.indices((6, 6)).sum(axis=0) % 2).astype(np.uint8)
        masked = apply_mask(img, Mask(checker))
        np.testing.assert_array_equal(masked.pixels, np.where(checker, img.pixels, 0.0))
        assert apply_mask(masked, Mask(checker)).equals(masked)

    def test_apply_mask_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            apply_mask(GrayImage(np.zeros((4, 4))), Mask.full(5, 4))


class TestResizePad:
    def test_portrait_aspect(self):
        img = GrayImage(np.full((1200, 900), 0.5))
        out, record = resize_pad(img, 480)
        assert out.shape == (480, 480)
        assert (record.content_width, record.content_height) == (360, 480)
        assert (record.pad_left, record.pad_right) == (60, 60)
        assert (record.pad_top, record.pad_bottom) == (0, 0)
        assert not out.pixels[:, :60].any()
        assert record.input_dims() == (900, 1200)

    def test_square_input_unchanged(self, rng):
        img = GrayImage(rng.uniform(0.0, 1.0, (480, 480)))
        out, record = resize_pad(img, 480)
        assert out.equals(img)
        assert record.pad_left == record.pad_top == record.pad_right == record.pad_bottom == 0

    def test_pad_record_maps_corners_back(self):
        img = GrayImage(np.full((301, 517), 0.5))
        _, record = resize_pad(img, 480)
        right = record.pad_left + record.content_width
        bottom = record.pad_top + record.content_height
        for (cx, cy), expected in [((record.pad_left, record.pad_top), (0, 0)),
                                   ((right, bottom), (517, 301))]:
            sx, sy = record.to_source(cx, cy)
            assert abs(sx - expected[0]) <= 0.5 and abs(sy - expected[1]) <= 0.5

    def test_invalid_target(self):
        with pytest.raises(ParameterError):
            resize_pad(GrayImage(np.zeros((4, 4))), 0)
