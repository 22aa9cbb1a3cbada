"""
Imaging Service - raster type and enhancement primitives
图像服务 - 灰度图像类型与增强

Intensities live in [0,1] as float64. Values are snapped to a 2^-24 grid on
construction so that 1 - v is exact and invert() is a true involution.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, TYPE_CHECKING

import cv2
import numpy as np
from PIL import Image

from ..exceptions import ParameterError, DimensionMismatchError, ImageFormatError

if TYPE_CHECKING:
    from .segmentation import Mask

logger = logging.getLogger(__name__)

PIXEL_GRID = float(2 ** 24)
CLAHE_BINS = 256


def _snap(values: np.ndarray) -> np.ndarray:
    return np.round(values * PIXEL_GRID) / PIXEL_GRID


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel raster, values in [0,1], optional ppi"""
    pixels: np.ndarray
    ppi: Optional[float] = None

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ImageFormatError(f"Expected a non-empty 2-D raster, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ImageFormatError("Image contains non-finite values")
        if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
            raise ImageFormatError(
                f"Pixel values must be within [0,1], got [{arr.min():.4g}, {arr.max():.4g}]"
            )
        if self.ppi is not None and not self.ppi > 0:
            raise ImageFormatError(f"ppi must be positive, got {self.ppi}")
        arr = _snap(np.clip(arr, 0.0, 1.0))
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray, ppi: Optional[float] = None) -> "GrayImage":
        return GrayImage(pixels, self.ppi if ppi is None else ppi)

    def equals(self, other: "GrayImage") -> bool:
        return self.shape == other.shape and bool(np.array_equal(self.pixels, other.pixels))

    @classmethod
    def from_uint8(cls, data: np.ndarray, ppi: Optional[float] = None) -> "GrayImage":
        return cls(np.asarray(data, dtype=np.float64) / 255.0, ppi)

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)


@dataclass(frozen=True)
class PadRecord:
    """
    Mapping between a source raster and the square canvas produced by
    resize_pad. Coordinates are continuous pixel-edge coordinates.
    """
    scale_factor: float
    pad_left: int
    pad_top: int
    pad_right: int
    pad_bottom: int
    source_width: int
    source_height: int
    target: int

    @property
    def content_width(self) -> int:
        return self.target - self.pad_left - self.pad_right

    @property
    def content_height(self) -> int:
        return self.target - self.pad_top - self.pad_bottom

    def input_dims(self) -> Tuple[int, int]:
        """(width, height) of the raster that produced this record"""
        return self.source_width, self.source_height

    def to_canvas(self, x: float, y: float) -> Tuple[float, float]:
        sx = self.content_width / self.source_width
        sy = self.content_height / self.source_height
        return self.pad_left + x * sx, self.pad_top + y * sy

    def to_source(self, x: float, y: float) -> Tuple[float, float]:
        sx = self.content_width / self.source_width
        sy = self.content_height / self.source_height
        return (x - self.pad_left) / sx, (y - self.pad_top) / sy

    def to_dict(self) -> dict:
        return {
            "scale_factor": self.scale_factor,
            "pad_left": self.pad_left,
            "pad_top": self.pad_top,
            "pad_right": self.pad_right,
            "pad_bottom": self.pad_bottom,
            "source_width": self.source_width,
            "source_height": self.source_height,
            "target": self.target,
        }


# ==================== File I/O ====================

def load_image(path: str | Path, ppi: Optional[float] = None) -> GrayImage:
    """
    Load an 8-bit PNG or P5 PGM. Colour input is reduced with the
    ITU-R 601 luma weights (0.299, 0.587, 0.114).
    """
    try:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I"):
                data = np.asarray(im, dtype=np.float64)
                return GrayImage(data / max(float(data.max()), 1.0), ppi)
            if im.mode != "L":
                im = im.convert("RGB").convert("L")
            data = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise ImageFormatError(f"Cannot read image {path}: {e}") from e
    return GrayImage.from_uint8(data, ppi)


def save_image(img: GrayImage, path: str | Path) -> Path:
    """Save as 8-bit; the format follows the file extension (.png / .pgm)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img.to_uint8()).save(path)
    return path


# ==================== CLAHE ====================

def _effective_tiles(img: GrayImage, tiles: Tuple[int, int]) -> Tuple[int, int]:
    rows, cols = int(tiles[0]), int(tiles[1])
    if rows < 1 or cols < 1:
        raise ParameterError(f"Tile grid must be at least 1x1, got {tiles}")
    return min(rows, img.height), min(cols, img.width)


def clahe(img: GrayImage, clip_limit: float = 2.0, tiles: Tuple[int, int] = (8, 8)) -> GrayImage:
    """
    Contrast-limited adaptive histogram equalization over a rows x cols grid.

    ``clip_limit`` is in units of the mean bin height of a tile: a tile of N
    pixels is clipped at clip_limit * N / 256. Intensities are quantized to
    256 levels. A constant image has nothing to equalize and is returned as is.
    """
    if not clip_limit > 0:
        raise ParameterError(f"clip_limit must be positive, got {clip_limit}")
    if img.pixels.min() == img.pixels.max():
        return img

    rows, cols = _effective_tiles(img, tiles)
    engine = cv2.createCLAHE(clipLimit=float(clip_limit), tileGridSize=(cols, rows))
    out = engine.apply(img.to_uint8())
    return img.with_pixels(out.astype(np.float64) / (CLAHE_BINS - 1))


# ==================== Point operations ====================

def invert(img: GrayImage) -> GrayImage:
    """Gray-level inversion, v -> 1 - v"""
    return img.with_pixels(1.0 - img.pixels)


def apply_mask(img: GrayImage, mask: "Mask") -> GrayImage:
    """Zero every pixel outside the mask"""
    bits = np.asarray(mask.bits)
    if bits.shape != img.shape:
        raise DimensionMismatchError(
            f"Mask {bits.shape[::-1]} does not match image {img.shape[::-1]} (w x h)"
        )
    return img.with_pixels(np.where(bits > 0, img.pixels, 0.0))


def _resample(pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    im = Image.fromarray(pixels.astype(np.float32))
    out = im.resize((width, height), Image.Resampling.BILINEAR)
    return np.clip(np.asarray(out, dtype=np.float64), 0.0, 1.0)


def resize_pad(img: GrayImage, target: int = 480, fill: float = 0.0) -> Tuple[GrayImage, PadRecord]:
    """
    Scale isotropically so the longer side equals ``target``, then centre
    on a target x target canvas filled with ``fill``.
    """
    if target < 1:
        raise ParameterError(f"target must be >= 1, got {target}")
    if img.width < 1 or img.height < 1:
        raise ImageFormatError("Cannot resize a zero-area image")

    scale = target / max(img.width, img.height)
    new_w = min(target, max(1, int(round(img.width * scale))))
    new_h = min(target, max(1, int(round(img.height * scale))))

    if (new_w, new_h) == (img.width, img.height):
        content = img.pixels
    else:
        content = _resample(img.pixels, new_w, new_h)

    pad_left = (target - new_w) // 2
    pad_top = (target - new_h) // 2
    canvas = np.full((target, target), float(fill))
    canvas[pad_top:pad_top + new_h, pad_left:pad_left + new_w] = content

    record = PadRecord(
        scale_factor=scale,
        pad_left=pad_left,
        pad_top=pad_top,
        pad_right=target - new_w - pad_left,
        pad_bottom=target - new_h - pad_top,
        source_width=img.width,
        source_height=img.height,
        target=target,
    )
    return img.with_pixels(canvas), record


def crop_to_bbox(img: GrayImage, bits: np.ndarray, margin: int = 4) -> Tuple[GrayImage, Tuple[int, int]]:
    """Crop to the bounding box of the non-zero mask bits; returns (crop, (x0, y0))"""
    ys, xs = np.nonzero(bits)
    if len(ys) == 0:
        return img, (0, 0)
    y0 = max(int(ys.min()) - margin, 0)
    y1 = min(int(ys.max()) + margin + 1, img.height)
    x0 = max(int(xs.min()) - margin, 0)
    x1 = min(int(xs.max()) + margin + 1, img.width)
    return img.with_pixels(img.pixels[y0:y1, x0:x1]), (x0, y0)
