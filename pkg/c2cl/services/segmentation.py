"""
Segmentation Service - distal phalange masks
分割服务 - 远节指骨掩膜

Classical substitute for a learned segmenter: smoothed Otsu threshold,
morphological closing, largest 4-connected component and a distal crop.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.filters import threshold_otsu

from ..exceptions import (
    ParameterError, DimensionMismatchError, SegmentationFailedError, ImageFormatError
)
from .imaging import GrayImage

logger = logging.getLogger(__name__)

BCE_EPSILON = 1e-7
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary raster; ``low_confidence`` marks implausible coverage"""
    bits: np.ndarray
    low_confidence: bool = False

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 2:
            raise ImageFormatError(f"Mask must be 2-D, got shape {arr.shape}")
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        elif not np.all((arr == 0) | (arr == 1)):
            raise ImageFormatError("Mask values must be strictly 0 or 1")
        arr = arr.astype(np.uint8, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "bits", arr)

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    @classmethod
    def full(cls, width: int, height: int) -> "Mask":
        return cls(np.ones((height, width), dtype=np.uint8))


@dataclass(frozen=True, eq=False)
class ProbMask:
    """Per-pixel foreground probabilities in [0,1]"""
    probs: np.ndarray

    def __post_init__(self):
        arr = np.array(self.probs, dtype=np.float64)
        if arr.ndim != 2:
            raise ImageFormatError(f"ProbMask must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
            raise ImageFormatError("Probabilities must be finite and within [0,1]")
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.probs.shape


# ==================== Mask I/O ====================

def load_mask(path: str | Path) -> Mask:
    """PNG/PGM mask; any value above 127 is foreground"""
    try:
        with Image.open(path) as im:
            data = np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise ImageFormatError(f"Cannot read mask {path}: {e}") from e
    return Mask((data > 127).astype(np.uint8))


def save_mask(mask: Mask, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask.bits * 255).astype(np.uint8)).save(path)
    return path


# ==================== Segmenter ====================

def _largest_component(foreground: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(foreground, structure=FOUR_CONNECTED)
    if count == 0:
        return np.zeros_like(foreground, dtype=bool)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def _distal_crop(component: np.ndarray, fraction: float, elongation_ratio: float) -> np.ndarray:
    """
    Keep the top ``fraction`` of an elongated component (whole finger in
    view). Compact components are taken to be the fingertip already.
    """
    rows = np.nonzero(component.any(axis=1))[0]
    if len(rows) == 0:
        return component
    top, bottom = int(rows[0]), int(rows[-1])
    height = bottom - top + 1
    widest = int(component.sum(axis=1).max())
    if widest == 0 or height / widest <= elongation_ratio:
        return component

    cut = top + int(np.ceil(fraction * height))
    cropped = component.copy()
    cropped[cut:, :] = False
    return _largest_component(cropped)


def segment_distal(
    img: GrayImage,
    smooth_sigma: float = 2.0,
    closing_size: int = 5,
    distal_fraction: float = 0.6,
    elongation_ratio: float = 1.6,
    min_area_frac: float = 0.01,
    max_area_frac: float = 0.95,
    work_size: int = 256,
) -> Mask:
    """
    Segment the bright fingertip from a darker background.

    Runs at ``work_size`` on the longer side and upsamples the mask back
    with nearest-neighbour, which keeps a 4-connected component connected.
    Raises SegmentationFailedError rather than returning an empty mask.
    """
    if not 0 < distal_fraction <= 1:
        raise ParameterError(f"distal_fraction must be in (0,1], got {distal_fraction}")

    pixels = img.pixels
    scale = min(1.0, work_size / max(img.width, img.height))
    if scale < 1.0:
        small_w = max(1, int(round(img.width * scale)))
        small_h = max(1, int(round(img.height * scale)))
        pixels = np.asarray(
            Image.fromarray(pixels.astype(np.float32)).resize((small_w, small_h), Image.Resampling.BILINEAR),
            dtype=np.float64,
        )

    smoothed = ndimage.gaussian_filter(pixels, sigma=smooth_sigma)
    lo, hi = float(smoothed.min()), float(smoothed.max())
    if hi - lo < 1e-3:
        raise SegmentationFailedError("segmentation failed: no separable foreground (uniform image)")

    normalized = (smoothed - lo) / (hi - lo)
    threshold = threshold_otsu(normalized)
    foreground = normalized > threshold

    pad = closing_size
    padded = np.pad(foreground, pad, mode="edge")
    structure = np.ones((closing_size, closing_size), dtype=bool)
    closed = ndimage.binary_closing(padded, structure=structure)[pad:-pad, pad:-pad]

    component = _largest_component(closed)
    if not component.any():
        raise SegmentationFailedError("segmentation failed: no foreground component")
    component = ndimage.binary_fill_holes(component)
    component = _distal_crop(component, distal_fraction, elongation_ratio)

    if scale < 1.0:
        component = np.asarray(
            Image.fromarray(component.astype(np.uint8) * 255).resize(
                (img.width, img.height), Image.Resampling.NEAREST
            )
        ) > 127

    coverage = float(component.mean())
    low_confidence = not (min_area_frac <= coverage <= max_area_frac)
    if low_confidence:
        logger.warning(f"Segmentation coverage {coverage:.3f} outside "
                       f"[{min_area_frac}, {max_area_frac}], flagged low-confidence")
    return Mask(component.astype(np.uint8), low_confidence=low_confidence)


# ==================== Loss and evaluation ====================

def _check_same(a_shape, b_shape):
    if tuple(a_shape) != tuple(b_shape):
        raise DimensionMismatchError(f"Shape mismatch: {a_shape} vs {b_shape}")


def seg_bce_loss(pred: ProbMask, gt: Mask, eps: float = BCE_EPSILON, reduction: str = "sum") -> float:
    """
    Pixel-wise binary cross-entropy:
        L = sum -[M log M^ + (1 - M) log(1 - M^)]
    with M^ clamped to [eps, 1 - eps]. ``reduction="mean"`` divides by H*W.
    """
    _check_same(pred.shape, gt.shape)
    p = np.clip(pred.probs, eps, 1.0 - eps)
    m = gt.bits.astype(np.float64)
    loss = -(m * np.log(p) + (1.0 - m) * np.log(1.0 - p))
    if reduction == "sum":
        return float(loss.sum())
    if reduction == "mean":
        return float(loss.mean())
    raise ParameterError(f"Unknown reduction: {reduction}")


def seg_bce_grad(pred: ProbMask, gt: Mask, eps: float = BCE_EPSILON) -> np.ndarray:
    """d(summed BCE)/d(pred); zero where the clamp is active"""
    _check_same(pred.shape, gt.shape)
    raw = pred.probs
    p = np.clip(raw, eps, 1.0 - eps)
    m = gt.bits.astype(np.float64)
    grad = -(m / p) + (1.0 - m) / (1.0 - p)
    return np.where((raw > eps) & (raw < 1.0 - eps), grad, 0.0)


def iou(a: Mask, b: Mask) -> float:
    """|a & b| / |a | b|; 1.0 when both masks are empty"""
    _check_same(a.shape, b.shape)
    aa = a.bits.astype(bool)
    bb = b.bits.astype(bool)
    union = int(np.logical_or(aa, bb).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(aa, bb).sum()) / union


def segmentation_params(cfg) -> dict:
    """Keyword arguments for segment_distal from a SegmentationConfig"""
    return {
        "smooth_sigma": cfg.smooth_sigma,
        "closing_size": cfg.closing_size,
        "distal_fraction": cfg.distal_fraction,
        "elongation_ratio": cfg.elongation_ratio,
        "min_area_frac": cfg.min_area_frac,
        "max_area_frac": cfg.max_area_frac,
        "work_size": cfg.work_size,
    }
