"""
Synthetic Prints - phase-model master prints and capture surrogates
合成指纹 - 相位模型主指纹及接触/非接触采集替身

A master print is a phase field: a curved base sweep plus point spirals
(each spiral is one phase dislocation, i.e. one minutia). The contact
rendering is dark ridges on white; the contactless surrogate is bright
ridges on a dark background after random scaling, rotation, TPS
deformation, contrast loss and noise.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from ..schemas import DatasetManifest, ManifestEntry
from .geometry import AffineParams, TPSField, WarpParams, warp_array
from .imaging import GrayImage, save_image
from .segmentation import Mask, save_mask

logger = logging.getLogger(__name__)

BACKGROUND_LEVEL = 0.05


# ==================== Elementary patterns ====================

def stripes(width: int, height: int, period: float, angle: float = 0.0, phase: float = 0.0) -> GrayImage:
    """Cosine stripes whose ridges run along ``angle`` (radians, image coordinates)"""
    x, y = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    across = -x * math.sin(angle) + y * math.cos(angle)
    return GrayImage(0.5 + 0.5 * np.cos(2.0 * math.pi * across / period + phase))


def stripes_with_ending(size: int = 160, period: float = 9.0, at: Optional[Tuple[float, float]] = None) -> GrayImage:
    """Horizontal stripes with a single phase dislocation at ``at``: one ridge stops there"""
    cx, cy = at if at is not None else (size / 2.0, size / 2.0)
    x, y = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64))
    psi = 2.0 * math.pi * y / period + np.arctan2(y - cy, x - cx)
    return GrayImage(0.5 + 0.5 * np.cos(psi))


def finger_blob(width: int = 320, height: int = 480, level: float = 0.8,
                background: float = 0.1, palm: bool = False, period: Optional[float] = 9.0,
                rng: Optional[np.random.Generator] = None) -> Tuple[GrayImage, Mask]:
    """
    Bright elliptical fingertip on a dark background, optionally with a
    long proximal extension. Returns the image and its distal ground truth.
    """
    x, y = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    cx = (width - 1) / 2.0
    ax = 0.35 * width
    if palm:
        ay = 0.22 * height
        cy = 0.25 * height
        tip = ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 <= 1.0
        shaft = (np.abs(x - cx) <= ax * 0.95) & (y >= cy) & (y <= 0.95 * height)
        body = tip | shaft
    else:
        ay = 0.42 * height
        cy = (height - 1) / 2.0
        tip = ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 <= 1.0
        body = tip

    pixels = np.full((height, width), background)
    texture = 0.0
    if period:
        texture = 0.08 * np.cos(2.0 * math.pi * y / period)
    pixels[body] = level + (texture[body] if period else 0.0)
    if rng is not None:
        pixels = pixels + rng.normal(0.0, 0.01, pixels.shape)
    return GrayImage(np.clip(pixels, 0.0, 1.0)), Mask(tip.astype(np.uint8))


# ==================== Master prints ====================

@dataclass(frozen=True, eq=False)
class MasterPrint:
    """Ridge strength R in [0,1] (1 on ridge centres) and the finger mask"""
    ridge: np.ndarray
    mask: np.ndarray
    period: float
    spirals: Tuple[Tuple[float, float, int], ...] = ()

    @property
    def size(self) -> int:
        return int(self.ridge.shape[0])


def master_print(rng: np.random.Generator, size: int = 480, period: float = 9.0,
                 spiral_range: Tuple[int, int] = (25, 40)) -> MasterPrint:
    x, y = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64))
    c = (size - 1) / 2.0
    a = rng.uniform(-0.35, 0.35)
    u = -(x - c) * math.sin(a) + (y - c) * math.cos(a)
    v = (x - c) * math.cos(a) + (y - c) * math.sin(a)

    # arch-like bending plus a slow random wobble
    kappa = rng.uniform(0.3, 0.8)
    wobble = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), sigma=size / 8.0, mode="wrap")
    wobble *= 2.5 * period / max(float(np.abs(wobble).max()), 1e-12)
    across = u + kappa * v ** 2 / size + wobble
    psi = 2.0 * math.pi * across / period

    semi_x = 150.0 * rng.uniform(0.92, 1.08)
    semi_y = 210.0 * rng.uniform(0.92, 1.08)
    inside = ((x - c) / semi_x) ** 2 + ((y - c) / semi_y) ** 2

    count = int(rng.integers(spiral_range[0], spiral_range[1] + 1))
    spirals = []
    while len(spirals) < count:
        px, py = c + rng.uniform(-0.8, 0.8) * semi_x, c + rng.uniform(-0.8, 0.8) * semi_y
        if ((px - c) / semi_x) ** 2 + ((py - c) / semi_y) ** 2 > 0.64:
            continue
        if any(math.hypot(px - qx, py - qy) < 2.5 * period for qx, qy, _ in spirals):
            continue
        spirals.append((px, py, int(rng.choice((-1, 1)))))
    for px, py, sign in spirals:
        psi = psi + sign * np.arctan2(y - py, x - px)

    ridge = 0.5 + 0.5 * np.cos(psi)
    return MasterPrint(ridge, inside <= 1.0, period, tuple(spirals))


def render_contact(master: MasterPrint, rng: Optional[np.random.Generator] = None,
                   noise: float = 0.0) -> GrayImage:
    """Dark ridges on a white platen background, 500 ppi"""
    pixels = 1.0 - master.mask * master.ridge
    if rng is not None and noise > 0:
        pixels = pixels + rng.normal(0.0, noise, pixels.shape)
    return GrayImage(np.clip(pixels, 0.0, 1.0), ppi=500.0)


@dataclass(frozen=True, eq=False)
class ContactlessCapture:
    image: GrayImage
    mask: Mask
    warp: WarpParams


def render_contactless(master: MasterPrint, rng: np.random.Generator, canvas: int = 640,
                       scale_range: Tuple[float, float] = (0.7, 1.4), max_rotation_deg: float = 10.0,
                       max_tps_px: float = 6.0, contrast_range: Tuple[float, float] = (0.3, 0.6),
                       noise: float = 0.02) -> ContactlessCapture:
    """
    Contactless surrogate: bright ridges on a dark background after random
    scale, rotation, TPS deformation, contrast reduction and noise.
    Returns the image, the ground-truth finger mask and the warp applied.
    """
    pad = (canvas - master.size) // 2
    if pad < 0:
        raise ValueError(f"canvas {canvas} smaller than the master print {master.size}")
    ridge = np.pad(master.ridge, pad)
    mask = np.pad(master.mask.astype(np.float64), pad)

    affine = AffineParams(
        rng.uniform(*scale_range),
        math.radians(rng.uniform(-max_rotation_deg, max_rotation_deg)),
        rng.uniform(-10.0, 10.0),
        rng.uniform(-10.0, 10.0),
    )
    n = 4
    field = TPSField.zero(canvas, canvas, n).with_displacements(rng.uniform(-max_tps_px, max_tps_px, (n, n, 2)))
    warped_ridge = warp_array(ridge, affine, field)
    warped_mask = warp_array(mask, affine, field) > 0.5

    contrast = rng.uniform(*contrast_range)
    gx = np.linspace(-1.0, 1.0, canvas)
    illumination = 0.6 + 0.08 * rng.uniform(-1.0, 1.0) * gx[None, :]
    finger = illumination + contrast * (warped_ridge - 0.5)
    pixels = np.where(warped_mask, finger, BACKGROUND_LEVEL)
    pixels = ndimage.gaussian_filter(pixels, sigma=0.7) + rng.normal(0.0, noise, pixels.shape)
    return ContactlessCapture(
        GrayImage(np.clip(pixels, 0.0, 1.0)),
        Mask(warped_mask.astype(np.uint8)),
        WarpParams(affine, field, (canvas, canvas)),
    )


# ==================== Dataset writer ====================

def write_synthetic_dataset(out_dir: str | Path, fingers: int = 10, seed: int = 0,
                            contact_impressions: int = 1, contactless_impressions: int = 1,
                            finger_positions: Sequence[str] = ("R-index",)) -> Path:
    """
    Write PNG captures, ground-truth masks of the contactless images and a
    JSONL manifest. Each subject gets one master print per finger position;
    file names carry the position when there is more than one. Returns the
    manifest path.
    """
    if not finger_positions:
        raise ValueError("finger_positions is empty")
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    entries: List[ManifestEntry] = []
    for f in range(fingers):
        subject = f"S{f:04d}"
        for position in finger_positions:
            stem = subject if len(finger_positions) == 1 else f"{subject}_{position}"
            master = master_print(rng)
            for k in range(contact_impressions):
                rel = Path("contact") / f"{stem}_{k}.png"
                save_image(render_contact(master, rng, noise=0.01 if k else 0.0), out / rel)
                entries.append(ManifestEntry(
                    subject_id=subject, finger_position=position, impression_index=k,
                    capture_kind="contact", image_path=rel.as_posix(), device="synthetic-contact",
                ))
            for k in range(contactless_impressions):
                capture = render_contactless(master, rng)
                rel = Path("contactless") / f"{stem}_{k}.png"
                mask_rel = Path("masks") / f"{stem}_{k}.png"
                save_image(capture.image, out / rel)
                save_mask(capture.mask, out / mask_rel)
                entries.append(ManifestEntry(
                    subject_id=subject, finger_position=position, impression_index=k,
                    capture_kind="contactless", image_path=rel.as_posix(), mask_path=mask_rel.as_posix(),
                    device="synthetic-contactless",
                ))
        if (f + 1) % 25 == 0:
            logger.info(f"Synthesized {f + 1}/{fingers} subjects")

    manifest_path = DatasetManifest(entries=entries).to_jsonl(out / "manifest.jsonl")
    logger.info(f"Wrote {len(entries)} captures and {manifest_path}")
    return manifest_path
