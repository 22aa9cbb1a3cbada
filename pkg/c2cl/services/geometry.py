"""
Geometry Service - scaling, TPS deformation and differentiable sampling
几何服务 - 缩放、薄板样条形变与可微采样

Conventions
    * Pixel (row i, col j) sits at continuous coordinate (x=j, y=i).
    * AffineParams are forward parameters about the canvas centre: content
      is scaled by s, rotated by theta and moved by (tx, ty).
    * A TPS displacement d(p) is an inverse-mapped flow: output pixel p
      reads from p + d(p). Displacements are absolute pixels.
    * The composed warp is affine first, then TPS:
          out(p) = I(A^-1(p + d(p)))
      sampled bilinearly with zero fill outside the source.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from ..exceptions import (
    ParameterError, DimensionMismatchError, NoRidgeStructureError, SingularSystemError
)
from .imaging import GrayImage

logger = logging.getLogger(__name__)

PERIOD_FFT_SIZE = 128
TEXTURE_STD_MIN = 0.02
CONCENTRATION_MIN = 0.3


def normalize_angle(theta: float) -> float:
    """Map to (-pi, pi]"""
    r = math.remainder(float(theta), 2.0 * math.pi)
    if r <= -math.pi:
        r = math.pi
    return r


# ==================== Parameter types ====================

@dataclass(frozen=True)
class AffineParams:
    """Scale / rotation / translation of A_s"""
    s: float = 1.0
    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        values = (self.s, self.theta, self.tx, self.ty)
        if not all(math.isfinite(v) for v in values):
            raise ParameterError(f"Affine parameters must be finite, got {values}")
        if not self.s > 0:
            raise ParameterError(f"Scale must be positive, got {self.s}")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(1.0, 0.0, 0.0, 0.0)

    def is_identity(self) -> bool:
        return self.s == 1.0 and self.theta == 0.0 and self.tx == 0.0 and self.ty == 0.0


def control_lattice(width: int, height: int, n: int = 4, inset: float = 0.1) -> np.ndarray:
    """n x n anchors (x, y) on a uniform lattice inset from the borders"""
    if n < 2:
        raise ParameterError(f"TPS grid side must be >= 2, got {n}")
    xs = np.linspace(inset * (width - 1), (1 - inset) * (width - 1), n)
    ys = np.linspace(inset * (height - 1), (1 - inset) * (height - 1), n)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


@dataclass(frozen=True, eq=False)
class TPSField:
    """n x n control anchors with (dx, dy) pixel displacements"""
    n: int
    displacements: np.ndarray
    control_points: np.ndarray
    regularization: float = 0.0

    def __post_init__(self):
        if self.n < 2:
            raise ParameterError(f"TPS grid side must be >= 2, got {self.n}")
        disp = np.array(self.displacements, dtype=np.float64)
        anchors = np.array(self.control_points, dtype=np.float64)
        expected = (self.n, self.n, 2)
        if disp.shape != expected or anchors.shape != expected:
            raise DimensionMismatchError(
                f"Expected displacement and anchor grids of shape {expected}, "
                f"got {disp.shape} and {anchors.shape}"
            )
        if not np.all(np.isfinite(disp)) or not np.all(np.isfinite(anchors)):
            raise ParameterError("TPS displacements and anchors must be finite")
        if self.regularization < 0:
            raise ParameterError("TPS regularization must be non-negative")
        disp.setflags(write=False)
        anchors.setflags(write=False)
        object.__setattr__(self, "displacements", disp)
        object.__setattr__(self, "control_points", anchors)

    @classmethod
    def zero(cls, width: int, height: int, n: int = 4, inset: float = 0.1,
             regularization: float = 0.0) -> "TPSField":
        anchors = control_lattice(width, height, n, inset)
        return cls(n, np.zeros((n, n, 2)), anchors, regularization)

    def with_displacements(self, displacements: np.ndarray) -> "TPSField":
        return TPSField(self.n, displacements, self.control_points, self.regularization)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.displacements)


@dataclass(frozen=True, eq=False)
class FlowGrid:
    """Per-output-pixel source coordinates"""
    x_src: np.ndarray
    y_src: np.ndarray

    @property
    def width(self) -> int:
        return int(self.x_src.shape[1])

    @property
    def height(self) -> int:
        return int(self.x_src.shape[0])


@dataclass(frozen=True)
class WarpParams:
    """Everything needed to replay a warp: affine part, TPS part and canvas"""
    affine: AffineParams
    field: TPSField
    canvas: Tuple[int, int]
    inset: float = 0.1

    @classmethod
    def identity(cls, width: int, height: int, n: int = 4, inset: float = 0.1) -> "WarpParams":
        return cls(AffineParams.identity(), TPSField.zero(width, height, n, inset), (width, height), inset)

    def to_dict(self) -> Dict:
        n = self.field.n
        return {
            "s": self.affine.s,
            "theta": self.affine.theta,
            "tx": self.affine.tx,
            "ty": self.affine.ty,
            "n": n,
            "displacements": self.field.displacements.reshape(n * n, 2).tolist(),
            "control_points": self.field.control_points.reshape(n * n, 2).tolist(),
            "units": "pixels",
            "canvas": list(self.canvas),
            "inset": self.inset,
            "regularization": self.field.regularization,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: Dict) -> "WarpParams":
        n = int(data["n"])
        canvas = tuple(int(v) for v in data.get("canvas", (480, 480)))
        inset = float(data.get("inset", 0.1))
        disp = np.asarray(data["displacements"], dtype=np.float64).reshape(n, n, 2)
        if "control_points" in data:
            anchors = np.asarray(data["control_points"], dtype=np.float64).reshape(n, n, 2)
        else:
            anchors = control_lattice(canvas[0], canvas[1], n, inset)
        affine = AffineParams(float(data["s"]), float(data["theta"]), float(data["tx"]), float(data["ty"]))
        field = TPSField(n, disp, anchors, float(data.get("regularization", 0.0)))
        return cls(affine, field, canvas, inset)

    @classmethod
    def from_json(cls, text: str) -> "WarpParams":
        return cls.from_dict(json.loads(text))


# ==================== Affine ====================

def affine_matrix(p: AffineParams, center: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """
    2x3 matrix [[s cos, -s sin, tx], [s sin, s cos, ty]] about the origin.

    The warp rotates and scales about the canvas centre c, i.e.
    dst - c = A (src - c) + t. Pass ``center`` to get that map in pixel
    coordinates: the translation column becomes c - A c + t.
    """
    c, s_ = math.cos(p.theta), math.sin(p.theta)
    m = np.array([
        [p.s * c, -p.s * s_, p.tx],
        [p.s * s_, p.s * c, p.ty],
    ])
    if center is not None:
        ctr = np.asarray(center, dtype=np.float64)
        m[:, 2] += ctr - m[:, :2] @ ctr
    return m


def canvas_center(width: int, height: int) -> Tuple[float, float]:
    return (width - 1) / 2.0, (height - 1) / 2.0


# ==================== Thin-plate spline ====================

def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log r^2, with U(0) = 0"""
    safe = np.where(r2 > 0, r2, 1.0)
    return np.where(r2 > 0, r2 * np.log(safe), 0.0)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _normalizer(anchors: np.ndarray) -> Tuple[np.ndarray, float]:
    center = anchors.mean(axis=0)
    spread = float(max(np.ptp(anchors[:, 0]), np.ptp(anchors[:, 1]), 1.0))
    return center, spread


def _solve_coefficient_map(anchors: np.ndarray, regularization: float) -> np.ndarray:
    """
    (m+3) x m matrix mapping control displacements to TPS coefficients
    [w; a] in normalized coordinates.
    """
    m = len(anchors)
    d2 = _sqdist(anchors, anchors)
    off_diag = d2[~np.eye(m, dtype=bool)]
    if off_diag.size and off_diag.min() < 1e-18:
        raise SingularSystemError("TPS control points coincide")

    center, spread = _normalizer(anchors)
    a = (anchors - center) / spread
    K = _tps_kernel(_sqdist(a, a)) + regularization * np.eye(m)
    P = np.hstack([np.ones((m, 1)), a])
    system = np.zeros((m + 3, m + 3))
    system[:m, :m] = K
    system[:m, m:] = P
    system[m:, :m] = P.T
    rhs = np.vstack([np.eye(m), np.zeros((3, m))])
    try:
        coef = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(f"TPS system is singular: {e}") from e
    if not np.all(np.isfinite(coef)):
        raise SingularSystemError("TPS system is singular (non-finite solution)")
    return coef


def _design_matrix(anchors: np.ndarray, points: np.ndarray) -> np.ndarray:
    center, spread = _normalizer(anchors)
    a = (anchors - center) / spread
    u = (points - center) / spread
    return np.hstack([_tps_kernel(_sqdist(u, a)), np.ones((len(u), 1)), u])


def tps_basis(field: TPSField, points: np.ndarray) -> np.ndarray:
    """
    B with shape (len(points), n^2): the TPS displacement at each point is
    B @ displacements.reshape(n^2, 2). The map is linear in displacements.
    """
    anchors = field.control_points.reshape(-1, 2)
    coef = _solve_coefficient_map(anchors, field.regularization)
    return _design_matrix(anchors, np.asarray(points, dtype=np.float64)) @ coef


@lru_cache(maxsize=4)
def _grid_basis(anchor_bytes: bytes, regularization: float, width: int, height: int) -> np.ndarray:
    anchors = np.frombuffer(anchor_bytes, dtype=np.float64).reshape(-1, 2)
    coef = _solve_coefficient_map(anchors, regularization)
    gx, gy = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    basis = _design_matrix(anchors, points) @ coef
    basis.setflags(write=False)
    return basis


def grid_basis(field: TPSField, width: int, height: int) -> np.ndarray:
    """tps_basis evaluated on every pixel of a width x height grid (cached)"""
    anchors = np.ascontiguousarray(field.control_points.reshape(-1, 2))
    return _grid_basis(anchors.tobytes(), float(field.regularization), int(width), int(height))


def tps_map_points(field: TPSField, points: np.ndarray) -> np.ndarray:
    """Source coordinates p + d(p) for arbitrary (x, y) points"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    disp = tps_basis(field, points) @ field.displacements.reshape(-1, 2)
    return points + disp


def tps_flow(field: TPSField, out_w: int, out_h: int) -> FlowGrid:
    """Dense TPS flow: every output pixel p maps to p + d(p)"""
    if field.n < 2:
        raise ParameterError(f"TPS grid side must be >= 2, got {field.n}")
    gx, gy = np.meshgrid(np.arange(out_w, dtype=np.float64), np.arange(out_h, dtype=np.float64))
    if field.is_zero:
        # still validate the system
        _solve_coefficient_map(field.control_points.reshape(-1, 2), field.regularization)
        return FlowGrid(gx, gy)
    disp = grid_basis(field, out_w, out_h) @ field.displacements.reshape(-1, 2)
    return FlowGrid(gx + disp[:, 0].reshape(out_h, out_w), gy + disp[:, 1].reshape(out_h, out_w))


def tps_bending_energy(field: TPSField) -> float:
    """Non-affine energy trace(W^T K W) of the fitted spline"""
    anchors = field.control_points.reshape(-1, 2)
    m = len(anchors)
    coef = _solve_coefficient_map(anchors, field.regularization)
    w = coef[:m] @ field.displacements.reshape(-1, 2)
    center, spread = _normalizer(anchors)
    a = (anchors - center) / spread
    K = _tps_kernel(_sqdist(a, a))
    return float(abs(np.trace(w.T @ K @ w)))


# ==================== Sampling ====================

def _gather(pixels: np.ndarray, iy: np.ndarray, ix: np.ndarray) -> np.ndarray:
    h, w = pixels.shape
    valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.zeros(ix.shape, dtype=np.float64)
    out[valid] = pixels[iy[valid], ix[valid]]
    return out


def _bilinear(pixels: np.ndarray, sx: np.ndarray, sy: np.ndarray, with_grad: bool = False):
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    ix = x0.astype(np.intp)
    iy = y0.astype(np.intp)
    v00 = _gather(pixels, iy, ix)
    v01 = _gather(pixels, iy, ix + 1)
    v10 = _gather(pixels, iy + 1, ix)
    v11 = _gather(pixels, iy + 1, ix + 1)
    value = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
    if not with_grad:
        return value
    d_dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    d_dy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    return value, d_dx, d_dy


def _source_coords(p: AffineParams, field: TPSField, width: int, height: int):
    flow = tps_flow(field, width, height)
    qx, qy = flow.x_src, flow.y_src
    cx, cy = canvas_center(width, height)
    cos_t, sin_t = math.cos(p.theta), math.sin(p.theta)
    vx = qx - cx - p.tx
    vy = qy - cy - p.ty
    sx = cx + (cos_t * vx + sin_t * vy) / p.s
    sy = cy + (-sin_t * vx + cos_t * vy) / p.s
    return sx, sy, vx, vy


def warp_flow(p: AffineParams, field: TPSField, width: int, height: int) -> FlowGrid:
    """Composed source coordinates of the affine-then-TPS warp"""
    sx, sy, _, _ = _source_coords(p, field, width, height)
    return FlowGrid(sx, sy)


def _as_pixels(img) -> np.ndarray:
    if isinstance(img, GrayImage):
        return img.pixels
    return np.asarray(img, dtype=np.float64)


def _check_displacement_bound(field: TPSField, width: int, height: int):
    bound = max(width, height)
    if np.abs(field.displacements).max(initial=0.0) > bound:
        raise ParameterError(f"TPS displacement exceeds the image side ({bound} px)")


def warp_array(pixels: np.ndarray, p: AffineParams, field: TPSField) -> np.ndarray:
    """Raw warp on a float raster (no clipping or snapping)"""
    pixels = np.asarray(pixels, dtype=np.float64)
    h, w = pixels.shape
    _check_displacement_bound(field, w, h)
    sx, sy, _, _ = _source_coords(p, field, w, h)
    return _bilinear(pixels, sx, sy)


def warp_image(img: GrayImage, p: AffineParams, field: TPSField) -> GrayImage:
    """I^w = T_d(T_s(I, A_s), Theta), same dimensions as the input"""
    return img.with_pixels(np.clip(warp_array(img.pixels, p, field), 0.0, 1.0))


@dataclass(frozen=True, eq=False)
class WarpGradients:
    """dL/d(parameter) for every warp parameter"""
    s: float
    theta: float
    tx: float
    ty: float
    displacements: np.ndarray = dc_field(default_factory=lambda: np.zeros((0, 0, 2)))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.s, self.theta, self.tx, self.ty], self.displacements.ravel()])


def warp_param_gradients(img, p: AffineParams, field: TPSField, upstream: np.ndarray) -> WarpGradients:
    """
    Analytic gradients of sum(upstream * warp(img)) with respect to
    (s, theta, tx, ty) and every TPS displacement, by the chain rule through
    bilinear sampling, the inverse affine map and the TPS basis.
    """
    pixels = _as_pixels(img)
    h, w = pixels.shape
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != pixels.shape:
        raise DimensionMismatchError(f"Upstream {upstream.shape} does not match image {pixels.shape}")

    sx, sy, vx, vy = _source_coords(p, field, w, h)
    _, d_dx, d_dy = _bilinear(pixels, sx, sy, with_grad=True)
    gx = upstream * d_dx
    gy = upstream * d_dy

    cos_t, sin_t = math.cos(p.theta), math.sin(p.theta)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    inv_s = 1.0 / p.s

    grad_s = float(np.sum(gx * (-(sx - cx) * inv_s) + gy * (-(sy - cy) * inv_s)))
    grad_theta = float(np.sum(
        gx * ((-sin_t * vx + cos_t * vy) * inv_s) + gy * ((-cos_t * vx - sin_t * vy) * inv_s)
    ))
    grad_tx = float(np.sum(gx * (-cos_t * inv_s) + gy * (sin_t * inv_s)))
    grad_ty = float(np.sum(gx * (-sin_t * inv_s) + gy * (-cos_t * inv_s)))

    hx = (cos_t * gx - sin_t * gy) * inv_s
    hy = (sin_t * gx + cos_t * gy) * inv_s
    basis = grid_basis(field, w, h)
    grad_d = np.stack([basis.T @ hx.ravel(), basis.T @ hy.ravel()], axis=1)

    return WarpGradients(grad_s, grad_theta, grad_tx, grad_ty, grad_d.reshape(field.n, field.n, 2))


# ==================== Ridge period ====================

def _hann2d(h: int, w: int) -> np.ndarray:
    return np.outer(np.hanning(h), np.hanning(w))


def _window_spectra(windows: np.ndarray) -> np.ndarray:
    size = PERIOD_FFT_SIZE
    spectra = np.fft.fft2(windows, s=(size, size), axes=(-2, -1))
    return np.abs(spectra) ** 2


def _analyze_windows(windows: np.ndarray, period_min: float, period_max: float) -> np.ndarray:
    """Dominant period per window, NaN where no concentrated spectral peak"""
    size = PERIOD_FFT_SIZE
    win = windows.shape[-1]
    freqs = np.fft.fftfreq(size)
    fy, fx = np.meshgrid(freqs, freqs, indexing="ij")
    radius = np.hypot(fx, fy)
    band = (radius >= 1.0 / period_max) & (radius <= 1.0 / period_min)
    lobe = 2.5 / win

    periods = np.full(len(windows), np.nan)
    chunk = 32
    for start in range(0, len(windows), chunk):
        power = _window_spectra(windows[start:start + chunk])
        banded = np.where(band, power, 0.0)
        flat = banded.reshape(len(banded), -1)
        peaks = np.argmax(flat, axis=1)
        ky, kx = np.unravel_index(peaks, (size, size))

        def _refine(center, minus, plus):
            lc, lm, lp = np.log(center + 1e-30), np.log(minus + 1e-30), np.log(plus + 1e-30)
            denom = lm - 2 * lc + lp
            return np.where(np.abs(denom) > 1e-12, 0.5 * (lm - lp) / denom, 0.0).clip(-0.5, 0.5)

        idx = np.arange(len(banded))
        center = power[idx, ky, kx]
        dx = _refine(center, power[idx, ky, (kx - 1) % size], power[idx, ky, (kx + 1) % size])
        dy = _refine(center, power[idx, (ky - 1) % size, kx], power[idx, (ky + 1) % size, kx])
        pfx = freqs[kx] + dx / size
        pfy = freqs[ky] + dy / size
        f = np.hypot(pfx, pfy)

        total = flat.sum(axis=1)
        for b in range(len(banded)):
            if total[b] <= 0 or f[b] <= 0:
                continue
            near = (np.hypot(fx - pfx[b], fy - pfy[b]) <= lobe) | (np.hypot(fx + pfx[b], fy + pfy[b]) <= lobe)
            concentration = banded[b][near].sum() / total[b]
            period = 1.0 / f[b]
            if concentration >= CONCENTRATION_MIN and period_min <= period <= period_max:
                periods[start + b] = period
    return periods


def ridge_period_map(img, block: int = 32, period_min: float = 3.0,
                     period_max: float = 25.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-block dominant ridge period.

    Blocks tile the image with stride ``block``; each is analysed through a
    2*block Hann window centred on it. Returns (periods, textured) grids of
    shape (H // block, W // block); periods are NaN where the block has no
    oriented periodic texture, ``textured`` marks blocks with enough signal
    to count towards the valid fraction.
    """
    if block < 4:
        raise ParameterError(f"block must be >= 4, got {block}")
    pixels = _as_pixels(img)
    h, w = pixels.shape
    rows, cols = h // block, w // block
    if rows < 1 or cols < 1:
        raise ParameterError(f"Image {w}x{h} is smaller than one {block}px block")

    win = 2 * block
    padded = np.pad(pixels, block // 2, mode="constant")
    taper = _hann2d(win, win)
    windows = np.zeros((rows * cols, win, win))
    textured = np.zeros(rows * cols, dtype=bool)
    for i in range(rows):
        for j in range(cols):
            cy = i * block + block // 2 + block // 2
            cx = j * block + block // 2 + block // 2
            patch = padded[max(cy - block, 0):cy + block, max(cx - block, 0):cx + block]
            full = np.zeros((win, win))
            full[:patch.shape[0], :patch.shape[1]] = patch
            core = pixels[i * block:(i + 1) * block, j * block:(j + 1) * block]
            content = float(np.mean(core != 0))
            k = i * cols + j
            textured[k] = content >= 0.5 and float(core.std()) > TEXTURE_STD_MIN
            windows[k] = (full - full.mean()) * taper

    periods = np.full(rows * cols, np.nan)
    if textured.any():
        periods[textured] = _analyze_windows(windows[textured], period_min, period_max)
    return periods.reshape(rows, cols), textured.reshape(rows, cols)


def estimate_ridge_period(img, block: int = 32, period_min: float = 3.0,
                          period_max: float = 25.0, min_valid_fraction: float = 0.25) -> float:
    """
    Median of per-block spectral periods (pixels per ridge cycle).
    Raises NoRidgeStructureError when fewer than ``min_valid_fraction`` of
    the textured blocks carry a periodic signal.
    """
    periods, textured = ridge_period_map(img, block, period_min, period_max)
    n_textured = int(textured.sum())
    valid = periods[np.isfinite(periods)]
    if n_textured == 0 or len(valid) < max(1, min_valid_fraction * n_textured):
        raise NoRidgeStructureError(
            f"no ridge structure: {len(valid)} periodic blocks out of {n_textured} textured"
        )
    period = float(np.median(valid))
    return float(np.clip(period, period_min, period_max))


def scale_to_500ppi(img: GrayImage, target_period: float = 9.0, block: int = 32,
                    period_min: float = 3.0, period_max: float = 25.0,
                    min_valid_fraction: float = 0.25) -> Tuple[GrayImage, AffineParams]:
    """
    Resample by s = target_period / estimated_period so ridges are spaced as
    on a 500 ppi contact impression. Output dimensions scale with s.
    """
    period = estimate_ridge_period(img, block, period_min, period_max, min_valid_fraction)
    s = target_period / period
    params = AffineParams(s, 0.0, 0.0, 0.0)

    pixels = img.pixels
    if s < 1.0:
        pixels = ndimage.gaussian_filter(pixels, sigma=0.5 * math.sqrt(1.0 / s ** 2 - 1.0))
    new_w = max(1, int(round(img.width * s)))
    new_h = max(1, int(round(img.height * s)))
    gx, gy = np.meshgrid(np.arange(new_w, dtype=np.float64), np.arange(new_h, dtype=np.float64))
    sx = (gx + 0.5) * (img.width / new_w) - 0.5
    sy = (gy + 0.5) * (img.height / new_h) - 0.5
    out = _bilinear(pixels, sx, sy)
    logger.debug(f"Ridge period {period:.2f}px -> scale {s:.4f} ({img.width}x{img.height} -> {new_w}x{new_h})")
    return GrayImage(np.clip(out, 0.0, 1.0), ppi=500.0), params


def canvas_scale_params(img, target_period: float = 9.0, **period_kwargs) -> Tuple[AffineParams, float]:
    """Scale about the canvas centre (dimensions kept), as the warp stage applies it"""
    period = estimate_ridge_period(img, **period_kwargs)
    return AffineParams(target_period / period, 0.0, 0.0, 0.0), period


def estimate_tps_field(img, n: int = 4, inset: float = 0.1, block: int = 32,
                       period_min: float = 3.0, period_max: float = 25.0,
                       deadband: float = 0.08, max_ratio_dev: float = 0.25,
                       max_disp_frac: float = 0.05) -> TPSField:
    """
    Classical deformation estimate from the local ridge-period map.

    Ridges compressed towards the finger sides (local period below the
    global median) are stretched back by integrating the local period ratio
    horizontally from the canvas centre. Ratios within ``deadband`` of 1
    are ignored.
    """
    pixels = _as_pixels(img)
    h, w = pixels.shape
    field = TPSField.zero(w, h, n, inset)
    periods, _ = ridge_period_map(pixels, block, period_min, period_max)
    valid = periods[np.isfinite(periods)]
    if len(valid) == 0:
        return field
    global_period = float(np.median(valid))

    anchors = field.control_points
    ratios = np.ones((n, n))
    rows, cols = periods.shape
    for i in range(n):
        for j in range(n):
            bx = int(anchors[i, j, 0] // block)
            by = int(anchors[i, j, 1] // block)
            patch = periods[max(by - 1, 0):min(by + 2, rows), max(bx - 1, 0):min(bx + 2, cols)]
            local = patch[np.isfinite(patch)]
            if len(local) == 0:
                continue
            ratio = float(np.median(local)) / global_period
            if abs(ratio - 1.0) < deadband:
                continue
            ratios[i, j] = float(np.clip(ratio, 1.0 - max_ratio_dev, 1.0 + max_ratio_dev))

    cx = (w - 1) / 2.0
    max_disp = max_disp_frac * max(w, h)
    disp = np.zeros((n, n, 2))
    for i in range(n):
        xs = anchors[i, :, 0]
        # ratio at the centre: mean of the two anchors that straddle it
        right = int(np.searchsorted(xs, cx))
        left = max(right - 1, 0)
        right = min(right, n - 1)
        center_ratio = 0.5 * (ratios[i, left] + ratios[i, right])
        knots_x = np.concatenate([[cx], xs])
        knots_r = np.concatenate([[center_ratio], ratios[i]])
        order = np.argsort(knots_x)
        kx, kr = knots_x[order], knots_r[order]
        c_idx = int(np.nonzero(order == 0)[0][0])
        for j in range(n):
            target_idx = int(np.nonzero(order == j + 1)[0][0])
            lo, hi = sorted((c_idx, target_idx))
            seg_x = kx[lo:hi + 1]
            seg_r = kr[lo:hi + 1] - 1.0
            integral = float(np.trapezoid(seg_r, seg_x)) if hasattr(np, "trapezoid") else float(np.trapz(seg_r, seg_x))
            if target_idx < c_idx:
                integral = -integral
            disp[i, j, 0] = float(np.clip(integral, -max_disp, max_disp))
    return field.with_displacements(disp)


# ==================== STN output layout ====================

def stn_param_count(n: int) -> int:
    """2 n^2 + 4 outputs: (s, theta, tx, ty) then (dx, dy) per anchor, row-major"""
    return 2 * n * n + 4


def stn_params_from_vector(vector: np.ndarray, width: int, height: int, n: int = 4,
                           inset: float = 0.1) -> Tuple[AffineParams, TPSField]:
    vector = np.asarray(vector, dtype=np.float64).ravel()
    if vector.size != stn_param_count(n):
        raise DimensionMismatchError(f"Expected {stn_param_count(n)} values for n={n}, got {vector.size}")
    affine = AffineParams(*vector[:4])
    field = TPSField.zero(width, height, n, inset).with_displacements(vector[4:].reshape(n, n, 2))
    return affine, field


def stn_params_to_vector(affine: AffineParams, field: TPSField) -> np.ndarray:
    return np.concatenate([[affine.s, affine.theta, affine.tx, affine.ty], field.displacements.ravel()])


def load_warp_params(path) -> WarpParams:
    with open(path, "r", encoding="utf-8") as f:
        return WarpParams.from_json(f.read())
