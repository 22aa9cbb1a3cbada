"""
Minutiae Service - extraction, matching and correspondence
细节点服务 - 提取、匹配与对应关系评估

Extraction runs orientation -> ridge period -> Gabor -> binarize -> thin ->
crossing number -> spurious filtering. Matching pairs k-NN local
descriptors, fits a similarity transform to the best candidate pairs by
RANSAC and scores paired^2 / (|a| |b|).
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, signal
from scipy.optimize import linear_sum_assignment
from skimage.filters import gabor_kernel as sk_gabor_kernel
from skimage.measure import ransac
from skimage.morphology import skeletonize
from skimage.transform import SimilarityTransform as SkSimilarityTransform

from ..exceptions import ParameterError, NoRidgeStructureError
from .geometry import estimate_ridge_period
from .imaging import GrayImage

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
KINDS = ("ending", "bifurcation")
GABOR_ORIENTATIONS = 16
MAP_CELL = 8
MAP_CHANNELS = 6
UNMATCHED_COST = 1e6

# circular order around a pixel, as (dy, dx)
NEIGHBORS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _wrap(theta: float) -> float:
    """Map to [0, 2pi)"""
    t = math.fmod(float(theta), TWO_PI)
    if t < 0:
        t += TWO_PI
    return 0.0 if t >= TWO_PI else t


def angle_difference(a, b):
    """Absolute circular difference in [0, pi]"""
    d = np.abs(np.mod(np.asarray(a) - np.asarray(b) + math.pi, TWO_PI) - math.pi)
    return d if np.ndim(d) else float(d)


# ==================== Types ====================

@dataclass(frozen=True)
class Minutia:
    """Ridge ending or bifurcation; theta is the ridge direction in [0, 2pi)"""
    x: float
    y: float
    theta: float
    kind: str = "ending"
    quality: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"Unknown minutia kind: {self.kind}")
        if not all(math.isfinite(v) for v in (self.x, self.y, self.theta, self.quality)):
            raise ParameterError("Minutia fields must be finite")
        if not 0.0 <= self.quality <= 1.0:
            raise ParameterError(f"quality must be in [0,1], got {self.quality}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", _wrap(self.theta))
        object.__setattr__(self, "quality", float(self.quality))

    def key(self) -> Tuple:
        return (round(self.x, 6), round(self.y, 6), round(self.theta, 9), self.kind, round(self.quality, 9))


@dataclass(frozen=True)
class MinutiaeSet:
    """Unordered minutiae of one impression plus the (width, height) they live in"""
    minutiae: Tuple[Minutia, ...] = ()
    source_dims: Tuple[int, int] = (480, 480)
    flags: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "minutiae", tuple(self.minutiae))
        object.__setattr__(self, "flags", tuple(self.flags))
        w, h = self.source_dims
        for m in self.minutiae:
            if not (0.0 <= m.x <= w and 0.0 <= m.y <= h):
                raise ParameterError(f"Minutia ({m.x:.1f}, {m.y:.1f}) outside {w}x{h}")

    def __len__(self) -> int:
        return len(self.minutiae)

    def __iter__(self) -> Iterator[Minutia]:
        return iter(self.minutiae)

    def positions(self) -> np.ndarray:
        return np.array([[m.x, m.y] for m in self.minutiae], dtype=np.float64).reshape(-1, 2)

    def angles(self) -> np.ndarray:
        return np.array([m.theta for m in self.minutiae], dtype=np.float64)

    def canonical_key(self) -> Tuple:
        return tuple(sorted(m.key() for m in self.minutiae))

    # ---------- serialization ----------

    def to_text(self) -> str:
        """One line per minutia: ``x y theta_deg kind quality``"""
        w, h = self.source_dims
        lines = [f"# dims {w} {h}"]
        for m in self.minutiae:
            lines.append(f"{m.x:.3f} {m.y:.3f} {math.degrees(m.theta):.4f} {m.kind} {m.quality:.4f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source_dims: Optional[Tuple[int, int]] = None) -> "MinutiaeSet":
        dims = source_dims
        items = []
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 3 and parts[0] == "dims" and dims is None:
                    dims = (int(parts[1]), int(parts[2]))
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ParameterError(f"Line {line_no}: expected 'x y theta_deg kind quality'")
            x, y, deg, kind, quality = parts
            items.append(Minutia(float(x), float(y), math.radians(float(deg)), kind, float(quality)))
        return cls(tuple(items), dims or (480, 480))

    def to_dict(self) -> Dict:
        return {
            "source_dims": list(self.source_dims),
            "flags": list(self.flags),
            "minutiae": [
                {"x": m.x, "y": m.y, "theta": m.theta, "kind": m.kind, "quality": m.quality}
                for m in self.minutiae
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "MinutiaeSet":
        items = tuple(
            Minutia(d["x"], d["y"], d["theta"], d.get("kind", "ending"), d.get("quality", 1.0))
            for d in data.get("minutiae", [])
        )
        return cls(items, tuple(data.get("source_dims", (480, 480))), tuple(data.get("flags", ())))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True, eq=False)
class OrientationField:
    """Per-block ridge angle in [0, pi) and coherence in [0, 1]"""
    block: int
    angles: np.ndarray
    coherence: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.angles.shape

    def pixel_angles(self, height: int, width: int) -> np.ndarray:
        """Block angles expanded to a per-pixel raster (edge blocks extended)"""
        rows = np.minimum(np.arange(height) // self.block, self.angles.shape[0] - 1)
        cols = np.minimum(np.arange(width) // self.block, self.angles.shape[1] - 1)
        return self.angles[np.ix_(rows, cols)]


@dataclass(frozen=True, eq=False)
class MinutiaeMap:
    """(ceil(h/8), ceil(w/8), 6) splat tensor"""
    values: np.ndarray

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def total(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True)
class SimilarityTransform:
    """p' = scale * R(rotation) p + (tx, ty)"""
    scale: float = 1.0
    rotation: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        x = self.scale * (c * points[:, 0] - s * points[:, 1]) + self.tx
        y = self.scale * (s * points[:, 0] + c * points[:, 1]) + self.ty
        return np.stack([x, y], axis=1)

    def apply_angles(self, angles: np.ndarray) -> np.ndarray:
        return np.mod(np.asarray(angles, dtype=np.float64) + self.rotation, TWO_PI)


@dataclass(frozen=True)
class MatchResult:
    score: float
    pairs: Tuple[Tuple[int, int], ...] = ()
    transform: Optional[SimilarityTransform] = None

    def __iter__(self):
        return iter((self.score, self.pairs))


@dataclass(frozen=True)
class CorrespondenceMetrics:
    paired: int
    missing: int
    spurious: int
    goodness_index: float

    def to_dict(self) -> Dict:
        return {
            "paired": self.paired,
            "missing": self.missing,
            "spurious": self.spurious,
            "goodness_index": self.goodness_index,
        }


# ==================== Orientation and enhancement ====================

def orientation_field(img, block: int = 16, presmooth: float = 1.0) -> OrientationField:
    """
    Least-squares block orientation from Sobel gradients. The ridge runs
    perpendicular to the dominant gradient.
    """
    pixels = img.pixels if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)
    h, w = pixels.shape
    rows, cols = h // block, w // block
    if rows < 2 or cols < 2:
        raise ParameterError(f"Image {w}x{h} needs at least 2 blocks of {block}px per side")

    smoothed = ndimage.gaussian_filter(pixels, presmooth) if presmooth > 0 else pixels
    gx = ndimage.sobel(smoothed, axis=1)
    gy = ndimage.sobel(smoothed, axis=0)

    def _block_sum(values):
        trimmed = values[:rows * block, :cols * block]
        return trimmed.reshape(rows, block, cols, block).sum(axis=(1, 3))

    gxx = _block_sum(gx * gx)
    gyy = _block_sum(gy * gy)
    gxy = _block_sum(gx * gy)

    gradient_angle = 0.5 * np.arctan2(2.0 * gxy, gxx - gyy)
    angles = np.mod(gradient_angle + math.pi / 2.0, math.pi)
    energy = gxx + gyy
    anisotropy = np.sqrt((gxx - gyy) ** 2 + 4.0 * gxy ** 2)
    coherence = np.where(energy > 1e-12, anisotropy / np.where(energy > 1e-12, energy, 1.0), 0.0)
    return OrientationField(block, angles, np.clip(coherence, 0.0, 1.0))


def gabor_kernel(theta: float, period: float) -> np.ndarray:
    """
    Even-symmetric Gabor tuned to ridges running along ``theta``. Zero mean,
    unit gain for a cosine at 1/period across the ridges.
    """
    # the harmonic runs across the ridges, a quarter turn from theta
    complex_kernel = sk_gabor_kernel(1.0 / period, theta=theta + math.pi / 2.0,
                                     sigma_x=0.45 * period, sigma_y=0.6 * period, n_stds=3)
    envelope = np.abs(complex_kernel)
    carrier = np.cos(np.angle(complex_kernel))
    kernel = complex_kernel.real
    kernel = kernel - envelope * (kernel.sum() / envelope.sum())
    gain = float(np.sum(kernel * carrier))
    return kernel / gain


def gabor_enhance(img: GrayImage, of: OrientationField, period: float) -> GrayImage:
    """Contextual filtering with 16 quantized orientations; output is 0.5 + response"""
    if not 3.0 <= period <= 25.0:
        raise ParameterError(f"period must be in [3, 25], got {period}")
    pixels = img.pixels
    h, w = pixels.shape
    pixel_angles = of.pixel_angles(h, w)
    step = math.pi / GABOR_ORIENTATIONS
    index = np.mod(np.round(pixel_angles / step).astype(int), GABOR_ORIENTATIONS)

    out = np.zeros_like(pixels)
    for k in np.unique(index):
        kernel = gabor_kernel(k * step, period)
        py, px = kernel.shape[0] // 2, kernel.shape[1] // 2
        padded = np.pad(pixels, ((py, py), (px, px)), mode="reflect")
        response = signal.fftconvolve(padded, kernel, mode="same")[py:py + h, px:px + w]
        out = np.where(index == k, response, out)
    return img.with_pixels(np.clip(0.5 + out, 0.0, 1.0))


# ==================== Extraction ====================

def crossing_number(skeleton: np.ndarray) -> np.ndarray:
    """0.5 * sum |P_i - P_(i+1)| around each skeleton pixel; 0 off the skeleton"""
    skel = np.asarray(skeleton, dtype=bool)
    padded = np.pad(skel, 1).astype(np.int8)
    h, w = skel.shape
    ring = [padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy, dx in NEIGHBORS]
    transitions = sum(np.abs(ring[i] - ring[(i + 1) % 8]) for i in range(8))
    return np.where(skel, transitions // 2, 0).astype(np.int8)


def _neighbors(skel: np.ndarray, y: int, x: int) -> List[Tuple[int, int]]:
    h, w = skel.shape
    out = []
    for dy, dx in NEIGHBORS:
        ny, nx = y + dy, x + dx
        if 0 <= ny < h and 0 <= nx < w and skel[ny, nx]:
            out.append((ny, nx))
    return out


def _branch_starts(skel: np.ndarray, y: int, x: int) -> List[Tuple[int, int]]:
    """One representative pixel per run of set neighbours, 4-neighbours preferred"""
    h, w = skel.shape
    values = []
    for dy, dx in NEIGHBORS:
        ny, nx = y + dy, x + dx
        values.append(bool(0 <= ny < h and 0 <= nx < w and skel[ny, nx]))
    starts = []
    for i in range(8):
        if values[i] and not values[i - 1]:
            run = []
            j = i
            while values[j % 8] and len(run) < 8:
                run.append(j % 8)
                j += 1
            pick = next((r for r in run if 0 in NEIGHBORS[r]), run[0])
            dy, dx = NEIGHBORS[pick]
            starts.append((y + dy, x + dx))
    return starts


def _walk(skel: np.ndarray, cn: np.ndarray, start: Tuple[int, int], max_steps: int,
          blocked: Sequence[Tuple[int, int]] = ()) -> Dict[Tuple[int, int], int]:
    """
    Breadth-first walk along the skeleton from ``start``. Junction pixels
    (CN >= 3) other than the start are reached but not expanded.
    """
    depth = {start: 0}
    for b in blocked:
        depth.setdefault(b, -1)
    queue = deque([start])
    while queue:
        p = queue.popleft()
        d = depth[p]
        if d >= max_steps or (p != start and cn[p] >= 3):
            continue
        for q in _neighbors(skel, *p):
            if q not in depth:
                depth[q] = d + 1
                queue.append(q)
    return {p: d for p, d in depth.items() if d >= 0}


def _direction_from(origin: Tuple[int, int], pixels: Sequence[Tuple[int, int]]) -> Optional[float]:
    """Angle of the vector from the centroid of ``pixels`` to ``origin``"""
    if not pixels:
        return None
    arr = np.asarray(pixels, dtype=np.float64)
    cy, cx = arr[:, 0].mean(), arr[:, 1].mean()
    dy, dx = origin[0] - cy, origin[1] - cx
    if abs(dx) < 1e-9 and abs(dy) < 1e-9:
        return None
    return math.atan2(dy, dx)


def _foreground(pixels: np.ndarray, of: OrientationField, coherence_min: float = 0.2,
                std_min: float = 0.02) -> np.ndarray:
    block = of.block
    rows, cols = of.shape
    trimmed = pixels[:rows * block, :cols * block].reshape(rows, block, cols, block)
    block_std = trimmed.std(axis=(1, 3))
    blocks = (of.coherence >= coherence_min) & (block_std > std_min)
    blocks = ndimage.binary_fill_holes(blocks)
    labels, count = ndimage.label(blocks)
    if count > 1:
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        blocks = labels == int(np.argmax(sizes))
    h, w = pixels.shape
    mask = np.zeros((h, w), dtype=bool)
    mask[:rows * block, :cols * block] = np.repeat(np.repeat(blocks, block, axis=0), block, axis=1)
    return mask


def _drop_small(binary: np.ndarray, min_size: int) -> np.ndarray:
    labels, count = ndimage.label(binary)
    if count == 0:
        return binary
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_size
    keep[0] = False
    return keep[labels]


def dedup_minutiae(minutiae: Sequence[Minutia], distance: float = 4.0,
                   angle_deg: float = 10.0) -> List[Minutia]:
    """Greedy by quality: drop any minutia within ``distance`` px and ``angle_deg`` of a kept one"""
    order = sorted(range(len(minutiae)), key=lambda i: (-minutiae[i].quality, i))
    limit = math.radians(angle_deg)
    kept: List[Minutia] = []
    for i in order:
        m = minutiae[i]
        clash = any(
            math.hypot(m.x - k.x, m.y - k.y) < distance and angle_difference(m.theta, k.theta) < limit
            for k in kept
        )
        if not clash:
            kept.append(m)
    kept.sort(key=lambda m: (m.y, m.x))
    return kept


def extract_minutiae(
    img: GrayImage,
    orientation_block: int = 16,
    spur_length: int = 8,
    opposing_distance: float = 6.0,
    dedup_distance: float = 4.0,
    dedup_angle_deg: float = 10.0,
    border_margin: int = 16,
    trace_length: int = 10,
    period: Optional[float] = None,
    **period_kwargs,
) -> MinutiaeSet:
    """
    Detect ridge endings and bifurcations on the thinned, Gabor-enhanced
    ridge map. Ridges are the dark phase. Returns an empty set flagged
    ``no_ridge_structure`` when no ridge period can be estimated.
    """
    dims = (img.width, img.height)
    if period is None:
        try:
            period = estimate_ridge_period(img, **period_kwargs)
        except NoRidgeStructureError as e:
            logger.warning(f"Minutiae extraction skipped: {e}")
            return MinutiaeSet((), dims, ("no_ridge_structure",))

    of = orientation_field(img, orientation_block)
    enhanced = gabor_enhance(img, of, period)
    foreground = _foreground(img.pixels, of)
    if not foreground.any():
        logger.warning("Minutiae extraction found no ridge foreground")
        return MinutiaeSet((), dims, ("no_ridge_structure",))

    ridges = (enhanced.pixels < 0.5) & foreground
    ridges = _drop_small(ridges, int(2 * period))
    holes = _drop_small(~ridges & foreground, int(period))
    ridges = ridges | (foreground & ~holes & ~ridges)
    skel = skeletonize(ridges)
    cn = crossing_number(skel)

    h, w = skel.shape
    edge_distance = ndimage.distance_transform_edt(np.pad(foreground, 1))[1:-1, 1:-1]
    block_quality = of.coherence

    def _quality(y: int, x: int) -> float:
        r = min(y // of.block, of.shape[0] - 1)
        c = min(x // of.block, of.shape[1] - 1)
        return float(np.clip(block_quality[r, c], 0.0, 1.0))

    endings: List[Tuple[int, int, float]] = []
    bifurcations: List[Tuple[int, int, float]] = []
    spur_junctions: List[Tuple[int, int]] = []

    for y, x in zip(*np.nonzero(cn == 1)):
        p = (int(y), int(x))
        reach = _walk(skel, cn, p, max(spur_length, trace_length))
        short = [q for q, d in reach.items() if q != p and d < spur_length and cn[q] != 2]
        if short:
            spur_junctions.extend(q for q in short if cn[q] >= 3)
            continue
        body = [q for q, d in reach.items() if 0 < d <= trace_length]
        theta = _direction_from(p, body)
        if theta is not None:
            endings.append((p[0], p[1], theta))

    taken: List[Tuple[int, int]] = []
    for y, x in zip(*np.nonzero(cn == 3)):
        p = (int(y), int(x))
        if any(abs(p[0] - q[0]) <= 2 and abs(p[1] - q[1]) <= 2 for q in taken + spur_junctions):
            continue
        taken.append(p)
        starts = _branch_starts(skel, *p)
        if len(starts) != 3:
            continue
        directions = []
        for start in starts:
            others = [p] + [s for s in starts if s != start]
            reach = _walk(skel, cn, start, trace_length - 1, blocked=others)
            theta = _direction_from(p, list(reach))
            if theta is None:
                break
            directions.append(theta + math.pi)
        if len(directions) != 3:
            continue
        pairs = [(0, 1), (0, 2), (1, 2)]
        i, j = min(pairs, key=lambda ij: angle_difference(directions[ij[0]], directions[ij[1]]))
        theta = math.atan2(math.sin(directions[i]) + math.sin(directions[j]),
                           math.cos(directions[i]) + math.cos(directions[j]))
        bifurcations.append((p[0], p[1], theta))

    # facing endings closer than opposing_distance are one broken ridge
    broken = set()
    for a in range(len(endings)):
        for b in range(a + 1, len(endings)):
            ya, xa, ta = endings[a]
            yb, xb, tb = endings[b]
            if math.hypot(xa - xb, ya - yb) < opposing_distance and angle_difference(ta, tb) > 2 * math.pi / 3:
                broken.update((a, b))

    candidates: List[Minutia] = []
    for idx, (y, x, theta) in enumerate(endings):
        if idx in broken or edge_distance[y, x] < border_margin:
            continue
        candidates.append(Minutia(float(x), float(y), theta, "ending", _quality(y, x)))
    for y, x, theta in bifurcations:
        if edge_distance[y, x] < border_margin:
            continue
        candidates.append(Minutia(float(x), float(y), theta, "bifurcation", _quality(y, x)))

    kept = dedup_minutiae(candidates, dedup_distance, dedup_angle_deg)
    logger.debug(f"Extracted {len(kept)} minutiae (period {period:.2f}px, "
                 f"{len(endings)} endings / {len(bifurcations)} bifurcations before filtering)")
    return MinutiaeSet(tuple(kept), dims)


def extraction_params(cfg) -> dict:
    """Keyword arguments for extract_minutiae from a MinutiaeConfig"""
    return {
        "orientation_block": cfg.orientation_block,
        "spur_length": cfg.spur_length,
        "opposing_distance": cfg.opposing_distance,
        "dedup_distance": cfg.dedup_distance,
        "dedup_angle_deg": cfg.dedup_angle_deg,
        "border_margin": cfg.border_margin,
    }


# ==================== Matching ====================

def _descriptors(points: np.ndarray, angles: np.ndarray, k: int) -> np.ndarray:
    """
    Per minutia, its k nearest neighbours as (distance, bearing relative to
    theta_i, direction relative to theta_i), nearest first.
    """
    n = len(points)
    k = min(k, n - 1)
    if k <= 0:
        return np.zeros((n, 0, 3))
    diff = points[None, :, :] - points[:, None, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    rows = np.arange(n)[:, None]
    d = dist[rows, order]
    bearing = np.mod(np.arctan2(diff[rows, order, 1], diff[rows, order, 0]) - angles[:, None], TWO_PI)
    relative = np.mod(angles[order] - angles[:, None], TWO_PI)
    return np.stack([d, bearing, relative], axis=-1)


def _descriptor_distance(da: np.ndarray, db: np.ndarray, tol_px: float, tol_rad: float) -> np.ndarray:
    k = min(da.shape[1], db.shape[1])
    if k == 0:
        return np.zeros((len(da), len(db)))
    a = da[:, None, :k, :]
    b = db[None, :, :k, :]
    cost = (np.abs(a[..., 0] - b[..., 0]) / tol_px
            + angle_difference(a[..., 1], b[..., 1]) / tol_rad
            + angle_difference(a[..., 2], b[..., 2]) / tol_rad)
    return cost.mean(axis=-1)


def _greedy_pairs(pa: np.ndarray, ta: np.ndarray, pb: np.ndarray, tb: np.ndarray,
                  tol_px: float, tol_rad: float) -> List[Tuple[int, int]]:
    dist = np.hypot(pa[:, None, 0] - pb[None, :, 0], pa[:, None, 1] - pb[None, :, 1])
    valid = (dist <= tol_px) & (angle_difference(ta[:, None], tb[None, :]) <= tol_rad)
    ii, jj = np.nonzero(valid)
    order = np.lexsort((jj, ii, dist[ii, jj]))
    used_a, used_b, pairs = set(), set(), []
    for idx in order:
        i, j = int(ii[idx]), int(jj[idx])
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return pairs


def _oriented_similarity(tol_rad: float):
    """Similarity model over minutia positions; pairs whose directions disagree never count as inliers"""

    class OrientedSimilarity(SkSimilarityTransform):
        def estimate(self, src, dst, src_angles, dst_angles):
            return super().estimate(src, dst)

        def residuals(self, src, dst, src_angles, dst_angles):
            dist = super().residuals(src, dst)
            turn = angle_difference(src_angles + self.rotation, dst_angles)
            return np.where(turn <= tol_rad, dist, UNMATCHED_COST)

    return OrientedSimilarity


def _anchor_transform(pa, ta, pb, tb, i: int, j: int) -> SimilarityTransform:
    """Rigid transform that lays minutia i of a onto minutia j of b"""
    rot = tb[j] - ta[i]
    c, s = math.cos(rot), math.sin(rot)
    tx = pb[j, 0] - (c * pa[i, 0] - s * pa[i, 1])
    ty = pb[j, 1] - (s * pa[i, 0] + c * pa[i, 1])
    return SimilarityTransform(1.0, rot, tx, ty)


def _fit_transform(pa, ta, pb, tb, candidates, iterations: int, seed: int, tol_px: float, tol_rad: float,
                   min_separation: float = 10.0, scale_range=(0.8, 1.25)) -> SimilarityTransform:
    """RANSAC over the candidate pairs; the best-ranked pair alone when no sample fits"""
    if len(candidates) >= 2:
        ia = np.array([i for i, _ in candidates])
        ib = np.array([j for _, j in candidates])

        def separated(src, dst, *_):
            return (np.hypot(*(src[1] - src[0])) >= min_separation
                    and np.hypot(*(dst[1] - dst[0])) >= min_separation)

        def plausible(model, *_):
            return scale_range[0] <= model.scale <= scale_range[1]

        model, _ = ransac((pa[ia], pb[ib], ta[ia], tb[ib]), _oriented_similarity(tol_rad),
                          min_samples=2, residual_threshold=tol_px, max_trials=iterations,
                          is_data_valid=separated, is_model_valid=plausible, rng=seed)
        if model is not None:
            tx, ty = model.translation
            return SimilarityTransform(float(model.scale), float(model.rotation), float(tx), float(ty))
    i, j = candidates[0]
    return _anchor_transform(pa, ta, pb, tb, i, j)


def _match_ordered(a: MinutiaeSet, b: MinutiaeSet, seed: int, k: int, iterations: int,
                   tol_px: float, tol_deg: float, max_candidates: int) -> Tuple[List[Tuple[int, int]], Optional[SimilarityTransform]]:
    pa, ta = a.positions(), a.angles()
    pb, tb = b.positions(), b.angles()
    tol_rad = math.radians(tol_deg)

    cost = _descriptor_distance(_descriptors(pa, ta, k), _descriptors(pb, tb, k), tol_px, tol_rad)
    flat = np.lexsort((np.tile(np.arange(len(b)), len(a)), np.repeat(np.arange(len(a)), len(b)), cost.ravel()))
    candidates = [(int(f // len(b)), int(f % len(b))) for f in flat[:max_candidates]]

    transform = _fit_transform(pa, ta, pb, tb, candidates, iterations, seed, tol_px, tol_rad)
    pairs = _greedy_pairs(transform.apply_points(pa), transform.apply_angles(ta), pb, tb, tol_px, tol_rad)
    return pairs, (transform if pairs else None)


def match_minutiae(a: MinutiaeSet, b: MinutiaeSet, seed: int = 0, k: int = 5,
                   iterations: int = 200, tol_px: float = 12.0, tol_deg: float = 30.0,
                   max_candidates: int = 12) -> MatchResult:
    """
    1:1 minutiae comparison. The score is symmetric in (a, b): both sets are
    put in canonical order and the comparison always runs from the smaller
    canonical key to the larger. ``pairs`` index into the inputs as given.
    """
    if len(a) == 0 or len(b) == 0:
        return MatchResult(0.0, (), None)

    order_a = sorted(range(len(a)), key=lambda i: a.minutiae[i].key())
    order_b = sorted(range(len(b)), key=lambda i: b.minutiae[i].key())
    ca = MinutiaeSet(tuple(a.minutiae[i] for i in order_a), a.source_dims)
    cb = MinutiaeSet(tuple(b.minutiae[i] for i in order_b), b.source_dims)

    swapped = (len(ca), ca.canonical_key()) > (len(cb), cb.canonical_key())
    first, second = (cb, ca) if swapped else (ca, cb)
    pairs, transform = _match_ordered(first, second, seed, k, iterations, tol_px, tol_deg, max_candidates)

    if swapped:
        pairs = [(j, i) for i, j in pairs]
        if transform is not None:
            transform = _invert_transform(transform)
    mapped = tuple(sorted((order_a[i], order_b[j]) for i, j in pairs))
    score = min(1.0, len(mapped) ** 2 / (len(a) * len(b)))
    return MatchResult(float(score), mapped, transform)


def _invert_transform(t: SimilarityTransform) -> SimilarityTransform:
    c, s = math.cos(-t.rotation), math.sin(-t.rotation)
    inv_scale = 1.0 / t.scale
    tx = -inv_scale * (c * t.tx - s * t.ty)
    ty = -inv_scale * (s * t.tx + c * t.ty)
    return SimilarityTransform(inv_scale, -t.rotation, tx, ty)


def align_minutiae(ms: MinutiaeSet, transform: SimilarityTransform,
                   dims: Optional[Tuple[int, int]] = None) -> MinutiaeSet:
    """Apply ``transform``; minutiae that land outside ``dims`` are dropped"""
    dims = dims or ms.source_dims
    if len(ms) == 0:
        return MinutiaeSet((), dims, ms.flags)
    points = transform.apply_points(ms.positions())
    angles = transform.apply_angles(ms.angles())
    out = []
    for m, (x, y), t in zip(ms.minutiae, points, angles):
        if 0.0 <= x <= dims[0] and 0.0 <= y <= dims[1]:
            out.append(Minutia(x, y, t, m.kind, m.quality))
    return MinutiaeSet(tuple(out), dims, ms.flags)


def matching_params(cfg) -> dict:
    """Keyword arguments for match_minutiae from a MinutiaeConfig"""
    return {
        "k": cfg.descriptor_k,
        "iterations": cfg.ransac_iterations,
        "tol_px": cfg.match_tolerance_px,
        "tol_deg": cfg.match_tolerance_deg,
    }


# ==================== Correspondence ====================

def correspondence_metrics(probe: MinutiaeSet, reference: MinutiaeSet,
                           tol_px: float = 12.0, tol_deg: float = 30.0) -> CorrespondenceMetrics:
    """
    Optimal one-to-one pairing within tolerance (Hungarian assignment),
    then GI = (paired - missing - spurious) / |reference|.
    """
    if len(reference) == 0:
        raise ParameterError("Goodness index is undefined for an empty reference set")
    paired = 0
    if len(probe) > 0:
        pp, pr = probe.positions(), reference.positions()
        dist = np.hypot(pp[:, None, 0] - pr[None, :, 0], pp[:, None, 1] - pr[None, :, 1])
        ang = angle_difference(probe.angles()[:, None], reference.angles()[None, :])
        valid = (dist <= tol_px) & (ang <= math.radians(tol_deg))
        cost = np.where(valid, dist / tol_px, UNMATCHED_COST)
        rows, cols = linear_sum_assignment(cost)
        paired = int(valid[rows, cols].sum())
    missing = len(reference) - paired
    spurious = len(probe) - paired
    gi = (paired - missing - spurious) / len(reference)
    return CorrespondenceMetrics(paired, missing, spurious, float(gi))


# ==================== Minutiae map ====================

def _splat_axes(m: Minutia, rows: int, cols: int, sigma: float) -> Tuple[np.ndarray, np.ndarray]:
    u, v = m.x / MAP_CELL, m.y / MAP_CELL
    gx = np.exp(-0.5 * ((np.arange(cols) - u) / sigma) ** 2)
    gy = np.exp(-0.5 * ((np.arange(rows) - v) / sigma) ** 2)
    return gy, gx


def _channel_weights(theta: float) -> Tuple[int, int, float, float]:
    t = theta / (TWO_PI / MAP_CHANNELS)
    c0 = int(math.floor(t))
    frac = t - c0
    return c0 % MAP_CHANNELS, (c0 + 1) % MAP_CHANNELS, 1.0 - frac, frac


def map_shape(dims: Tuple[int, int]) -> Tuple[int, int, int]:
    w, h = dims
    return int(math.ceil(h / MAP_CELL)), int(math.ceil(w / MAP_CELL)), MAP_CHANNELS


def splat_mass(m: Minutia, dims: Tuple[int, int], sigma: float = 1.5) -> float:
    """Total mass one minutia deposits on a map of ``dims``"""
    rows, cols, _ = map_shape(dims)
    gy, gx = _splat_axes(m, rows, cols, sigma)
    return float(gy.sum() * gx.sum())


def minutiae_map(ms: MinutiaeSet, dims: Optional[Tuple[int, int]] = None, sigma: float = 1.5) -> MinutiaeMap:
    """
    Gaussian splat of every minutia at (x/8, y/8), its orientation linearly
    soft-binned over 6 channels centred at c * pi/3. Overlaps add.
    """
    dims = dims or ms.source_dims
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    rows, cols, channels = map_shape(dims)
    values = np.zeros((rows, cols, channels))
    for m in ms.minutiae:
        gy, gx = _splat_axes(m, rows, cols, sigma)
        splat = np.outer(gy, gx)
        c0, c1, w0, w1 = _channel_weights(m.theta)
        values[:, :, c0] += w0 * splat
        if w1 > 0:
            values[:, :, c1] += w1 * splat
    return MinutiaeMap(values)
