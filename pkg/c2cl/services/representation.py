"""
Representation Service - fixed-length texture embeddings
纹理表示服务 - 定长嵌入向量

The built-in extractor is a classical stand-in: block orientation
histograms, oriented Gabor energy and local ridge period over a 6x6 cell
grid, padded to 512 and L2-normalized. Externally trained vectors can be
imported instead and flow through the same scoring.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, signal

from ..exceptions import DimensionMismatchError, EmbeddingFormatError, NoRidgeStructureError, ParameterError
from .geometry import estimate_ridge_period, ridge_period_map
from .imaging import GrayImage
from .minutiae import gabor_kernel, orientation_field

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 512
IMPORT_DIMS = (192, 512)
EMBEDDING_MAGIC = b"C2EM"
NORM_TOLERANCE = 1e-6

GRID = 6
ORIENTATION_BINS = 8
GABOR_BANK = 4
DEFAULT_PERIOD = 9.0


@dataclass(frozen=True, eq=False)
class Embedding:
    """Fixed-length vector; unit L2 norm when ``normalized``"""
    values: np.ndarray
    normalized: bool = True
    finger_id: Optional[str] = None
    flags: Tuple[str, ...] = ()

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise EmbeddingFormatError(f"Embedding must be a non-empty vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise EmbeddingFormatError("Embedding contains non-finite values")
        if self.normalized and abs(float(np.linalg.norm(arr)) - 1.0) > NORM_TOLERANCE:
            raise EmbeddingFormatError(f"Normalized embedding has norm {np.linalg.norm(arr):.8f}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "flags", tuple(self.flags))

    @property
    def dim(self) -> int:
        return int(self.values.size)

    @property
    def featureless(self) -> bool:
        return "featureless" in self.flags

    @classmethod
    def from_raw(cls, values, finger_id: Optional[str] = None, flags: Sequence[str] = ()) -> "Embedding":
        arr = np.asarray(values, dtype=np.float64)
        norm = float(np.linalg.norm(arr))
        if not math.isfinite(norm) or norm == 0.0:
            raise EmbeddingFormatError("Cannot normalize a zero or non-finite vector")
        return cls(arr / norm, True, finger_id, tuple(flags))


# ==================== Built-in texture features ====================

def _cell_edges(size: int) -> np.ndarray:
    return np.round(np.linspace(0, size, GRID + 1)).astype(int)


def _unit(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    return v / norm if norm > 0 else v


def _orientation_features(pixels: np.ndarray, foreground: np.ndarray) -> np.ndarray:
    h, w = pixels.shape
    block = 16
    of = orientation_field(pixels, block)
    rows, cols = of.shape
    block_fg = foreground[:rows * block, :cols * block].reshape(rows, block, cols, block).mean(axis=(1, 3))
    weights = of.coherence * block_fg
    bins = np.minimum((of.angles / (math.pi / ORIENTATION_BINS)).astype(int), ORIENTATION_BINS - 1)

    centers_y = (np.arange(rows) + 0.5) * block
    centers_x = (np.arange(cols) + 0.5) * block
    cell_r = np.minimum((centers_y * GRID / h).astype(int), GRID - 1)
    cell_c = np.minimum((centers_x * GRID / w).astype(int), GRID - 1)

    hist = np.zeros((GRID, GRID, ORIENTATION_BINS))
    for i in range(rows):
        for j in range(cols):
            hist[cell_r[i], cell_c[j], bins[i, j]] += weights[i, j]
    totals = hist.sum(axis=2, keepdims=True)
    uniform = 1.0 / ORIENTATION_BINS
    hist = np.where(totals > 1e-9, hist / np.where(totals > 1e-9, totals, 1.0), uniform)
    return (hist - uniform).ravel()


def _gabor_features(pixels: np.ndarray, foreground: np.ndarray, period: float) -> np.ndarray:
    h, w = pixels.shape
    ys, xs = _cell_edges(h), _cell_edges(w)
    energy = np.zeros((GRID, GRID, GABOR_BANK))
    centered = np.where(foreground, pixels - pixels[foreground].mean(), 0.0) if foreground.any() else np.zeros_like(pixels)
    for k in range(GABOR_BANK):
        kernel = gabor_kernel(k * math.pi / GABOR_BANK, period)
        response = np.abs(signal.fftconvolve(centered, kernel, mode="same")) * foreground
        for i in range(GRID):
            for j in range(GRID):
                energy[i, j, k] = response[ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean()
    totals = energy.sum(axis=2, keepdims=True)
    uniform = 1.0 / GABOR_BANK
    energy = np.where(totals > 1e-9, energy / np.where(totals > 1e-9, totals, 1.0), uniform)
    return (energy - uniform).ravel()


def _period_features(pixels: np.ndarray) -> np.ndarray:
    h, w = pixels.shape
    block = max(8, min(h, w) // (2 * GRID))
    try:
        periods, _ = ridge_period_map(pixels, block=block)
    except ParameterError:
        return np.zeros(GRID * GRID)
    rows, cols = periods.shape
    out = np.zeros((GRID, GRID))
    for i in range(GRID):
        for j in range(GRID):
            r0, r1 = i * rows // GRID, max((i + 1) * rows // GRID, i * rows // GRID + 1)
            c0, c1 = j * cols // GRID, max((j + 1) * cols // GRID, j * cols // GRID + 1)
            patch = periods[r0:r1, c0:c1]
            finite = patch[np.isfinite(patch)]
            if len(finite):
                out[i, j] = (float(np.median(finite)) - DEFAULT_PERIOD) / DEFAULT_PERIOD
    return out.ravel()


def extract_texture_embedding(img: GrayImage, finger_id: Optional[str] = None,
                              erosion: int = 4) -> Embedding:
    """
    Deterministic 512-D unit embedding. A featureless image yields the
    uniform vector flagged ``featureless``.
    """
    pixels = img.pixels
    if min(pixels.shape) < 2 * 16:
        raise ParameterError(f"Image {img.width}x{img.height} is too small for texture features")
    foreground = pixels > 1e-6
    if erosion > 0:
        foreground = ndimage.binary_erosion(foreground, iterations=erosion, border_value=1)

    try:
        period = estimate_ridge_period(img)
    except NoRidgeStructureError:
        period = DEFAULT_PERIOD

    groups = [
        _orientation_features(pixels, foreground),
        _gabor_features(pixels, foreground, period),
        _period_features(pixels),
    ]
    features = np.concatenate([_unit(g) for g in groups])
    vector = np.zeros(EMBEDDING_DIM)
    vector[:features.size] = features

    if float(np.linalg.norm(vector)) < 1e-12:
        logger.warning(f"Featureless image{' ' + finger_id if finger_id else ''}: uniform embedding")
        return Embedding(np.full(EMBEDDING_DIM, 1.0 / math.sqrt(EMBEDDING_DIM)), True, finger_id, ("featureless",))
    return Embedding.from_raw(vector, finger_id)


# ==================== Import / export ====================

def import_embedding(path: str | Path, finger_id: Optional[str] = None) -> Embedding:
    """
    Read a C2EM binary ("C2EM", u32 dim, little-endian float32 values) or a
    JSON array. Accepts 192 or 512 values; the result is renormalized.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise EmbeddingFormatError(f"Cannot read embedding {path}: {e}") from e

    if raw[:4] == EMBEDDING_MAGIC:
        if len(raw) < 8:
            raise EmbeddingFormatError(f"{path}: truncated header")
        (dim,) = struct.unpack("<I", raw[4:8])
        body = raw[8:]
        if len(body) != 4 * dim:
            raise EmbeddingFormatError(f"{path}: header says {dim} values, found {len(body) / 4:g}")
        values = np.frombuffer(body, dtype="<f4").astype(np.float64)
    else:
        try:
            data = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise EmbeddingFormatError(f"{path}: neither C2EM nor a JSON array") from e
        if isinstance(data, dict):
            data = data.get("values")
        if not isinstance(data, list):
            raise EmbeddingFormatError(f"{path}: JSON embedding must be an array")
        try:
            values = np.asarray(data, dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise EmbeddingFormatError(f"{path}: non-numeric values") from e

    if values.ndim != 1 or values.size not in IMPORT_DIMS:
        raise EmbeddingFormatError(f"{path}: expected {IMPORT_DIMS} values, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise EmbeddingFormatError(f"{path}: embedding contains non-finite values")
    return Embedding.from_raw(values, finger_id, ("imported", f"dim={values.size}"))


def save_embedding(emb: Embedding, path: str | Path, fmt: str = "c2em") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "c2em":
        payload = EMBEDDING_MAGIC + struct.pack("<I", emb.dim) + emb.values.astype("<f4").tobytes()
        path.write_bytes(payload)
    elif fmt == "json":
        path.write_text(json.dumps(emb.values.tolist()), encoding="utf-8")
    else:
        raise ParameterError(f"Unknown embedding format: {fmt}")
    return path


# ==================== Similarity ====================

def texture_similarity(a: Embedding, b: Embedding) -> float:
    """s_t = (<a, b> + 1) / 2"""
    if a.dim != b.dim:
        raise DimensionMismatchError(f"Embedding dims differ: {a.dim} vs {b.dim}")
    if not (a.normalized and b.normalized):
        raise ParameterError("texture_similarity needs normalized embeddings")
    return float(np.clip((float(np.dot(a.values, b.values)) + 1.0) / 2.0, 0.0, 1.0))


def similarity_matrix(probes: Sequence[Embedding], gallery: Sequence[Embedding]) -> np.ndarray:
    """texture_similarity for every (probe, gallery) pair"""
    if not probes or not gallery:
        return np.zeros((len(probes), len(gallery)))
    dims = {e.dim for e in probes} | {e.dim for e in gallery}
    if len(dims) != 1:
        raise DimensionMismatchError(f"Mixed embedding dims: {sorted(dims)}")
    p = np.stack([e.values for e in probes])
    g = np.stack([e.values for e in gallery])
    return np.clip((p @ g.T + 1.0) / 2.0, 0.0, 1.0)
