"""
Loss Service - identity, adversarial and warp objectives as pure functions
损失函数服务

Probability inputs are post-softmax vectors. Each loss has a value function
on raw arrays (used by the finite-difference suite), an analytic gradient,
and a validated entry point that takes LossInputs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from ..exceptions import ParameterError, DimensionMismatchError

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
SIMPLEX_TOLERANCE = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.00125
    lambda3: float = 0.095
    lambda4: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")


@dataclass(frozen=True)
class IdentityLoss:
    total: float
    classification: float
    center: float
    minutiae_map: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "total": self.total,
            "classification": self.classification,
            "center": self.center,
            "minutiae_map": self.minutiae_map,
        }


def _as_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ParameterError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    return arr


def _check_simplex(p: np.ndarray, name: str, min_classes: int = 2):
    if len(p) < min_classes:
        raise ParameterError(f"{name} needs at least {min_classes} classes, got {len(p)}")
    if p.min() < 0 or abs(p.sum() - 1.0) > SIMPLEX_TOLERANCE:
        raise ParameterError(f"{name} must lie on the probability simplex (sum={p.sum():.8f})")


def _check_label(label: int, classes: int, name: str):
    if not 0 <= int(label) < classes:
        raise ParameterError(f"{name} {label} out of range for {classes} classes")


@dataclass(frozen=True, eq=False)
class LossInputs:
    """
    y1, y2: class probabilities from the minutiae and texture branches
    r1, r2: embedding halves; c1, c2: their class centers
    h, h_hat: target and predicted minutiae maps
    q: adversary device probabilities
    """
    y1: np.ndarray
    y2: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    h: np.ndarray
    h_hat: np.ndarray
    q: np.ndarray
    label: int
    device_label: int = 0

    def __post_init__(self):
        for name in ("y1", "y2", "r1", "r2", "c1", "c2", "q"):
            object.__setattr__(self, name, _as_vector(getattr(self, name), name))
        h = np.asarray(self.h, dtype=np.float64)
        h_hat = np.asarray(self.h_hat, dtype=np.float64)
        if h.shape != h_hat.shape:
            raise DimensionMismatchError(f"Minutiae maps differ in shape: {h.shape} vs {h_hat.shape}")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "h_hat", h_hat)

        _check_simplex(self.y1, "y1")
        _check_simplex(self.y2, "y2")
        _check_simplex(self.q, "q")
        if len(self.y1) != len(self.y2):
            raise DimensionMismatchError("Both branches must predict the same classes")
        if self.r1.shape != self.c1.shape or self.r2.shape != self.c2.shape:
            raise DimensionMismatchError("Embedding halves and centers must match in shape")

    @property
    def num_classes(self) -> int:
        return len(self.y1)

    @property
    def num_devices(self) -> int:
        return len(self.q)


# ==================== Raw values and gradients ====================

def identity_terms(y1, y2, r1, r2, c1, c2, h, h_hat, label: int) -> Tuple[float, float, float]:
    """(L1, L2, L3) without weights"""
    l1 = -np.log(max(float(y1[label]), PROB_FLOOR)) - np.log(max(float(y2[label]), PROB_FLOOR))
    l2 = float(np.sum((r1 - c1) ** 2) + np.sum((r2 - c2) ** 2))
    l3 = float(np.sum((np.asarray(h_hat) - np.asarray(h)) ** 2))
    return float(l1), l2, l3


def identity_value(y1, y2, r1, r2, c1, c2, h, h_hat, label: int, w: LossWeights) -> float:
    l1, l2, l3 = identity_terms(y1, y2, r1, r2, c1, c2, h, h_hat, label)
    return w.lambda1 * l1 + w.lambda2 * l2 + w.lambda3 * l3


def identity_gradients(y1, y2, r1, r2, c1, c2, h, h_hat, label: int,
                       w: LossWeights) -> Dict[str, np.ndarray]:
    g_y1 = np.zeros_like(y1, dtype=np.float64)
    g_y2 = np.zeros_like(y2, dtype=np.float64)
    if y1[label] > PROB_FLOOR:
        g_y1[label] = -w.lambda1 / y1[label]
    if y2[label] > PROB_FLOOR:
        g_y2[label] = -w.lambda1 / y2[label]
    return {
        "y1": g_y1,
        "y2": g_y2,
        "r1": 2.0 * w.lambda2 * (r1 - c1),
        "r2": 2.0 * w.lambda2 * (r2 - c2),
        "h_hat": 2.0 * w.lambda3 * (np.asarray(h_hat) - np.asarray(h)),
    }


def adversarial_value(q) -> float:
    q = np.asarray(q, dtype=np.float64)
    return float(-np.sum(np.log(np.maximum(q, PROB_FLOOR))) / len(q))


def adversarial_gradient(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.where(q > PROB_FLOOR, -1.0 / (len(q) * np.maximum(q, PROB_FLOOR)), 0.0)


def adversary_head_value(q, device_label: int) -> float:
    return float(-np.log(max(float(q[device_label]), PROB_FLOOR)))


def adversary_head_gradient(q, device_label: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    grad = np.zeros_like(q)
    if q[device_label] > PROB_FLOOR:
        grad[device_label] = -1.0 / q[device_label]
    return grad


def stn_value(r_cl, r_c) -> float:
    d = np.asarray(r_cl, dtype=np.float64) - np.asarray(r_c, dtype=np.float64)
    return float(np.dot(d, d))


def stn_gradient(r_cl, r_c) -> np.ndarray:
    """d/d(r_cl)"""
    return 2.0 * (np.asarray(r_cl, dtype=np.float64) - np.asarray(r_c, dtype=np.float64))


# ==================== Validated entry points ====================

def loss_identity(inp: LossInputs, w: LossWeights = LossWeights()) -> IdentityLoss:
    """lambda1 L1 + lambda2 L2 + lambda3 L3 with the per-term breakdown"""
    _check_label(inp.label, inp.num_classes, "label")
    l1, l2, l3 = identity_terms(inp.y1, inp.y2, inp.r1, inp.r2, inp.c1, inp.c2, inp.h, inp.h_hat, inp.label)
    total = w.lambda1 * l1 + w.lambda2 * l2 + w.lambda3 * l3
    return IdentityLoss(float(total), l1, l2, l3)


def loss_adversarial(inp: LossInputs) -> float:
    """Cross-entropy of the adversary output against the uniform device target"""
    return adversarial_value(inp.q)


def combine_deepprint(identity: float, adversarial: float, lambda4: float) -> float:
    return identity + lambda4 * adversarial


def loss_total_deepprint(inp: LossInputs, w: LossWeights = LossWeights()) -> float:
    return combine_deepprint(loss_identity(inp, w).total, loss_adversarial(inp), w.lambda4)


def loss_adversary_head(inp: LossInputs) -> float:
    """-log q(y_c)"""
    _check_label(inp.device_label, inp.num_devices, "device_label")
    return adversary_head_value(inp.q, inp.device_label)


def loss_stn(r_cl, r_c) -> float:
    """Squared L2 distance between contactless and contact representations"""
    a = getattr(r_cl, "values", r_cl)
    b = getattr(r_c, "values", r_c)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"Embedding dims differ: {a.shape} vs {b.shape}")
    return stn_value(a, b)
