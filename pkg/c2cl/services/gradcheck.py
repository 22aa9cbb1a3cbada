"""
Gradient Check - central finite differences against analytic gradients
梯度校验 - 中心差分对比解析梯度

Covers warp_param_gradients and every loss gradient. Used by the test
suite and by the ``gradcheck`` CLI subcommand.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np
from scipy import ndimage

from .geometry import AffineParams, TPSField, stn_params_from_vector, stn_params_to_vector, warp_array, \
    warp_flow, warp_param_gradients
from .losses import (
    LossWeights, adversarial_gradient, adversarial_value, adversary_head_gradient, adversary_head_value,
    identity_gradients, identity_value, stn_gradient, stn_value,
)

logger = logging.getLogger(__name__)

FD_STEP = 1e-4
REL_TOLERANCE = 1e-4
ABS_FLOOR = 1e-6
INTEGER_MARGIN = 5e-3
PROB_MIN = 0.05


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    passed: bool

    def to_dict(self) -> Dict:
        return {"name": self.name, "max_rel_error": self.max_rel_error,
                "checked": self.checked, "passed": self.passed}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        grad.ravel()[i] = (fn(plus.reshape(x.shape)) - fn(minus.reshape(x.shape))) / (2.0 * h)
    return grad


# ==================== Warp ====================

def _warp_instance(rng: np.random.Generator, size: int, n: int) -> Tuple[np.ndarray, AffineParams, TPSField, np.ndarray]:
    """Random smooth image, warp and upstream gradient whose sample points avoid bilinear cell edges"""
    pixels = ndimage.gaussian_filter(rng.uniform(0.0, 1.0, (size, size)), sigma=1.5)
    upstream = rng.normal(0.0, 1.0, (size, size))
    while True:
        affine = AffineParams(rng.uniform(0.8, 1.2), rng.uniform(-0.3, 0.3),
                              rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0))
        field = TPSField.zero(size, size, n).with_displacements(rng.uniform(-1.5, 1.5, (n, n, 2)))
        flow = warp_flow(affine, field, size, size)
        coords = np.concatenate([flow.x_src.ravel(), flow.y_src.ravel()])
        if np.min(np.abs(coords - np.round(coords))) > INTEGER_MARGIN:
            return pixels, affine, field, upstream


def check_warp_gradients(rng: np.random.Generator, size: int = 24, n: int = 3,
                         h: float = FD_STEP, tol: float = REL_TOLERANCE) -> GradCheckResult:
    pixels, affine, field, upstream = _warp_instance(rng, size, n)
    analytic = warp_param_gradients(pixels, affine, field, upstream).as_vector()
    base = stn_params_to_vector(affine, field)

    def objective(vector: np.ndarray) -> float:
        a, f = stn_params_from_vector(vector, size, size, n)
        return float(np.sum(upstream * warp_array(pixels, a, f)))

    numeric = central_difference(objective, base, h)
    err = float(relative_error(analytic, numeric).max())
    return GradCheckResult("warp", err, analytic.size, err <= tol)


# ==================== Losses ====================

def _simplex(rng: np.random.Generator, size: int) -> np.ndarray:
    return PROB_MIN + (1.0 - PROB_MIN * size) * rng.dirichlet(np.ones(size))


def check_loss_gradients(rng: np.random.Generator, dim: int = 8, h: float = FD_STEP,
                         tol: float = REL_TOLERANCE) -> List[GradCheckResult]:
    w = LossWeights(*rng.uniform(0.05, 1.0, 4))
    y1, y2, q = _simplex(rng, dim), _simplex(rng, dim), _simplex(rng, dim)
    r1, r2, c1, c2 = (rng.normal(0.0, 1.0, dim) for _ in range(4))
    hm = rng.uniform(0.0, 1.0, (2, 2, dim // 4))
    h_hat = rng.uniform(0.0, 1.0, hm.shape)
    label = int(rng.integers(dim))
    device = int(rng.integers(dim))
    args = {"y1": y1, "y2": y2, "r1": r1, "r2": r2, "h_hat": h_hat}

    analytic = identity_gradients(y1, y2, r1, r2, c1, c2, hm, h_hat, label, w)
    results = []
    for name, value in args.items():
        def objective(x: np.ndarray, _name=name) -> float:
            kwargs = dict(args, **{_name: x})
            return identity_value(kwargs["y1"], kwargs["y2"], kwargs["r1"], kwargs["r2"], c1, c2,
                                  hm, kwargs["h_hat"], label, w)
        err = float(relative_error(analytic[name], central_difference(objective, value, h)).max())
        results.append(GradCheckResult(f"identity.{name}", err, value.size, err <= tol))

    err = float(relative_error(adversarial_gradient(q), central_difference(adversarial_value, q, h)).max())
    results.append(GradCheckResult("adversarial.q", err, q.size, err <= tol))

    err = float(relative_error(adversary_head_gradient(q, device),
                               central_difference(lambda x: adversary_head_value(x, device), q, h)).max())
    results.append(GradCheckResult("adversary_head.q", err, q.size, err <= tol))

    r_cl, r_c = rng.normal(0.0, 1.0, dim), rng.normal(0.0, 1.0, dim)
    err = float(relative_error(stn_gradient(r_cl, r_c),
                               central_difference(lambda x: stn_value(x, r_c), r_cl, h)).max())
    results.append(GradCheckResult("stn.r_cl", err, dim, err <= tol))
    return results


def run_gradcheck(seed: int = 0, configurations: int = 10) -> List[GradCheckResult]:
    """Warp and loss suites over ``configurations`` seeded draws; one result per check per draw"""
    rng = np.random.default_rng(seed)
    results: List[GradCheckResult] = []
    for _ in range(configurations):
        results.append(check_warp_gradients(rng))
        results.extend(check_loss_gradients(rng))
    failed = [r for r in results if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_error)
        logger.warning(f"Gradient check: {len(failed)}/{len(results)} mismatches, "
                       f"worst {worst.name} rel err {worst.max_rel_error:.3e}")
    else:
        logger.info(f"Gradient check: {len(results)} checks passed")
    return results
