"""
Match Evaluation Service - fusion, protocols and verification metrics
匹配评估服务 - 分数融合、验证协议与指标

Acceptance convention everywhere: a trial is accepted when score >= threshold.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from ..exceptions import InsufficientScoresError, ParameterError

logger = logging.getLogger(__name__)

EXACT_TEST_MAX = 8
FAR_POINTS = (1e-2, 1e-3, 1e-4)
PROTOCOL_RULES = ("full-cross", "first-impression")


# ==================== Fusion ====================

def _check_unit(value: float, name: str):
    if not (math.isfinite(value) and 0.0 <= value <= 1.0):
        raise ParameterError(f"{name} must be in [0,1], got {value}")


def fuse_scores(s_t: float, s_m: float, w_t: float = 0.5, w_m: float = 0.5) -> float:
    """Sum-rule fusion w_t * s_t + w_m * s_m"""
    _check_unit(s_t, "s_t")
    _check_unit(s_m, "s_m")
    if w_t < 0 or w_m < 0:
        raise ParameterError(f"Fusion weights must be non-negative, got ({w_t}, {w_m})")
    return w_t * s_t + w_m * s_m


def fuse_score_arrays(s_t: np.ndarray, s_m: np.ndarray, w_t: float = 0.5, w_m: float = 0.5) -> np.ndarray:
    s_t = np.asarray(s_t, dtype=np.float64)
    s_m = np.asarray(s_m, dtype=np.float64)
    if s_t.shape != s_m.shape:
        raise ParameterError(f"Score arrays differ in shape: {s_t.shape} vs {s_m.shape}")
    for arr, name in ((s_t, "s_t"), (s_m, "s_m")):
        if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1):
            raise ParameterError(f"{name} scores must be in [0,1]")
    if w_t < 0 or w_m < 0:
        raise ParameterError(f"Fusion weights must be non-negative, got ({w_t}, {w_m})")
    return w_t * s_t + w_m * s_m


def multi_finger_fuse(per_finger_scores: Sequence[float], rule: str = "mean") -> float:
    """Combine one subject pair's scores over several fingers"""
    scores = [float(s) for s in per_finger_scores]
    if not scores:
        raise ParameterError("multi_finger_fuse needs at least one score")
    for s in scores:
        _check_unit(s, "finger score")
    if rule == "mean":
        return float(np.mean(scores))
    if rule == "sum":
        return float(np.sum(scores))
    raise ParameterError(f"Unknown multi-finger rule: {rule}")


# ==================== Score sets ====================

@dataclass(frozen=True, eq=False)
class ScoreSet:
    genuine: np.ndarray
    imposter: np.ndarray

    def __post_init__(self):
        for name in ("genuine", "imposter"):
            arr = np.array(getattr(self, name), dtype=np.float64).ravel()
            if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1):
                raise ParameterError(f"{name} scores must be finite and within [0,1]")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def counts(self) -> Dict[str, int]:
        return {"genuine": int(self.genuine.size), "imposter": int(self.imposter.size)}

    def require(self):
        if self.genuine.size == 0 or self.imposter.size == 0:
            raise InsufficientScoresError(
                f"Need genuine and imposter scores, got {self.genuine.size} / {self.imposter.size}"
            )


@dataclass(frozen=True, eq=False)
class RocCurve:
    """Operating points ordered by descending threshold"""
    thresholds: np.ndarray
    far: np.ndarray
    tar: np.ndarray

    @property
    def frr(self) -> np.ndarray:
        return 1.0 - self.tar

    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.far.tolist(), self.tar.tolist()))


@dataclass(frozen=True)
class TarAtFar:
    tar: float
    threshold: float
    far: float
    floored: bool = False


@dataclass(frozen=True)
class RocTestResult:
    p_value: float
    auc_a: float
    auc_b: float
    statistic: float
    method: str
    flags: Tuple[str, ...] = ()


# ==================== Metrics ====================

def roc(scores: ScoreSet) -> RocCurve:
    """(FAR, TAR) at every distinct score used as threshold"""
    scores.require()
    gen = np.sort(scores.genuine)
    imp = np.sort(scores.imposter)
    thresholds = np.unique(np.concatenate([gen, imp]))[::-1]
    tar = (gen.size - np.searchsorted(gen, thresholds, side="left")) / gen.size
    far = (imp.size - np.searchsorted(imp, thresholds, side="left")) / imp.size
    return RocCurve(thresholds, far, tar)


def eer(scores: ScoreSet) -> float:
    """
    Equal error rate. FAR - FRR is swept from +inf down through every
    distinct threshold; the crossing is interpolated linearly, and a run of
    exact zeros resolves to the midpoint of its first and last points.
    """
    scores.require()
    gen = np.sort(scores.genuine)
    imp = np.sort(scores.imposter)
    n_g, n_i = gen.size, imp.size
    thresholds = np.unique(np.concatenate([gen, imp]))[::-1]
    # integer counts keep exact ties exact
    false_accepts = np.concatenate([[0], n_i - np.searchsorted(imp, thresholds, side="left")])
    misses = np.concatenate([[n_g], np.searchsorted(gen, thresholds, side="left")])
    diff = false_accepts * n_g - misses * n_i
    far = false_accepts / n_i

    zeros = np.nonzero(diff == 0.0)[0]
    if zeros.size:
        first, last = zeros[0], zeros[-1]
        return float(0.5 * (far[first] + far[last]))

    k = int(np.argmax(diff > 0.0))
    d0, d1 = diff[k - 1], diff[k]
    alpha = -d0 / (d1 - d0)
    return float(far[k - 1] + alpha * (far[k] - far[k - 1]))


def tar_at_far(scores: ScoreSet, far: float = 1e-4) -> TarAtFar:
    """
    TAR at the most permissive threshold whose FAR stays within target.
    A target below 1/|imposter| is not resolvable; it is raised to that
    floor and flagged.
    """
    if not 0.0 < far < 1.0:
        raise ParameterError(f"far must be in (0,1), got {far}")
    curve = roc(scores)
    floor = 1.0 / scores.imposter.size
    floored = far < floor
    target = max(far, floor)
    ok = np.nonzero(curve.far <= target + 1e-15)[0]
    if ok.size == 0:
        return TarAtFar(0.0, float("inf"), 0.0, floored)
    k = int(ok[-1])
    return TarAtFar(float(curve.tar[k]), float(curve.thresholds[k]), float(curve.far[k]), floored)


def auc(scores: ScoreSet) -> float:
    """Mann-Whitney U / (n_g n_i); ties count one half"""
    scores.require()
    n_g, n_i = scores.genuine.size, scores.imposter.size
    ranks = stats.rankdata(np.concatenate([scores.genuine, scores.imposter]))
    u = ranks[:n_g].sum() - n_g * (n_g + 1) / 2.0
    return float(u / (n_g * n_i))


def _placements(gen: np.ndarray, imp: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """DeLong structural components V10 (per genuine) and V01 (per imposter)"""
    psi = (gen[:, None] > imp[None, :]).astype(np.float64) + 0.5 * (gen[:, None] == imp[None, :])
    return psi.mean(axis=1), psi.mean(axis=0)


def _exact_paired(a: ScoreSet, b: ScoreSet, observed: float) -> float:
    n_g, n_i = a.genuine.size, a.imposter.size
    ga, gb, ia, ib = a.genuine, b.genuine, a.imposter, b.imposter
    hits = total = 0
    for swaps in itertools.product((False, True), repeat=n_g + n_i):
        sg = np.array(swaps[:n_g], dtype=bool)
        si = np.array(swaps[n_g:], dtype=bool)
        pa = ScoreSet(np.where(sg, gb, ga), np.where(si, ib, ia))
        pb = ScoreSet(np.where(sg, ga, gb), np.where(si, ia, ib))
        if abs(auc(pa) - auc(pb)) >= observed - 1e-12:
            hits += 1
        total += 1
    return hits / total


def _exact_independent(a: ScoreSet, b: ScoreSet, observed: float) -> float:
    gen_pool = np.concatenate([a.genuine, b.genuine])
    imp_pool = np.concatenate([a.imposter, b.imposter])
    n_ga, n_ia = a.genuine.size, a.imposter.size
    hits = total = 0
    for g_idx in itertools.combinations(range(gen_pool.size), n_ga):
        g_mask = np.zeros(gen_pool.size, dtype=bool)
        g_mask[list(g_idx)] = True
        for i_idx in itertools.combinations(range(imp_pool.size), n_ia):
            i_mask = np.zeros(imp_pool.size, dtype=bool)
            i_mask[list(i_idx)] = True
            pa = ScoreSet(gen_pool[g_mask], imp_pool[i_mask])
            pb = ScoreSet(gen_pool[~g_mask], imp_pool[~i_mask])
            if abs(auc(pa) - auc(pb)) >= observed - 1e-12:
                hits += 1
            total += 1
    return hits / total


def mann_whitney_roc_test(a: ScoreSet, b: ScoreSet, mode: str = "paired") -> RocTestResult:
    """
    Two-sided test for equal AUCs (Mann-Whitney statistics, ties count one
    half). Small samples (at most 8 trials when paired, 8 scores in
    total when independent) are enumerated exactly; larger ones use the
    DeLong normal approximation.
    """
    if mode not in ("paired", "independent"):
        raise ParameterError(f"Unknown mode: {mode}")
    a.require()
    b.require()
    if mode == "paired" and (a.genuine.size != b.genuine.size or a.imposter.size != b.imposter.size):
        raise ParameterError("Paired comparison needs score sets over the same trials")

    auc_a, auc_b = auc(a), auc(b)
    observed = abs(auc_a - auc_b)
    all_scores = np.concatenate([a.genuine, a.imposter, b.genuine, b.imposter])
    if np.all(all_scores == all_scores[0]):
        return RocTestResult(1.0, auc_a, auc_b, 0.0, "degenerate", ("degenerate",))

    n_a = a.genuine.size + a.imposter.size
    n_b = b.genuine.size + b.imposter.size
    small = n_a <= EXACT_TEST_MAX if mode == "paired" else n_a + n_b <= EXACT_TEST_MAX
    if small:
        p = _exact_paired(a, b, observed) if mode == "paired" else _exact_independent(a, b, observed)
        return RocTestResult(float(p), auc_a, auc_b, observed, f"exact-{mode}")

    v10a, v01a = _placements(a.genuine, a.imposter)
    v10b, v01b = _placements(b.genuine, b.imposter)
    if mode == "paired":
        s10 = np.cov(np.vstack([v10a, v10b]), ddof=1)
        s01 = np.cov(np.vstack([v01a, v01b]), ddof=1)
        var = ((s10[0, 0] + s10[1, 1] - 2 * s10[0, 1]) / a.genuine.size
               + (s01[0, 0] + s01[1, 1] - 2 * s01[0, 1]) / a.imposter.size)
    else:
        var = (np.var(v10a, ddof=1) / a.genuine.size + np.var(v01a, ddof=1) / a.imposter.size
               + np.var(v10b, ddof=1) / b.genuine.size + np.var(v01b, ddof=1) / b.imposter.size)

    if observed == 0.0:
        return RocTestResult(1.0, auc_a, auc_b, 0.0, f"delong-{mode}")
    if not var > 0:
        return RocTestResult(0.0, auc_a, auc_b, float("inf"), f"delong-{mode}", ("zero_variance",))
    z = observed / math.sqrt(var)
    p = float(2.0 * stats.norm.sf(z))
    return RocTestResult(min(1.0, p), auc_a, auc_b, float(z), f"delong-{mode}")


def metric_report(scores: ScoreSet, far_points: Sequence[float] = FAR_POINTS) -> Dict:
    """EER, TAR at each FAR, ROC points and counts; ``insufficient`` when a side is empty"""
    report: Dict = {"counts": scores.counts}
    if scores.genuine.size == 0 or scores.imposter.size == 0:
        report.update({"eer": None, "tar_at_far": {}, "roc_points": [], "insufficient": True})
        return report
    tars = {}
    for target in far_points:
        result = tar_at_far(scores, target)
        tars[f"{target:.0e}"] = {"tar": result.tar, "threshold": result.threshold, "floored": result.floored}
    report.update({
        "eer": eer(scores),
        "auc": auc(scores),
        "tar_at_far": tars,
        "roc_points": [[f, t] for f, t in roc(scores).points()],
        "insufficient": False,
    })
    return report


# ==================== Protocols ====================

@dataclass(frozen=True, eq=False)
class Protocol:
    """Parallel arrays of (probe entry, gallery entry, genuine?) over manifest indices"""
    probe_idx: np.ndarray
    gallery_idx: np.ndarray
    label: np.ndarray
    rule: str = "full-cross"
    excluded: Tuple[Tuple[str, str], ...] = ()

    def __len__(self) -> int:
        return int(self.label.size)

    @property
    def genuine_count(self) -> int:
        return int(self.label.sum())

    @property
    def imposter_count(self) -> int:
        return int(self.label.size - self.label.sum())


def _finger_groups(entries) -> Tuple[List[Tuple[str, str]], Dict[Tuple[str, str], Dict[str, List[int]]]]:
    order: List[Tuple[str, str]] = []
    groups: Dict[Tuple[str, str], Dict[str, List[int]]] = {}
    for idx, e in enumerate(entries):
        key = (str(e.subject_id), str(e.finger_position))
        if key not in groups:
            groups[key] = {"contactless": [], "contact": []}
            order.append(key)
        if e.capture_kind not in groups[key]:
            raise ParameterError(f"Unknown capture kind: {e.capture_kind}")
        groups[key][e.capture_kind].append(idx)
    for key in order:
        for kind in ("contactless", "contact"):
            groups[key][kind].sort(key=lambda i: (entries[i].impression_index, i))
    return order, groups


def _usable_fingers(entries) -> Tuple[List[Tuple[str, str]], Dict, List[str], List[Tuple[str, str]]]:
    order, groups = _finger_groups(entries)
    warnings, excluded, kept = [], [], []
    for key in order:
        if not groups[key]["contactless"] or not groups[key]["contact"]:
            warnings.append(f"Finger {key[0]}/{key[1]} lacks contactless or contact impressions, excluded")
            excluded.append(key)
        else:
            kept.append(key)
    return kept, groups, warnings, excluded


def gen_protocol(entries, rule: str = "full-cross") -> Tuple[Protocol, List[str]]:
    """
    Contactless probes against contact gallery entries. Genuine pairs are
    all contactless x contact impressions of a finger. Imposters are every
    cross-finger pair (full-cross) or the first contactless impression of
    each finger against the first contact impression of every other finger
    (first-impression). Returns (protocol, warnings).
    """
    if rule not in PROTOCOL_RULES:
        raise ParameterError(f"Unknown protocol rule: {rule}")
    kept, groups, warnings, excluded = _usable_fingers(entries)
    for w in warnings:
        logger.warning(w)

    if rule == "full-cross":
        probes = np.array([i for k in kept for i in groups[k]["contactless"]], dtype=np.int64)
        gallery = np.array([i for k in kept for i in groups[k]["contact"]], dtype=np.int64)
        probe_finger = np.array([f for f, k in enumerate(kept) for _ in groups[k]["contactless"]], dtype=np.int64)
        gallery_finger = np.array([f for f, k in enumerate(kept) for _ in groups[k]["contact"]], dtype=np.int64)
        probe_idx = np.repeat(probes, gallery.size)
        gallery_idx = np.tile(gallery, probes.size)
        label = np.repeat(probe_finger, gallery.size) == np.tile(gallery_finger, probes.size)
        return Protocol(probe_idx, gallery_idx, label, rule, tuple(excluded)), warnings

    gp, gg = [], []
    for k in kept:
        cl, ct = groups[k]["contactless"], groups[k]["contact"]
        gp.extend(np.repeat(cl, len(ct)).tolist())
        gg.extend(np.tile(ct, len(cl)).tolist())
    firsts_cl = np.array([groups[k]["contactless"][0] for k in kept], dtype=np.int64)
    firsts_ct = np.array([groups[k]["contact"][0] for k in kept], dtype=np.int64)
    f = len(kept)
    pi, gi = np.meshgrid(np.arange(f), np.arange(f), indexing="ij")
    off = pi != gi
    probe_idx = np.concatenate([np.asarray(gp, dtype=np.int64), firsts_cl[pi[off]]])
    gallery_idx = np.concatenate([np.asarray(gg, dtype=np.int64), firsts_ct[gi[off]]])
    label = np.concatenate([np.ones(len(gp), dtype=bool), np.zeros(int(off.sum()), dtype=bool)])
    return Protocol(probe_idx, gallery_idx, label, rule, tuple(excluded)), warnings


def protocol_counts(entries, rule: str = "full-cross") -> Dict[str, int]:
    """Pair counts of gen_protocol without materializing the pairs"""
    if rule not in PROTOCOL_RULES:
        raise ParameterError(f"Unknown protocol rule: {rule}")
    kept, groups, _, excluded = _usable_fingers(entries)
    a = np.array([len(groups[k]["contactless"]) for k in kept], dtype=np.int64)
    b = np.array([len(groups[k]["contact"]) for k in kept], dtype=np.int64)
    genuine = int(np.sum(a * b))
    if rule == "full-cross":
        imposter = int(a.sum() * b.sum() - genuine)
    else:
        imposter = len(kept) * (len(kept) - 1)
    return {"genuine": genuine, "imposter": imposter, "fingers": len(kept), "excluded": len(excluded)}


# ==================== Multi-finger ====================

def multi_finger_protocol_scores(per_finger: Dict[str, pd.DataFrame], combination: Sequence[str],
                                 rule: str = "mean", score_column: str = "fused") -> Tuple[ScoreSet, pd.DataFrame]:
    """
    Fuse per-finger score tables into subject-level scores for a finger
    combination such as ("R-index", "L-index"). Each table carries
    probe_subject, gallery_subject, probe_impression, gallery_impression,
    label and the score column; rows are joined on the first four.
    The sum rule is reported divided by the number of fingers so scores
    stay in [0,1]; it ranks trials identically.
    """
    if not combination:
        raise ParameterError("Finger combination is empty")
    keys = ["probe_subject", "gallery_subject", "probe_impression", "gallery_impression"]
    merged: Optional[pd.DataFrame] = None
    for finger in combination:
        if finger not in per_finger:
            raise ParameterError(f"No scores for finger {finger}")
        frame = per_finger[finger][keys + ["label", score_column]].rename(
            columns={score_column: f"score_{finger}", "label": f"label_{finger}"}
        )
        merged = frame if merged is None else merged.merge(frame, on=keys, how="inner")

    score_cols = [f"score_{f}" for f in combination]
    label_cols = [f"label_{f}" for f in combination]
    labels = merged[label_cols].astype(str)
    if not (labels.nunique(axis=1) == 1).all():
        raise ParameterError("Finger tables disagree on genuine/imposter labels")

    merged = merged.sort_values(keys, kind="mergesort").reset_index(drop=True)
    fused = merged[score_cols].apply(lambda row: multi_finger_fuse(row.tolist(), rule), axis=1)
    if rule == "sum":
        fused = fused / len(combination)
    merged["fused"] = fused.astype(float)
    merged["label"] = merged[label_cols[0]]
    is_genuine = merged["label"].astype(str).isin(["genuine", "True", "1"])
    return ScoreSet(merged.loc[is_genuine, "fused"].to_numpy(), merged.loc[~is_genuine, "fused"].to_numpy()), merged
