"""
Search Service - rank-N and two-stage identification
检索服务 - Rank-N 与两阶段检索

Stage one ranks the whole gallery by texture similarity; stage two re-scores
the top-k shortlist with fused texture + minutiae scores.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..exceptions import DimensionMismatchError, ParameterError
from .matcheval import fuse_score_arrays
from .minutiae import MinutiaeSet, match_minutiae
from .representation import Embedding

logger = logging.getLogger(__name__)

CAPTURE_KINDS = ("contact", "contactless")
SCORERS = ("texture", "minutiae", "fused")


@dataclass(frozen=True, eq=False)
class Template:
    """Texture embedding + minutiae of one impression"""
    template_id: str
    subject_id: str
    finger_position: str
    impression_index: int
    capture_kind: str
    embedding: Embedding
    minutiae: MinutiaeSet
    device: str = ""
    flags: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.capture_kind not in CAPTURE_KINDS:
            raise ParameterError(f"capture_kind must be one of {CAPTURE_KINDS}, got {self.capture_kind}")
        if not self.embedding.normalized:
            raise ParameterError(f"Template {self.template_id} embedding is not normalized")
        object.__setattr__(self, "flags", tuple(self.flags))

    @property
    def finger_key(self) -> Tuple[str, str]:
        return (self.subject_id, self.finger_position)


@dataclass(frozen=True)
class Candidate:
    index: int
    template_id: str
    score: float
    s_t: float
    s_m: Optional[float] = None
    stage: int = 1


@dataclass(frozen=True)
class Scorer:
    """Fusion weights and minutiae matcher settings shared by all searches"""
    w_t: float = 0.5
    w_m: float = 0.5
    seed: int = 0
    match_kwargs: Dict = field(default_factory=dict)

    def minutiae_scores(self, probe: Template, gallery: Sequence[Template]) -> np.ndarray:
        out = np.zeros(len(gallery))
        if len(probe.minutiae) == 0:
            return out
        for i, g in enumerate(gallery):
            if len(g.minutiae):
                out[i] = match_minutiae(probe.minutiae, g.minutiae, seed=self.seed, **self.match_kwargs).score
        return out


class GalleryIndex:
    """Read-only gallery with a stacked embedding matrix for stage one"""

    def __init__(self, templates: Sequence[Template]):
        self.templates: Tuple[Template, ...] = tuple(templates)
        if self.templates:
            dims = {t.embedding.dim for t in self.templates}
            if len(dims) != 1:
                raise DimensionMismatchError(f"Gallery mixes embedding dims: {sorted(dims)}")
            matrix = np.stack([t.embedding.values for t in self.templates])
        else:
            matrix = np.zeros((0, 0))
        matrix.setflags(write=False)
        self.matrix = matrix
        self._by_finger: Dict[Tuple[str, str], List[int]] = {}
        for i, t in enumerate(self.templates):
            self._by_finger.setdefault(t.finger_key, []).append(i)

    def __len__(self) -> int:
        return len(self.templates)

    def __getitem__(self, index: int) -> Template:
        return self.templates[index]

    def texture_scores(self, probe: Template) -> np.ndarray:
        if not self.templates:
            return np.zeros(0)
        if probe.embedding.dim != self.matrix.shape[1]:
            raise DimensionMismatchError(
                f"Probe dim {probe.embedding.dim} does not match gallery dim {self.matrix.shape[1]}"
            )
        return np.clip((self.matrix @ probe.embedding.values + 1.0) / 2.0, 0.0, 1.0)

    def mates(self, probe: Template) -> List[int]:
        return list(self._by_finger.get(probe.finger_key, []))


def _as_index(gallery: Union[GalleryIndex, Sequence[Template]]) -> GalleryIndex:
    return gallery if isinstance(gallery, GalleryIndex) else GalleryIndex(gallery)


def _order(scores: np.ndarray) -> np.ndarray:
    """Descending score, ties by insertion index"""
    return np.lexsort((np.arange(scores.size), -scores))


def rank_n_search(probe: Template, gallery: Union[GalleryIndex, Sequence[Template]],
                  scorer: str = "fused", weights: Optional[Scorer] = None) -> List[Candidate]:
    """Exhaustive ranking of the gallery under one scorer"""
    if scorer not in SCORERS:
        raise ParameterError(f"Unknown scorer: {scorer}")
    index = _as_index(gallery)
    weights = weights or Scorer()
    s_t = index.texture_scores(probe)
    s_m = None
    if scorer == "texture":
        scores = s_t
    else:
        s_m = weights.minutiae_scores(probe, index.templates)
        scores = s_m if scorer == "minutiae" else fuse_score_arrays(s_t, s_m, weights.w_t, weights.w_m)

    return [
        Candidate(int(i), index[int(i)].template_id, float(scores[i]), float(s_t[i]),
                  None if s_m is None else float(s_m[i]), 1)
        for i in _order(scores)
    ]


def two_stage_search(probe: Template, gallery: Union[GalleryIndex, Sequence[Template]],
                     k: int = 500, weights: Optional[Scorer] = None) -> List[Candidate]:
    """
    Texture shortlist of size k re-sorted by fused score. Candidates past
    the shortlist keep their stage-one order after the re-sorted block.
    """
    index = _as_index(gallery)
    if not 1 <= k <= len(index):
        raise ParameterError(f"k must be in [1, {len(index)}], got {k}")
    weights = weights or Scorer()

    s_t = index.texture_scores(probe)
    stage1 = _order(s_t)
    shortlist = stage1[:k]
    shortlisted = [index[int(i)] for i in shortlist]
    s_m = weights.minutiae_scores(probe, shortlisted)
    fused = fuse_score_arrays(s_t[shortlist], s_m, weights.w_t, weights.w_m)

    # re-sort by fused score, ties by gallery insertion index
    resorted = np.lexsort((shortlist, -fused))
    ranked = [
        Candidate(int(shortlist[j]), index[int(shortlist[j])].template_id, float(fused[j]),
                  float(s_t[shortlist[j]]), float(s_m[j]), 2)
        for j in resorted
    ]
    ranked.extend(
        Candidate(int(i), index[int(i)].template_id, float(s_t[i]), float(s_t[i]), None, 1)
        for i in stage1[k:]
    )
    return ranked


def mate_rank(candidates: Sequence[Candidate], mates: Sequence[int]) -> Optional[int]:
    """1-based rank of the first mate, None when absent"""
    wanted = set(mates)
    for rank, c in enumerate(candidates, start=1):
        if c.index in wanted:
            return rank
    return None


def shortlist_recall(probes: Sequence[Template], gallery: Union[GalleryIndex, Sequence[Template]],
                     ks: Sequence[int]) -> Dict[int, float]:
    """Fraction of mated probes whose mate survives a texture shortlist of size k"""
    index = _as_index(gallery)
    best_ranks = []
    for probe in probes:
        mates = index.mates(probe)
        if not mates:
            continue
        order = _order(index.texture_scores(probe))
        positions = np.empty(len(order), dtype=np.int64)
        positions[order] = np.arange(len(order))
        best_ranks.append(int(positions[mates].min()) + 1)
    if not best_ranks:
        return {int(k): 0.0 for k in ks}
    ranks = np.asarray(best_ranks)
    return {int(k): float(np.mean(ranks <= k)) for k in ks}
