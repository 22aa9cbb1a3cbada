"""
Identification: rank-N, two-stage shortlist re-ranking, shortlist recall
"""
import numpy as np
import pytest

from c2cl.exceptions import DimensionMismatchError, ParameterError
from c2cl.services.representation import Embedding
from c2cl.services.search import (
    GalleryIndex, Scorer, Template, mate_rank, rank_n_search, shortlist_recall, two_stage_search,
)
from tests.conftest import make_template


@pytest.fixture
def gallery(rng):
    return [make_template(rng, f"G{i:03d}", f"S{i:03d}", "contact") for i in range(12)]


def _probe_of(rng, mate, noise=0.3):
    emb = Embedding.from_raw(mate.embedding.values + noise * rng.normal(size=mate.embedding.dim) / 4)
    return make_template(rng, f"P-{mate.subject_id}", mate.subject_id, "contactless",
                         embedding=emb, minutiae=mate.minutiae)


class TestRankN:
    def test_texture_ordering(self, rng, gallery):
        probe = _probe_of(rng, gallery[4])
        ranked = rank_n_search(probe, gallery, scorer="texture")
        scores = [c.score for c in ranked]
        assert scores == sorted(scores, reverse=True)
        assert ranked[0].template_id == "G004"
        assert ranked[0].s_m is None

    def test_fused_mate_first(self, rng, gallery):
        probe = _probe_of(rng, gallery[7])
        ranked = rank_n_search(probe, gallery)
        assert ranked[0].index == 7
        assert ranked[0].s_m == 1.0
        assert mate_rank(ranked, GalleryIndex(gallery).mates(probe)) == 1

    def test_ties_keep_insertion_order(self, rng):
        emb = Embedding.from_raw(rng.normal(size=16))
        same = [make_template(rng, f"G{i}", f"S{i}", "contact", embedding=emb) for i in range(4)]
        ranked = rank_n_search(make_template(rng, "P", "X", "contactless", embedding=emb), same, "texture")
        assert [c.index for c in ranked] == [0, 1, 2, 3]

    def test_unknown_scorer(self, rng, gallery):
        with pytest.raises(ParameterError):
            rank_n_search(gallery[0], gallery, scorer="best")


class TestTwoStage:
    def test_full_shortlist_equals_exhaustive_fused(self, rng, gallery):
        probe = _probe_of(rng, gallery[2])
        scorer = Scorer(0.5, 0.5, seed=1)
        two_stage = two_stage_search(probe, gallery, k=len(gallery), weights=scorer)
        exhaustive = rank_n_search(probe, gallery, "fused", scorer)
        assert [c.index for c in two_stage] == [c.index for c in exhaustive]
        np.testing.assert_allclose([c.score for c in two_stage], [c.score for c in exhaustive])
        assert all(c.stage == 2 for c in two_stage)

    def test_tail_keeps_stage_one_order(self, rng, gallery):
        probe = _probe_of(rng, gallery[0])
        ranked = two_stage_search(probe, gallery, k=3)
        assert len(ranked) == len(gallery)
        assert [c.stage for c in ranked] == [2] * 3 + [1] * 9
        tail = [c.s_t for c in ranked[3:]]
        assert tail == sorted(tail, reverse=True)
        assert {c.index for c in ranked} == set(range(12))

    @pytest.mark.parametrize("k", [0, 13])
    def test_k_out_of_range(self, rng, gallery, k):
        with pytest.raises(ParameterError):
            two_stage_search(gallery[0], gallery, k=k)

    def test_mixed_dims(self, rng, gallery):
        odd = make_template(rng, "G-odd", "S-odd", "contact", dim=24)
        with pytest.raises(DimensionMismatchError):
            GalleryIndex(gallery + [odd])
        with pytest.raises(DimensionMismatchError):
            two_stage_search(odd, gallery, k=3)


class TestRecall:
    def test_monotone_in_k(self, rng, gallery):
        probes = [_probe_of(rng, g, noise=2.0) for g in gallery]
        recall = shortlist_recall(probes, gallery, [1, 3, 6, 12])
        values = [recall[k] for k in (1, 3, 6, 12)]
        assert values == sorted(values)
        assert recall[12] == 1.0

    def test_no_mates(self, rng, gallery):
        stranger = make_template(rng, "P", "nobody", "contactless")
        assert shortlist_recall([stranger], gallery, [1, 5]) == {1: 0.0, 5: 0.0}
        assert mate_rank(rank_n_search(stranger, gallery, "texture"), []) is None


class TestTemplate:
    def test_capture_kind(self, rng):
        with pytest.raises(ParameterError):
            make_template(rng, "T", "S", "latent")

    def test_finger_key(self, rng):
        t = make_template(rng, "T", "S7", "contact")
        assert t.finger_key == ("S7", "R-index")
        assert isinstance(t, Template)
