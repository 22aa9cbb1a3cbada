"""
Texture embeddings: extraction, import/export, similarity
"""
import json
import struct

import numpy as np
import pytest

from c2cl.exceptions import DimensionMismatchError, EmbeddingFormatError, ParameterError
from c2cl.services.imaging import GrayImage
from c2cl.services.representation import (
    EMBEDDING_DIM, Embedding, extract_texture_embedding, import_embedding, save_embedding,
    similarity_matrix, texture_similarity,
)
from c2cl.services.synthetic import master_print


@pytest.fixture(scope="module")
def print_pixels():
    master = master_print(np.random.default_rng(11))
    return master.ridge * master.mask


class TestExtraction:
    def test_unit_norm_and_dim(self, print_pixels):
        emb = extract_texture_embedding(GrayImage(print_pixels), finger_id="S0001")
        assert emb.dim == EMBEDDING_DIM
        assert np.linalg.norm(emb.values) == pytest.approx(1.0)
        assert emb.finger_id == "S0001"
        assert not emb.featureless

    def test_deterministic(self, print_pixels):
        img = GrayImage(print_pixels)
        np.testing.assert_array_equal(extract_texture_embedding(img).values, extract_texture_embedding(img).values)

    def test_small_shift_keeps_similarity(self, print_pixels):
        shifted = np.zeros_like(print_pixels)
        shifted[2:, 2:] = print_pixels[:-2, :-2]
        a = extract_texture_embedding(GrayImage(print_pixels))
        b = extract_texture_embedding(GrayImage(shifted))
        assert texture_similarity(a, b) >= 0.95

    def test_featureless(self):
        emb = extract_texture_embedding(GrayImage(np.zeros((64, 64))))
        assert emb.featureless
        np.testing.assert_allclose(emb.values, 1.0 / np.sqrt(EMBEDDING_DIM))

    def test_too_small(self):
        with pytest.raises(ParameterError):
            extract_texture_embedding(GrayImage(np.zeros((20, 20))))


class TestEmbeddingType:
    def test_rejects_unnormalized(self):
        with pytest.raises(EmbeddingFormatError):
            Embedding(np.array([1.0, 1.0]))

    def test_from_raw_zero(self):
        with pytest.raises(EmbeddingFormatError):
            Embedding.from_raw(np.zeros(4))


class TestImport:
    def test_json_512(self, tmp_path, rng):
        path = tmp_path / "e.json"
        path.write_text(json.dumps(rng.normal(size=512).tolist()))
        emb = import_embedding(path)
        assert emb.dim == 512
        assert "imported" in emb.flags
        assert np.linalg.norm(emb.values) == pytest.approx(1.0)

    def test_c2em_192(self, tmp_path, rng):
        original = Embedding.from_raw(rng.normal(size=192))
        emb = import_embedding(save_embedding(original, tmp_path / "e.c2em"))
        assert emb.dim == 192
        np.testing.assert_allclose(emb.values, original.values, atol=1e-6)

    def test_wrong_length(self, tmp_path):
        path = tmp_path / "e.json"
        path.write_text(json.dumps([0.1] * 100))
        with pytest.raises(EmbeddingFormatError):
            import_embedding(path)

    def test_non_finite(self, tmp_path):
        values = [0.1] * 512
        values[7] = float("nan")
        path = tmp_path / "e.json"
        path.write_text(json.dumps(values))
        with pytest.raises(EmbeddingFormatError):
            import_embedding(path)

    def test_truncated_binary(self, tmp_path):
        path = tmp_path / "e.c2em"
        path.write_bytes(b"C2EM" + struct.pack("<I", 512) + b"\x00" * 100)
        with pytest.raises(EmbeddingFormatError):
            import_embedding(path)

    def test_not_an_embedding(self, tmp_path):
        path = tmp_path / "e.bin"
        path.write_bytes(b"\xff\xfe garbage")
        with pytest.raises(EmbeddingFormatError):
            import_embedding(path)


class TestSimilarity:
    def test_closed_forms(self, rng):
        a = Embedding.from_raw(rng.normal(size=16))
        assert texture_similarity(a, a) == pytest.approx(1.0)
        assert texture_similarity(a, Embedding(-a.values)) == pytest.approx(0.0)
        e0, e1 = np.eye(16)[0], np.eye(16)[1]
        assert texture_similarity(Embedding(e0), Embedding(e1)) == pytest.approx(0.5)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionMismatchError):
            texture_similarity(Embedding.from_raw(rng.normal(size=8)), Embedding.from_raw(rng.normal(size=9)))
        with pytest.raises(DimensionMismatchError):
            similarity_matrix([Embedding.from_raw(rng.normal(size=8))], [Embedding.from_raw(rng.normal(size=9))])

    def test_invariant_under_orthogonal_rotation(self, rng):
        q, _ = np.linalg.qr(rng.normal(size=(32, 32)))
        probes = [Embedding.from_raw(rng.normal(size=32)) for _ in range(4)]
        gallery = [Embedding.from_raw(rng.normal(size=32)) for _ in range(5)]
        rotate = lambda es: [Embedding.from_raw(q @ e.values) for e in es]
        np.testing.assert_allclose(similarity_matrix(rotate(probes), rotate(gallery)),
                                   similarity_matrix(probes, gallery), atol=1e-9)

    def test_matrix_matches_pairwise(self, rng):
        probes = [Embedding.from_raw(rng.normal(size=8)) for _ in range(3)]
        gallery = [Embedding.from_raw(rng.normal(size=8)) for _ in range(2)]
        matrix = similarity_matrix(probes, gallery)
        assert matrix.shape == (3, 2)
        assert matrix[2, 1] == pytest.approx(texture_similarity(probes[2], gallery[1]))
