"""
Template persistence
"""
import numpy as np
import pytest

from c2cl.exceptions import TemplateFormatError
from c2cl.services.template_store import TemplateStore, decode_template, encode_template, read_config_hash
from tests.conftest import make_template


class TestCodec:
    def test_decode_restores_fields(self, rng):
        template = make_template(rng, "S0001_R-index_contact_0", "S0001", "contact", dim=512, impression=2)
        decoded = decode_template(encode_template(template, "abc123"))
        assert decoded.template_id == template.template_id
        assert decoded.impression_index == 2
        assert decoded.capture_kind == "contact"
        np.testing.assert_allclose(decoded.embedding.values, template.embedding.values, atol=1e-6)
        assert np.linalg.norm(decoded.embedding.values) == pytest.approx(1.0)
        assert len(decoded.minutiae) == len(template.minutiae)
        np.testing.assert_allclose(decoded.minutiae.positions(), template.minutiae.positions(), atol=1e-3)
        assert [m.kind for m in decoded.minutiae] == [m.kind for m in template.minutiae]

    def test_bad_magic(self, rng):
        data = encode_template(make_template(rng, "T", "S", "contact"))
        with pytest.raises(TemplateFormatError):
            decode_template(b"XXXX" + data[4:])

    def test_truncated(self, rng):
        data = encode_template(make_template(rng, "T", "S", "contact"))
        with pytest.raises(TemplateFormatError):
            decode_template(data[:-3])

    def test_trailing_bytes(self, rng):
        data = encode_template(make_template(rng, "T", "S", "contact"))
        with pytest.raises(TemplateFormatError):
            decode_template(data + b"\x00")

    def test_unsupported_version(self, rng):
        data = bytearray(encode_template(make_template(rng, "T", "S", "contact")))
        data[4] = 9
        with pytest.raises(TemplateFormatError):
            decode_template(bytes(data))


class TestStore:
    def test_save_and_load(self, tmp_path, rng):
        store = TemplateStore(tmp_path / "templates")
        templates = [make_template(rng, f"T{i}", f"S{i}", "contactless") for i in range(3)]
        for t in templates:
            store.save(t, config_hash="h1")
        assert len(store) == 3
        assert "T1" in store
        assert store.config_hash("T2") == "h1"

        reopened = TemplateStore(tmp_path / "templates")
        assert reopened.ids() == ["T0", "T1", "T2"]
        assert [t.subject_id for t in reopened] == ["S0", "S1", "S2"]

    def test_unsafe_id_becomes_file_name(self, tmp_path, rng):
        store = TemplateStore(tmp_path)
        path = store.save(make_template(rng, "a/b c", "S", "contact"))
        assert path.parent == tmp_path
        assert read_config_hash(path) is None
        assert store.load("a/b c").template_id == "a/b c"

    def test_missing_id(self, tmp_path):
        with pytest.raises(TemplateFormatError):
            TemplateStore(tmp_path).load("nope")

    def test_corrupt_index(self, tmp_path):
        (tmp_path / "index.json").write_text("{not json")
        with pytest.raises(TemplateFormatError):
            TemplateStore(tmp_path)
