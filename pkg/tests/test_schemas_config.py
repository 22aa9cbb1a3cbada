"""
Configuration loading, env overrides and schema validation
"""
import json

import pytest
from pydantic import ValidationError

from c2cl.config_loader import apply_env_overrides, config_from_dict, load_config_file, reload_config
from c2cl.exceptions import ManifestError, ParameterError
from c2cl.schemas import BatchSummary, DatasetManifest, ManifestEntry, PipelineConfig


# ==================== AppConfig ====================

class TestAppConfig:
    def test_defaults(self):
        cfg = config_from_dict({})
        assert cfg.imaging.canvas == 480
        assert cfg.geometry.tps_grid == 4
        assert cfg.fusion.w_t == 0.5 and cfg.fusion.w_m == 0.5
        assert cfg.search.k == 500
        assert cfg.pipeline.stages == ["segment", "enhance", "scale", "warp"]

    def test_sections_override_defaults(self):
        cfg = config_from_dict({"imaging": {"clahe_tiles": [4, 6]}, "minutiae": {"ransac_iterations": 50}})
        assert cfg.imaging.clahe_tiles == (4, 6)
        assert cfg.minutiae.ransac_iterations == 50
        assert cfg.minutiae.descriptor_k == 5

    def test_load_file(self, config_file):
        cfg = load_config_file(str(config_file))
        assert cfg.logging.level == "WARNING"
        assert cfg.pipeline.jobs == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config_file(str(tmp_path / "nope.yaml"))

    def test_env_overrides(self, monkeypatch, tmp_path):
        monkeypatch.setenv("C2CL_SEED", "17")
        monkeypatch.setenv("C2CL_JOBS", "3")
        monkeypatch.setenv("C2CL_STRICT", "yes")
        monkeypatch.setenv("C2CL_OUTPUT_DIR", str(tmp_path / "runs"))
        cfg = apply_env_overrides(config_from_dict({}))
        assert cfg.pipeline.seed == 17
        assert cfg.pipeline.jobs == 3
        assert cfg.pipeline.strict is True
        assert cfg.pipeline.template_dir == str(tmp_path / "runs" / "templates")

    def test_env_overrides_return_a_copy(self, monkeypatch):
        monkeypatch.setenv("C2CL_SEED", "17")
        monkeypatch.setenv("C2CL_LOG_LEVEL", "ERROR")
        original = config_from_dict({})
        overridden = apply_env_overrides(original)
        assert overridden.pipeline.seed == 17 and overridden.logging.level == "ERROR"
        assert original.pipeline.seed == 0 and original.logging.level == "INFO"

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("imaging:\n  clahe_tiles: [8, 8\n", encoding="utf-8")
        with pytest.raises(ParameterError):
            load_config_file(str(path))

    def test_yaml_must_be_a_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- imaging\n- minutiae\n", encoding="utf-8")
        with pytest.raises(ParameterError):
            load_config_file(str(path))

    def test_reload_follows_config_env(self, monkeypatch, config_file):
        monkeypatch.setenv("C2CL_CONFIG", str(config_file))
        try:
            assert reload_config().logging.level == "WARNING"
        finally:
            monkeypatch.delenv("C2CL_CONFIG")
            reload_config()


# ==================== PipelineConfig ====================

class TestPipelineConfig:
    def test_from_app_config(self, pipeline_config):
        assert pipeline_config.jobs == 2
        assert pipeline_config.period["block"] == 32
        assert pipeline_config.matching["tol_px"] == 12.0
        assert pipeline_config.segmentation["distal_fraction"] == 0.6

    def test_hash_ignores_jobs_and_paths(self, app_config):
        a = PipelineConfig.from_app_config(app_config)
        b = PipelineConfig.from_app_config(app_config, jobs=1, output_dir="/elsewhere", strict=True)
        assert a.config_hash() == b.config_hash()

    def test_hash_tracks_results(self, app_config):
        a = PipelineConfig.from_app_config(app_config)
        assert a.config_hash() != PipelineConfig.from_app_config(app_config, seed=9).config_hash()
        assert a.config_hash() != PipelineConfig.from_app_config(app_config, w_t=0.7).config_hash()

    @pytest.mark.parametrize("field, value", [
        ("clahe_clip_limit", 0.0),
        ("target_ridge_period", 30.0),
        ("w_t", -0.1),
        ("search_k", 0),
        ("ranks", [0, 5]),
        ("stages", ("segment", "blur")),
        ("jobs", 0),
        ("tps_grid", 1),
        ("map_sigma", 0.0),
    ])
    def test_rejects(self, field, value):
        with pytest.raises(ValidationError):
            PipelineConfig(**{field: value})

    def test_zero_weights(self):
        with pytest.raises(ValidationError):
            PipelineConfig(w_t=0.0, w_m=0.0)

    def test_file_warps_need_a_directory(self):
        with pytest.raises(ValidationError):
            PipelineConfig(warp_source="file")
        assert PipelineConfig(warp_source="file", stages=("segment",)).warp_source == "file"

    def test_stage_order_is_canonical(self):
        cfg = PipelineConfig(stages=("warp", "segment"))
        assert cfg.stages == ("segment", "warp")
        assert cfg.stage_enabled("warp") and not cfg.stage_enabled("scale")

    def test_ranks_sorted_unique(self):
        assert PipelineConfig(ranks=[10, 1, 10]).ranks == [1, 10]


# ==================== Manifest ====================

def _write_manifest(tmp_path, rows):
    path = tmp_path / "manifest.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    return path


class TestManifest:
    def _row(self, **overrides):
        row = {"subject_id": "S1", "finger_position": "R-index", "impression_index": 0,
               "capture_kind": "contactless", "image_path": "a.png"}
        row.update(overrides)
        return row

    def test_load(self, tmp_path):
        (tmp_path / "a.png").write_bytes(b"x")
        (tmp_path / "b.png").write_bytes(b"x")
        manifest = DatasetManifest.load_jsonl(_write_manifest(
            tmp_path, [self._row(), self._row(capture_kind="contact", image_path="b.png")]))
        assert len(manifest) == 2
        assert manifest.resolve("a.png") == tmp_path.resolve() / "a.png"
        assert [e.item_id for e in manifest] == ["S1_R-index_cl0", "S1_R-index_c0"]
        assert len(manifest.of_kind("contact")) == 1

    def test_duplicate_tuple(self, tmp_path):
        path = _write_manifest(tmp_path, [self._row(), self._row(image_path="other.png")])
        with pytest.raises(ManifestError):
            DatasetManifest.load_jsonl(path, check_paths=False)

    def test_missing_path(self, tmp_path):
        with pytest.raises(ManifestError):
            DatasetManifest.load_jsonl(_write_manifest(tmp_path, [self._row()]))

    def test_bad_json_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"subject_id": "S1"\n', encoding="utf-8")
        with pytest.raises(ManifestError):
            DatasetManifest.load_jsonl(path)

    def test_entry_validation(self):
        with pytest.raises(ValidationError):
            ManifestEntry(**self._row(capture_kind="latent"))
        with pytest.raises(ValidationError):
            ManifestEntry(**self._row(subject_id="  "))
        with pytest.raises(ValidationError):
            ManifestEntry(**self._row(impression_index=-1))

    def test_round_trip(self, tmp_path):
        manifest = DatasetManifest(entries=[ManifestEntry(**self._row(mask_path="m.png"))])
        restored = DatasetManifest.load_jsonl(manifest.to_jsonl(tmp_path / "out.jsonl"), check_paths=False)
        assert restored.entries[0] == manifest.entries[0]


class TestBatchSummary:
    def test_reconciles(self):
        assert BatchSummary(total=3, processed=2, failed=1).failed == 1
        with pytest.raises(ValidationError):
            BatchSummary(total=3, processed=2, failed=0)
