"""
Batch pipeline: preprocessing stages, template building, reports and the run ledger
"""
import json
import math

import numpy as np
import pandas as pd
import pytest

from c2cl.exceptions import DimensionMismatchError, ParameterError
from c2cl.schemas import BatchSummary, DatasetManifest, FailureRecord, ManifestEntry, PipelineConfig
from c2cl.services.geometry import AffineParams, TPSField, WarpParams
from c2cl.services.imaging import GrayImage, load_image
from c2cl.services.pipeline import (
    build_templates,
    multi_finger_report,
    preprocess_one,
    record_run,
    run_ablation,
    run_search,
    run_seg_eval,
    run_verification,
    write_json,
)
from c2cl.services.segmentation import Mask
from c2cl.services.synthetic import finger_blob, write_synthetic_dataset
from c2cl.services.template_store import TemplateStore


def _first_contactless(manifest_path):
    manifest = DatasetManifest.load_jsonl(manifest_path)
    entry = manifest.of_kind("contactless")[0]
    return manifest, entry, load_image(manifest.resolve(entry.image_path))


# ==================== preprocess_one ====================

class TestPreprocess:

    def test_contact_image_passes_through(self, pipeline_config, rng):
        img = GrayImage(rng.uniform(size=(300, 280)), ppi=500.0)
        result = preprocess_one(img, pipeline_config, "contact")
        assert result.image is img
        assert result.stages == ()
        assert result.warp_params.affine.is_identity()
        assert result.warp_params.field.is_zero
        assert result.mask.area == 300 * 280

    def test_no_stages_only_resizes(self, app_config):
        cfg = PipelineConfig.from_app_config(app_config, stages=())
        img, _ = finger_blob(320, 400)
        result = preprocess_one(img, cfg, "contactless")
        assert result.stages == ()
        assert result.image.shape == (480, 480)
        assert result.image.ppi is None
        assert result.pad_record.content_height == 480

    def test_segment_only_crops_to_finger(self, app_config):
        cfg = PipelineConfig.from_app_config(app_config, stages=("segment",))
        img, _ = finger_blob(400, 480, rng=np.random.default_rng(2))
        result = preprocess_one(img, cfg, "contactless")
        assert result.stages == ("segment",)
        # bounding box of the blob is taller than wide
        assert result.pad_record.content_height == 480
        assert result.pad_record.content_width < 480

    def test_full_stages_normalize_to_500ppi(self, pipeline_config, synthetic_dataset):
        _, _, img = _first_contactless(synthetic_dataset)
        result = preprocess_one(img, pipeline_config, "contactless")
        assert result.stages == ("segment", "enhance", "scale", "warp")
        assert result.image.shape == (480, 480)
        assert result.image.ppi == 500.0
        assert 3.0 <= result.ridge_period <= 25.0
        assert math.isclose(result.warp_params.affine.s, pipeline_config.target_ridge_period / result.ridge_period,
                            rel_tol=1e-9)
        audit = result.audit()
        assert audit["stages"] == list(result.stages)
        s = result.warp_params.affine.s
        assert audit["warp_matrix"][0][2] == pytest.approx(239.5 * (1.0 - s) + result.warp_params.affine.tx)
        json.dumps(audit)

    def test_given_mask_replaces_segmenter(self, app_config):
        cfg = PipelineConfig.from_app_config(app_config, stages=("segment",))
        img, tip = finger_blob(320, 480)
        result = preprocess_one(img, cfg, "contactless", mask=tip)
        assert result.mask is tip

    def test_mask_dimension_mismatch(self, pipeline_config):
        img, _ = finger_blob(320, 480)
        with pytest.raises(DimensionMismatchError):
            preprocess_one(img, pipeline_config, "contactless", mask=Mask.full(100, 100))

    def test_warp_file_parameters_are_used(self, app_config, tmp_path):
        cfg = PipelineConfig.from_app_config(app_config, stages=("scale", "warp"))
        given = WarpParams(AffineParams(1.1, 0.05, 2.0, -3.0),
                           TPSField.zero(480, 480, cfg.tps_grid, cfg.tps_inset), (480, 480), cfg.tps_inset)
        img, _ = finger_blob(320, 480)
        result = preprocess_one(img, cfg, "contactless", warp_params=given)
        assert result.warp_params.affine == given.affine
        assert result.ridge_period is None


# ==================== build_templates ====================

class TestBuildTemplates:

    def test_failures_do_not_abort_batch(self, pipeline_config, synthetic_dataset):
        manifest = DatasetManifest.load_jsonl(synthetic_dataset)
        broken = ManifestEntry(subject_id="S9999", finger_position="R-index", impression_index=0,
                               capture_kind="contact", image_path="contact/missing.png")
        contact = manifest.of_kind("contact")[:1]
        patched = DatasetManifest(entries=list(contact) + [broken], root=manifest.root)

        templates, failures, _ = build_templates(patched, pipeline_config)
        assert list(templates) == [contact[0].item_id]
        assert len(failures) == 1
        assert failures[0].item_id == broken.item_id
        assert failures[0].stage == "load"

    def test_store_is_reused_on_second_build(self, pipeline_config, synthetic_dataset, tmp_path):
        manifest = DatasetManifest.load_jsonl(synthetic_dataset)
        entries = manifest.of_kind("contact")[:2]
        store = TemplateStore(tmp_path / "templates")

        first, failures, timer = build_templates(manifest, pipeline_config, entries, store)
        assert not failures
        assert "load_template" not in timer.as_dict()
        second, _, timer = build_templates(manifest, pipeline_config, entries, store)
        assert "load_template" in timer.as_dict()
        for item_id, template in first.items():
            assert np.array_equal(template.embedding.values, second[item_id].embedding.values)
            assert template.minutiae.to_text() == second[item_id].minutiae.to_text()

    def test_changed_config_invalidates_store(self, app_config, pipeline_config, synthetic_dataset, tmp_path):
        manifest = DatasetManifest.load_jsonl(synthetic_dataset)
        entries = manifest.of_kind("contact")[:1]
        store = TemplateStore(tmp_path / "templates")
        build_templates(manifest, pipeline_config, entries, store)

        changed = PipelineConfig.from_app_config(app_config, clahe_clip_limit=3.0)
        _, _, timer = build_templates(manifest, changed, entries, store)
        assert "load_template" not in timer.as_dict()


# ==================== Reports ====================

class TestReports:

    def test_write_json_nulls_non_finite(self, tmp_path):
        path = write_json({"b": float("nan"), "a": [1.0, float("inf")]}, tmp_path / "r.json")
        assert json.loads(path.read_text()) == {"a": [1.0, None], "b": None}
        assert path.read_text().index('"a"') < path.read_text().index('"b"')

    def test_single_finger_is_insufficient(self, pipeline_config, single_finger_dataset, tmp_path):
        manifest = DatasetManifest.load_jsonl(single_finger_dataset)
        run = run_verification(manifest, pipeline_config, tmp_path / "v")
        assert run.report.insufficient
        assert run.report.counts["protocol_imposter"] == 0
        assert run.report.metrics["eer"] is None
        report = json.loads((tmp_path / "v" / "report.json").read_text())
        assert report["insufficient"] is True

    def test_seg_eval_on_synthetic_masks(self, pipeline_config, synthetic_dataset, tmp_path):
        manifest = DatasetManifest.load_jsonl(synthetic_dataset)
        report = run_seg_eval(manifest, pipeline_config, tmp_path / "seg")
        assert report["evaluated"] == 3
        assert report["mean_iou"] > 0.85
        assert report["batch"]["failed"] == 0
        assert (tmp_path / "seg" / "seg_eval.csv").exists()

    def test_seg_eval_reports_warp_correspondence(self, pipeline_config, synthetic_dataset, tmp_path):
        manifest = DatasetManifest.load_jsonl(synthetic_dataset)
        report = run_seg_eval(manifest, pipeline_config, tmp_path / "seg")
        corr = report["minutiae_correspondence"]
        assert corr["baseline"]["stages"] == ["segment", "enhance", "scale"]
        assert corr["full"]["stages"] == list(pipeline_config.stages)
        assert 1 <= corr["full"]["pairs"] <= 3
        assert (tmp_path / "seg" / "minutiae_correspondence.csv").exists()

    def test_seg_eval_without_warp_skips_correspondence(self, app_config, synthetic_dataset):
        cfg = PipelineConfig.from_app_config(app_config, stages=("segment",))
        report = run_seg_eval(DatasetManifest.load_jsonl(synthetic_dataset), cfg)
        assert "minutiae_correspondence" not in report

    def test_multi_finger_report_fuses_same_finger_trials(self):
        rows = []
        for finger, genuine_score in (("R-index", 0.9), ("L-index", 0.7)):
            for probe in ("S0", "S1"):
                for gallery in ("S0", "S1"):
                    same = probe == gallery
                    rows.append({"probe_subject": probe, "gallery_subject": gallery, "probe_impression": 0,
                                 "gallery_impression": 0, "label": "genuine" if same else "imposter",
                                 "finger": finger, "gallery_finger": finger,
                                 "fused": genuine_score if same else 0.2})
        # a cross-position trial is left out
        rows.append({**rows[0], "gallery_finger": "L-index", "fused": 0.0})
        report = multi_finger_report(pd.DataFrame(rows), ["R-index", "L-index"], "mean")
        assert report["trials"] == 4
        assert report["rule"] == "mean"
        assert report["metrics"]["eer"] == pytest.approx(0.0, abs=1e-12)
        assert set(report["single_finger_eer"]) == {"R-index", "L-index"}

    def test_multi_finger_report_unknown_finger(self):
        scores = pd.DataFrame([{"probe_subject": "S0", "gallery_subject": "S0", "probe_impression": 0,
                                "gallery_impression": 0, "label": "genuine", "finger": "R-index",
                                "gallery_finger": "R-index", "fused": 0.5}])
        with pytest.raises(ParameterError):
            multi_finger_report(scores, ["R-index", "L-index"])

    def test_ablation_needs_extra_stages(self, app_config, synthetic_dataset, tmp_path):
        cfg = PipelineConfig.from_app_config(app_config, stages=("segment", "enhance"))
        with pytest.raises(ParameterError):
            run_ablation(DatasetManifest.load_jsonl(synthetic_dataset), cfg, tmp_path / "ab")

    @pytest.mark.slow
    def test_ablation_compares_warp_against_baseline(self, pipeline_config, synthetic_dataset, tmp_path):
        report = run_ablation(DatasetManifest.load_jsonl(synthetic_dataset), pipeline_config, tmp_path / "ab")
        assert report["trials"] == 9
        assert report["full"]["stages"] == list(pipeline_config.stages)
        assert report["insufficient"] is False
        assert 0.0 <= report["test"]["p_value"] <= 1.0
        assert (tmp_path / "ab" / "segment+enhance+scale" / "scores.csv").exists()
        assert json.loads((tmp_path / "ab" / "ablation.json").read_text())["trials"] == 9

    @pytest.mark.slow
    def test_verification_over_two_fingers(self, pipeline_config, tmp_path_factory):
        dataset = write_synthetic_dataset(tmp_path_factory.mktemp("synth_two"), fingers=3, seed=5,
                                          finger_positions=("R-index", "L-index"))
        out = tmp_path_factory.mktemp("v_two")
        run = run_verification(DatasetManifest.load_jsonl(dataset), pipeline_config, out,
                               fingers=["R-index", "L-index"])
        assert run.report.multi_finger["trials"] == 9
        assert set(run.scores["gallery_finger"]) == {"R-index", "L-index"}
        assert json.loads((out / "multi_finger.json").read_text())["fingers"] == ["R-index", "L-index"]

    @pytest.mark.slow
    def test_verification_rerun_is_byte_identical(self, pipeline_config, synthetic_dataset, tmp_path):
        manifest = DatasetManifest.load_jsonl(synthetic_dataset)
        first = run_verification(manifest, pipeline_config, tmp_path / "a")
        run_verification(manifest, pipeline_config, tmp_path / "b")

        for name in ("report.json", "scores.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert first.report.counts["protocol_genuine"] == 3
        assert first.report.counts["protocol_imposter"] == 6
        assert len(first.scores) == 9
        assert first.scores["fused"].between(0.0, 1.0).all()
        assert not first.report.insufficient

    @pytest.mark.slow
    def test_search_reports_hit_rates(self, app_config, synthetic_dataset, tmp_path):
        cfg = PipelineConfig.from_app_config(app_config, search_k=2, ranks=[1, 2, 3])
        manifest = DatasetManifest.load_jsonl(synthetic_dataset)
        run = run_search(manifest, cfg, tmp_path / "s", exhaustive=True)
        report = run.report
        assert report.gallery_size == 3
        assert report.mated_probes == 3
        assert report.unmatchable == 0
        assert report.exhaustive_rank_hit_rates["3"] == 1.0
        assert report.rank_hit_rates["1"] <= report.rank_hit_rates["2"] <= report.rank_hit_rates["3"]
        assert set(report.exhaustive_rank_hit_rates) == {"1", "2", "3"}
        assert (tmp_path / "s" / "search_ranks.csv").exists()
        assert "timing" not in json.loads((tmp_path / "s" / "search_report.json").read_text())

    @pytest.mark.slow
    def test_fusion_separates_synthetic_prints(self, app_config, tmp_path_factory):
        dataset = write_synthetic_dataset(tmp_path_factory.mktemp("synth_100"), fingers=100, seed=0)
        cfg = PipelineConfig.from_app_config(app_config, jobs=4)
        run = run_verification(DatasetManifest.load_jsonl(dataset), cfg, tmp_path_factory.mktemp("v100"))
        report = run.report
        assert report.counts["scored_genuine"] == 100
        assert report.counts["scored_imposter"] == 9900
        assert report.metrics["eer"] <= 0.05
        assert report.metrics["eer"] <= min(report.texture_only["eer"], report.minutiae_only["eer"])


# ==================== Run ledger ====================

class TestRunLedger:

    def test_record_run_writes_rows(self, pipeline_config, tmp_path):
        from c2cl.database import SessionLocal
        from c2cl.models import FailureLog, RunRecord

        summary = BatchSummary(total=2, processed=1, failed=1, failures=[
            FailureRecord(item_id="S0001_R-index_cl0", stage="segment",
                          error_type="SegmentationFailedError", message="no foreground"),
        ])
        db_path = str(tmp_path / "ledger.db")
        run_id = record_run("verify", pipeline_config, summary, eer=0.1, db_path=db_path)
        assert run_id is not None

        with SessionLocal() as db:
            run = db.get(RunRecord, run_id)
            assert run.status == "partial"
            assert run.eer == pytest.approx(0.1)
            assert run.config_hash == pipeline_config.config_hash()
            logs = db.query(FailureLog).filter_by(run_id=run_id).all()
            assert [(f.item_id, f.stage) for f in logs] == [("S0001_R-index_cl0", "segment")]

    def test_clean_run_is_success(self, pipeline_config, tmp_path):
        from c2cl.database import SessionLocal
        from c2cl.models import RunRecord

        run_id = record_run("seg-eval", pipeline_config, BatchSummary(total=3, processed=3, failed=0),
                            mean_iou=0.9, db_path=str(tmp_path / "ledger.db"))
        with SessionLocal() as db:
            assert db.get(RunRecord, run_id).status == "success"
