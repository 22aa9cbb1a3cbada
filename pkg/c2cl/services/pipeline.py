"""
Pipeline Service - preprocessing, template building, verification and search runs
流水线服务 - 预处理、模板构建、验证与检索

Order per contactless image: segment -> mask -> crop -> CLAHE -> invert ->
re-mask -> 480 canvas -> ridge-period scaling -> TPS warp. Contact images
pass through unchanged unless configured otherwise.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sqlalchemy.exc import SQLAlchemyError

from ..exceptions import C2CLError, DimensionMismatchError, ParameterError
from ..logging_utils import LogContext, StageTimer, log_function_call
from ..schemas import BatchSummary, DatasetManifest, FailureRecord, ManifestEntry, PipelineConfig, \
    SearchReport, VerificationReport
from .geometry import (
    AffineParams, TPSField, WarpParams, affine_matrix, canvas_center, canvas_scale_params, estimate_tps_field,
    load_warp_params, warp_image,
)
from .imaging import GrayImage, PadRecord, apply_mask, clahe, crop_to_bbox, invert, load_image, resize_pad
from .matcheval import (
    ScoreSet, fuse_score_arrays, gen_protocol, mann_whitney_roc_test, metric_report, multi_finger_protocol_scores,
)
from .minutiae import align_minutiae, correspondence_metrics, extract_minutiae, match_minutiae
from .representation import Embedding, extract_texture_embedding, import_embedding
from .search import GalleryIndex, Scorer, Template, mate_rank, rank_n_search, shortlist_recall, two_stage_search
from .segmentation import Mask, iou, load_mask, segment_distal
from .template_store import TemplateStore

logger = logging.getLogger(__name__)

EMBEDDING_SUFFIXES = (".c2em", ".json")
ABLATION_BASELINE = ("segment", "enhance", "scale")


class ItemTracker:
    """Current stage of one item plus its timer; failures are logged with the stage name"""

    def __init__(self, item_id: str, timer: Optional[StageTimer] = None):
        self.item_id = item_id
        self.stage = "load"
        self.timer = timer or StageTimer(logger)

    @contextmanager
    def step(self, stage: str):
        self.stage = stage
        with LogContext(logger, stage, item_id=self.item_id), self.timer.stage(stage):
            yield

    def failure(self, exc: Exception) -> FailureRecord:
        return FailureRecord(item_id=self.item_id, stage=self.stage,
                             error_type=type(exc).__name__, message=str(exc))


# ==================== Preprocessing ====================

@dataclass(frozen=True, eq=False)
class PreprocessResult:
    image: GrayImage
    warp_params: WarpParams
    mask: Mask
    pad_record: Optional[PadRecord] = None
    stages: Tuple[str, ...] = ()
    ridge_period: Optional[float] = None

    def __iter__(self):
        return iter((self.image, self.warp_params, self.mask))

    def audit(self) -> Dict:
        return {
            "stages": list(self.stages),
            "ridge_period": self.ridge_period,
            "pad": self.pad_record.to_dict() if self.pad_record else None,
            "warp": self.warp_params.to_dict(),
            "warp_matrix": affine_matrix(
                self.warp_params.affine, canvas_center(*self.warp_params.canvas)).tolist(),
            "mask_low_confidence": self.mask.low_confidence,
        }


def preprocess_one(img: GrayImage, cfg: PipelineConfig, capture_kind: str = "contactless",
                   mask: Optional[Mask] = None, warp_params: Optional[WarpParams] = None,
                   tracker: Optional[ItemTracker] = None) -> PreprocessResult:
    """
    Run the enabled stages on one image. ``mask`` replaces the segmenter;
    ``warp_params`` replaces the estimated scale and TPS (warp_source "file").
    Returns the image plus every applied parameter for audit.
    """
    tracker = tracker or ItemTracker("image")
    canvas = cfg.canvas
    if capture_kind == "contact" and cfg.skip_contact_preprocess:
        return PreprocessResult(img, WarpParams.identity(img.width, img.height, cfg.tps_grid, cfg.tps_inset),
                                Mask.full(img.width, img.height))

    applied: List[str] = []
    work = img
    if cfg.stage_enabled("segment"):
        with tracker.step("segment"):
            if mask is None:
                mask = segment_distal(img, **cfg.segmentation)
            elif mask.shape != img.shape:
                raise DimensionMismatchError(f"Mask {mask.shape} does not match image {img.shape}")
            work, (x0, y0) = crop_to_bbox(apply_mask(img, mask), mask.bits)
            crop_bits = mask.bits[y0:y0 + work.height, x0:x0 + work.width]
        applied.append("segment")
    else:
        mask = Mask.full(img.width, img.height)
        crop_bits = mask.bits

    if cfg.stage_enabled("enhance"):
        with tracker.step("enhance"):
            work = invert(clahe(work, cfg.clahe_clip_limit, cfg.clahe_tiles))
            work = work.with_pixels(work.pixels * crop_bits)
        applied.append("enhance")

    with tracker.step("resize"):
        work, pad = resize_pad(work, canvas, fill=0.0)

    affine = AffineParams.identity()
    tps = TPSField.zero(canvas, canvas, cfg.tps_grid, cfg.tps_inset, cfg.tps_regularization)
    period = None
    if cfg.stage_enabled("scale"):
        with tracker.step("scale"):
            if warp_params is not None:
                affine = warp_params.affine
            else:
                affine, period = canvas_scale_params(work, cfg.target_ridge_period, **cfg.period)
        applied.append("scale")

    if cfg.stage_enabled("warp"):
        with tracker.step("warp"):
            if warp_params is not None:
                tps = warp_params.field
            elif cfg.tps_mode == "ridge":
                scaled = warp_image(work, affine, tps) if not affine.is_identity() else work
                estimated = estimate_tps_field(scaled, cfg.tps_grid, cfg.tps_inset, block=cfg.period.get("block", 32))
                tps = TPSField(estimated.n, estimated.displacements, estimated.control_points, cfg.tps_regularization)
        applied.append("warp")

    params = WarpParams(affine, tps, (canvas, canvas), cfg.tps_inset)
    if not (affine.is_identity() and tps.is_zero):
        with tracker.step("resample"):
            work = warp_image(work, affine, tps)
    if "scale" in applied:
        work = work.with_pixels(work.pixels, ppi=500.0)
    return PreprocessResult(work, params, mask, pad, tuple(applied), period)


# ==================== Extraction ====================

def extract_one(img: GrayImage, cfg: Optional[PipelineConfig] = None, entry: Optional[ManifestEntry] = None,
                embedding: Optional[Embedding] = None) -> Template:
    """Texture embedding (or the imported one) plus minutiae of a preprocessed image"""
    cfg = cfg or PipelineConfig()
    template_id = entry.item_id if entry else "image"
    if embedding is None:
        embedding = extract_texture_embedding(img, template_id)
    minutiae = extract_minutiae(img, **cfg.extraction, **cfg.period)

    flags = []
    if embedding.featureless:
        flags.append("featureless_embedding")
    if len(minutiae) == 0:
        flags.append("no_minutiae")
    flags.extend(f"minutiae:{f}" for f in minutiae.flags)
    if flags:
        logger.warning(f"Template {template_id}: {', '.join(flags)}")

    return Template(
        template_id=template_id,
        subject_id=entry.subject_id if entry else "",
        finger_position=entry.finger_position if entry else "",
        impression_index=entry.impression_index if entry else 0,
        capture_kind=entry.capture_kind if entry else "contactless",
        embedding=embedding,
        minutiae=minutiae,
        device=entry.device if entry else "",
        flags=tuple(flags),
    )


def _optional_file(directory: Optional[str], stem: str, suffixes: Sequence[str]) -> Optional[Path]:
    if not directory:
        return None
    for suffix in suffixes:
        candidate = Path(directory) / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    return None


def _process_entry(entry: ManifestEntry, manifest: DatasetManifest, cfg: PipelineConfig,
                   store: Optional[TemplateStore], config_hash: str):
    tracker = ItemTracker(entry.item_id)
    try:
        if store is not None and cfg.reuse_templates and entry.item_id in store \
                and store.config_hash(entry.item_id) == config_hash:
            with tracker.step("load_template"):
                return store.load(entry.item_id), None, tracker.timer

        with tracker.step("load"):
            img = load_image(manifest.resolve(entry.image_path))

        mask = None
        mask_path = _optional_file(cfg.mask_dir, entry.item_id, (".png", ".pgm"))
        if mask_path is not None:
            with tracker.step("mask"):
                mask = load_mask(mask_path)

        warp_params = None
        if cfg.warp_source == "file" and entry.capture_kind == "contactless":
            with tracker.step("warp_file"):
                path = _optional_file(cfg.warp_dir, entry.item_id, (".json",))
                if path is None:
                    raise ParameterError(f"No warp parameter file for {entry.item_id} in {cfg.warp_dir}")
                warp_params = load_warp_params(path)

        result = preprocess_one(img, cfg, entry.capture_kind, mask, warp_params, tracker)

        embedding = None
        if cfg.embedding_dir:
            with tracker.step("embedding"):
                path = _optional_file(cfg.embedding_dir, entry.item_id, EMBEDDING_SUFFIXES)
                if path is None:
                    raise ParameterError(f"No imported embedding for {entry.item_id} in {cfg.embedding_dir}")
                embedding = import_embedding(path, entry.item_id)

        with tracker.step("extract"):
            template = extract_one(result.image, cfg, entry, embedding)
        if store is not None:
            with tracker.step("store"):
                store.save(template, config_hash)
                # stored values are float32
                template = store.load(entry.item_id)
        return template, None, tracker.timer
    except (C2CLError, ValueError, OSError) as e:
        return None, tracker.failure(e), tracker.timer


@log_function_call()
def build_templates(manifest: DatasetManifest, cfg: PipelineConfig,
                    entries: Optional[Iterable[ManifestEntry]] = None,
                    store: Optional[TemplateStore] = None
                    ) -> Tuple[Dict[str, Template], List[FailureRecord], StageTimer]:
    """
    Templates for ``entries`` (all manifest entries by default) on a bounded
    worker pool. Returns (templates by item id, failures, timer); failures
    never abort the batch.
    """
    entries = list(entries if entries is not None else manifest.entries)
    config_hash = cfg.config_hash()
    timer = StageTimer(logger, "pipeline")

    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        outcomes = list(pool.map(lambda e: _process_entry(e, manifest, cfg, store, config_hash), entries))

    templates: Dict[str, Template] = {}
    failures: List[FailureRecord] = []
    for entry, (template, failure, item_timer) in zip(entries, outcomes):
        timer.merge(item_timer)
        if failure is not None:
            failures.append(failure)
        else:
            templates[entry.item_id] = template
    logger.info(f"Templates: {len(templates)} built, {len(failures)} failed of {len(entries)}")
    return templates, failures, timer


# ==================== Reports ====================

def _finite_or_none(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _finite_or_none(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite_or_none(v) for v in value]
    return value


def write_json(data: Dict, path: Path) -> Path:
    """Sorted keys and fixed separators so equal data gives equal bytes"""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_finite_or_none(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _summary(total: int, failures: List[FailureRecord]) -> BatchSummary:
    return BatchSummary(total=total, processed=total - len(failures), failed=len(failures), failures=failures)


def _scorer(cfg: PipelineConfig) -> Scorer:
    return Scorer(cfg.w_t, cfg.w_m, cfg.seed, dict(cfg.matching))


# ==================== Verification ====================

@dataclass
class VerificationRun:
    report: VerificationReport
    scores: pd.DataFrame
    timer: StageTimer = field(default_factory=lambda: StageTimer(logger))


def score_pairs(pairs: Sequence[Tuple[Template, Template]], cfg: PipelineConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(s_t, s_m, fused) for each (probe, gallery) pair"""
    if not pairs:
        empty = np.zeros(0)
        return empty, empty, empty
    s_t = np.array([
        float(np.clip((float(np.dot(p.embedding.values, g.embedding.values)) + 1.0) / 2.0, 0.0, 1.0))
        for p, g in pairs
    ])

    def _minutiae(pair):
        p, g = pair
        if len(p.minutiae) == 0 or len(g.minutiae) == 0:
            return 0.0
        return match_minutiae(p.minutiae, g.minutiae, seed=cfg.seed, **cfg.matching).score

    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        s_m = np.array(list(pool.map(_minutiae, pairs)), dtype=np.float64)
    return s_t, s_m, fuse_score_arrays(s_t, s_m, cfg.w_t, cfg.w_m)


def multi_finger_report(scores: pd.DataFrame, fingers: Sequence[str], rule: str = "mean") -> Dict:
    """
    Subject-level metrics for a finger combination, fusing same-finger trials
    by ``rule``, next to the EER of each finger alone.
    """
    same = scores[scores["finger"] == scores["gallery_finger"]]
    per_finger = {str(f): table for f, table in same.groupby("finger", sort=True)}
    combined, merged = multi_finger_protocol_scores(per_finger, list(fingers), rule)

    single = {}
    for finger in fingers:
        table = per_finger[finger]
        genuine = (table["label"] == "genuine").to_numpy()
        fused = table["fused"].to_numpy()
        single[finger] = metric_report(ScoreSet(fused[genuine], fused[~genuine])).get("eer")
    return {
        "fingers": list(fingers),
        "rule": rule,
        "trials": int(len(merged)),
        "metrics": metric_report(combined),
        "single_finger_eer": single,
    }


@log_function_call()
def run_verification(manifest: DatasetManifest, cfg: PipelineConfig,
                     out_dir: Optional[str | Path] = None,
                     store: Optional[TemplateStore] = None,
                     fingers: Optional[Sequence[str]] = None) -> VerificationRun:
    """
    Generate the protocol, score every pair and write scores.csv,
    report.json and timing.json under ``out_dir``. Pairs whose templates
    failed are skipped and their item ids listed as missing. With
    ``fingers``, subject-level scores over that finger combination are
    added (multi_finger.json).
    """
    out = Path(out_dir or cfg.output_dir)
    timer = StageTimer(logger, "verify")
    with timer.stage("protocol"):
        protocol, warnings = gen_protocol(manifest.entries, cfg.protocol_rule)

    used = sorted(set(protocol.probe_idx.tolist()) | set(protocol.gallery_idx.tolist()))
    templates, failures, build_timer = build_templates(manifest, cfg, [manifest[i] for i in used], store)
    timer.merge(build_timer)

    ids = [e.item_id for e in manifest.entries]
    rows, pairs = [], []
    missing = set()
    for pi, gi, label in zip(protocol.probe_idx.tolist(), protocol.gallery_idx.tolist(), protocol.label.tolist()):
        probe, gallery = templates.get(ids[pi]), templates.get(ids[gi])
        if probe is None or gallery is None:
            missing.update(i for i, t in ((ids[pi], probe), (ids[gi], gallery)) if t is None)
            continue
        pairs.append((probe, gallery))
        rows.append({
            "probe_id": probe.template_id,
            "gallery_id": gallery.template_id,
            "label": "genuine" if label else "imposter",
            "probe_subject": probe.subject_id,
            "gallery_subject": gallery.subject_id,
            "probe_impression": probe.impression_index,
            "gallery_impression": gallery.impression_index,
            "finger": probe.finger_position,
            "gallery_finger": gallery.finger_position,
        })

    with timer.stage("score"):
        s_t, s_m, fused = score_pairs(pairs, cfg)
    columns = ["probe_id", "gallery_id", "label", "probe_subject", "gallery_subject",
               "probe_impression", "gallery_impression", "finger", "gallery_finger"]
    scores = pd.DataFrame(rows, columns=columns)
    scores["s_t"], scores["s_m"], scores["fused"] = s_t, s_m, fused

    genuine = scores["label"].to_numpy() == "genuine"
    with timer.stage("metrics"):
        metrics = metric_report(ScoreSet(fused[genuine], fused[~genuine]))
        texture = metric_report(ScoreSet(s_t[genuine], s_t[~genuine]))
        minutiae = metric_report(ScoreSet(s_m[genuine], s_m[~genuine]))
        multi = multi_finger_report(scores, fingers, cfg.multi_finger_rule) if fingers else {}

    report = VerificationReport(
        rule=protocol.rule,
        config_hash=cfg.config_hash(),
        seed=cfg.seed,
        counts={
            "protocol_genuine": protocol.genuine_count,
            "protocol_imposter": protocol.imposter_count,
            "scored_genuine": int(genuine.sum()),
            "scored_imposter": int((~genuine).sum()),
        },
        metrics=metrics,
        texture_only={"eer": texture.get("eer"), "auc": texture.get("auc")},
        minutiae_only={"eer": minutiae.get("eer"), "auc": minutiae.get("auc")},
        excluded_fingers=[f"{s}/{f}" for s, f in protocol.excluded],
        missing=sorted(missing),
        batch=_summary(len(used), failures),
        multi_finger=multi,
        insufficient=bool(metrics["insufficient"]),
    )
    for w in warnings:
        logger.info(w)

    out.mkdir(parents=True, exist_ok=True)
    scores.to_csv(out / "scores.csv", index=False, float_format="%.10f")
    write_json(report.model_dump(), out / "report.json")
    if multi:
        write_json(multi, out / "multi_finger.json")
    write_json(timer.as_dict(), out / "timing.json")
    timer.log_summary()
    eer_text = "n/a" if metrics.get("eer") is None else f"{metrics['eer']:.4%}"
    logger.info(f"Verification: {len(pairs)} pairs scored, EER {eer_text}, {len(failures)} failures")
    return VerificationRun(report, scores, timer)


# ==================== Ablation ====================

def _variant(cfg: PipelineConfig, stages: Sequence[str]) -> PipelineConfig:
    return cfg.model_copy(update={"stages": tuple(s for s in cfg.stages if s in stages)})


@log_function_call()
def run_ablation(manifest: DatasetManifest, cfg: PipelineConfig, out_dir: Optional[str | Path] = None,
                 baseline_stages: Sequence[str] = ABLATION_BASELINE) -> Dict:
    """
    Verification with ``baseline_stages`` only and with every configured
    stage, then a paired Mann-Whitney comparison of the two fused-score ROC
    curves over the trials both runs scored. Writes ablation.json.
    """
    baseline = _variant(cfg, baseline_stages)
    if baseline.stages == cfg.stages:
        raise ParameterError(f"Ablation needs stages beyond {list(baseline.stages)}, got {list(cfg.stages)}")
    out = Path(out_dir or cfg.output_dir)

    variants = {"baseline": baseline, "full": cfg}
    runs = {name: run_verification(manifest, variant, out / ("+".join(variant.stages) or "resize_only"))
            for name, variant in variants.items()}

    keys = ["probe_id", "gallery_id", "label"]
    merged = runs["baseline"].scores[keys + ["fused"]].merge(
        runs["full"].scores[keys + ["fused"]], on=keys, suffixes=("_baseline", "_full"))
    genuine = (merged["label"] == "genuine").to_numpy()

    def _side(column: str) -> ScoreSet:
        values = merged[column].to_numpy()
        return ScoreSet(values[genuine], values[~genuine])

    report: Dict = {
        name: {"stages": list(variants[name].stages),
               "eer": run.report.metrics.get("eer"), "auc": run.report.metrics.get("auc")}
        for name, run in runs.items()
    }
    report["trials"] = int(len(merged))
    a, b = _side("fused_baseline"), _side("fused_full")
    if a.genuine.size == 0 or a.imposter.size == 0:
        report["test"] = None
        report["insufficient"] = True
    else:
        test = mann_whitney_roc_test(a, b, mode="paired")
        report["test"] = {"p_value": test.p_value, "statistic": test.statistic, "method": test.method,
                          "auc_baseline": test.auc_a, "auc_full": test.auc_b, "flags": list(test.flags)}
        report["significant"] = test.p_value < 0.05
        report["insufficient"] = False
        logger.info(f"Ablation: AUC {test.auc_a:.4f} -> {test.auc_b:.4f}, p={test.p_value:.3g} ({test.method})")
    write_json(report, out / "ablation.json")
    return report


# ==================== Search ====================

@dataclass
class SearchRun:
    report: SearchReport
    ranks: pd.DataFrame


@log_function_call()
def run_search(manifest: DatasetManifest, cfg: PipelineConfig, out_dir: Optional[str | Path] = None,
               store: Optional[TemplateStore] = None, exhaustive: bool = False) -> SearchRun:
    """
    Contactless probes against the contact gallery: two-stage search with
    rank-N hit rates, shortlist recall and per-stage wall-clock. Probes
    without an enrolled mate are counted as unmatchable and left out of
    the hit-rate denominators.
    """
    out = Path(out_dir or cfg.output_dir)
    templates, failures, timer = build_templates(manifest, cfg, store=store)
    gallery = [templates[e.item_id] for e in manifest.of_kind("contact") if e.item_id in templates]
    probes = [templates[e.item_id] for e in manifest.of_kind("contactless") if e.item_id in templates]
    if not gallery:
        raise ParameterError("Search needs a non-empty gallery")

    index = GalleryIndex(gallery)
    k = min(cfg.search_k, len(index))
    if k < cfg.search_k:
        logger.warning(f"Search k={cfg.search_k} exceeds gallery size {len(index)}, using {k}")
    weights = _scorer(cfg)

    rows = []
    unmatchable = 0
    for probe in probes:
        mates = index.mates(probe)
        if not mates:
            unmatchable += 1
            rows.append({"probe_id": probe.template_id, "rank": None, "exhaustive_rank": None, "mated": False})
            continue
        with timer.stage("search.two_stage"):
            ranked = two_stage_search(probe, index, k, weights)
        exhaustive_rank = None
        if exhaustive:
            with timer.stage("search.exhaustive"):
                exhaustive_rank = mate_rank(rank_n_search(probe, index, "fused", weights), mates)
        rows.append({"probe_id": probe.template_id, "rank": mate_rank(ranked, mates),
                     "exhaustive_rank": exhaustive_rank, "mated": True})

    ranks = pd.DataFrame(rows, columns=["probe_id", "rank", "exhaustive_rank", "mated"])
    mated = ranks[ranks["mated"]]

    def _hit_rates(column: str) -> Dict[str, float]:
        if mated.empty:
            return {str(r): 0.0 for r in cfg.ranks}
        values = mated[column].astype(float).to_numpy()
        return {str(r): float(np.mean(np.nan_to_num(values, nan=np.inf) <= r)) for r in cfg.ranks}

    with timer.stage("search.shortlist_recall"):
        ks = [r for r in cfg.ranks if r <= len(index)]
        recall = shortlist_recall(probes, index, ks)

    report = SearchReport(
        k=k,
        gallery_size=len(index),
        probes=len(probes),
        mated_probes=int(len(mated)),
        unmatchable=unmatchable,
        rank_hit_rates=_hit_rates("rank"),
        exhaustive_rank_hit_rates=_hit_rates("exhaustive_rank") if exhaustive else {},
        shortlist_recall={str(kk): v for kk, v in recall.items()},
        timing={stage: round(v["seconds"], 6) for stage, v in timer.as_dict().items()},
        batch=_summary(len(manifest), failures),
    )
    out.mkdir(parents=True, exist_ok=True)
    ranks.to_csv(out / "search_ranks.csv", index=False)
    write_json(report.model_dump(exclude={"timing"}), out / "search_report.json")
    write_json(timer.as_dict(), out / "search_timing.json")
    timer.log_summary()
    logger.info(f"Search: {len(mated)} mated probes, rank-1 {report.rank_hit_rates.get('1', 0.0):.2%}, "
                f"{unmatchable} unmatchable")
    return SearchRun(report, ranks)


# ==================== Segmentation evaluation ====================

def _first_contact(manifest: DatasetManifest) -> Dict[Tuple[str, str], ManifestEntry]:
    firsts: Dict[Tuple[str, str], ManifestEntry] = {}
    for e in sorted(manifest.of_kind("contact"), key=lambda e: e.impression_index):
        firsts.setdefault((e.subject_id, e.finger_position), e)
    return firsts


def minutiae_correspondence_report(manifest: DatasetManifest, cfg: PipelineConfig,
                                   baseline_stages: Sequence[str] = ABLATION_BASELINE) -> Tuple[Dict, pd.DataFrame]:
    """
    Paired, missing and spurious minutiae and the goodness index of every
    contactless capture against its finger's first contact impression, once
    preprocessed with ``baseline_stages`` and once with every configured
    stage. Probe minutiae are aligned onto the reference by the matcher's
    transform before pairing.
    """
    references = _first_contact(manifest)
    probes = [e for e in manifest.of_kind("contactless") if (e.subject_id, e.finger_position) in references]
    variants = {"baseline": _variant(cfg, baseline_stages), "full": cfg}
    full, _, _ = build_templates(manifest, cfg, probes + list(references.values()))
    built = {"baseline": build_templates(manifest, variants["baseline"], probes)[0], "full": full}

    tol = {"tol_px": cfg.matching.get("tol_px", 12.0), "tol_deg": cfg.matching.get("tol_deg", 30.0)}
    rows = []
    for entry in probes:
        reference = full.get(references[(entry.subject_id, entry.finger_position)].item_id)
        if reference is None or len(reference.minutiae) == 0:
            continue
        for name, templates in built.items():
            probe = templates.get(entry.item_id)
            if probe is None:
                continue
            match = match_minutiae(probe.minutiae, reference.minutiae, seed=cfg.seed, **cfg.matching)
            aligned = probe.minutiae if match.transform is None else \
                align_minutiae(probe.minutiae, match.transform, reference.minutiae.source_dims)
            metrics = correspondence_metrics(aligned, reference.minutiae, **tol)
            rows.append({"item_id": entry.item_id, "variant": name, **metrics.to_dict()})

    table = pd.DataFrame(rows, columns=["item_id", "variant", "paired", "missing", "spurious", "goodness_index"])
    summary: Dict = {}
    for name in variants:
        part = table[table["variant"] == name]
        summary[name] = {
            "stages": list(variants[name].stages),
            "pairs": int(len(part)),
            **{col: (float(part[col].mean()) if len(part) else None)
               for col in ("paired", "missing", "spurious", "goodness_index")},
        }
    base_gi, full_gi = summary["baseline"]["goodness_index"], summary["full"]["goodness_index"]
    summary["goodness_index_change"] = (full_gi - base_gi) / abs(base_gi) if base_gi and full_gi is not None else None
    return summary, table


def run_seg_eval(manifest: DatasetManifest, cfg: PipelineConfig,
                 out_dir: Optional[str | Path] = None, correspondence: bool = True) -> Dict:
    """
    Mean IOU of the segmenter against the manifest's ground-truth masks.
    With ``correspondence`` and the warp stage enabled, also the minutiae
    goodness index against contact mates with and without the warp.
    """
    entries = [e for e in manifest.entries if e.mask_path]
    rows, failures = [], []
    for entry in entries:
        tracker = ItemTracker(entry.item_id)
        try:
            with tracker.step("load"):
                img = load_image(manifest.resolve(entry.image_path))
                gt = load_mask(manifest.resolve(entry.mask_path))
            with tracker.step("segment"):
                pred = segment_distal(img, **cfg.segmentation)
            rows.append({"item_id": entry.item_id, "iou": iou(pred, gt), "low_confidence": pred.low_confidence})
        except (C2CLError, ValueError, OSError) as e:
            failures.append(tracker.failure(e))

    table = pd.DataFrame(rows, columns=["item_id", "iou", "low_confidence"])
    report = {
        "evaluated": int(len(table)),
        "mean_iou": float(table["iou"].mean()) if len(table) else None,
        "low_confidence": int(table["low_confidence"].sum()) if len(table) else 0,
        "batch": _summary(len(entries), failures).model_dump(),
    }
    corr_table = None
    if correspondence and cfg.stage_enabled("warp") and manifest.of_kind("contact"):
        report["minutiae_correspondence"], corr_table = minutiae_correspondence_report(manifest, cfg)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / "seg_eval.csv", index=False, float_format="%.10f")
        if corr_table is not None:
            corr_table.to_csv(out / "minutiae_correspondence.csv", index=False, float_format="%.10f")
        write_json(report, out / "seg_eval.json")
    logger.info(f"Segmentation: {report['evaluated']} masks, mean IOU {report['mean_iou']}")
    return report


# ==================== Run ledger ====================

def record_run(command: str, cfg: PipelineConfig, summary: BatchSummary, eer: Optional[float] = None,
               rank1: Optional[float] = None, mean_iou: Optional[float] = None,
               db_path: Optional[str] = None) -> Optional[int]:
    """One RunRecord row plus FailureLog rows; ledger errors are logged, never raised"""
    from ..database import SessionLocal, init_db
    from ..models import FailureLog, RunRecord

    if summary.failed == 0:
        status = "success"
    elif summary.processed == 0:
        status = "failed"
    else:
        status = "partial"
    try:
        init_db(db_path)
        with SessionLocal() as db:
            run = RunRecord(command=command, config_hash=cfg.config_hash(), seed=cfg.seed,
                            total=summary.total, processed=summary.processed, failed=summary.failed,
                            eer=eer, rank1=rank1, mean_iou=mean_iou, status=status,
                            message=f"{summary.failed} failures" if summary.failed else None)
            run.failures = [FailureLog(item_id=f.item_id, stage=f.stage, error_type=f.error_type,
                                       message=f.message) for f in summary.failures]
            db.add(run)
            db.commit()
            return run.id
    except SQLAlchemyError as e:
        logger.warning(f"Run ledger write failed: {e}")
        return None
