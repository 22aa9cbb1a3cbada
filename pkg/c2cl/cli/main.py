#!/usr/bin/env python3
"""
c2cl command line
接触式/非接触式指纹匹配命令行

Usage:
    python -m c2cl.cli.main synth --out data/synth --fingers 100
    python -m c2cl.cli.main verify data/synth/manifest.jsonl -o output/verify
    python -m c2cl.cli.main search data/synth/manifest.jsonl -o output/search -k 500

Exit codes: 0 success, 1 gradient mismatch, 2 validation error,
3 per-item failures with --strict.
"""
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import ValidationError

from ..config_loader import AppConfig, init_config
from ..exceptions import C2CLError
from ..logging_utils import setup_logging
from ..schemas import BatchSummary, DatasetManifest, FailureRecord, ManifestEntry, PipelineConfig
from ..services.gradcheck import run_gradcheck
from ..services.imaging import load_image, save_image
from ..services.matcheval import fuse_scores
from ..services.minutiae import match_minutiae, minutiae_map
from ..services.pipeline import (
    ItemTracker, extract_one, preprocess_one, record_run, run_ablation, run_search, run_seg_eval, run_verification,
    write_json,
)
from ..services.representation import texture_similarity
from ..services.segmentation import load_mask, save_mask, segment_distal
from ..services.synthetic import write_synthetic_dataset
from ..services.template_store import TemplateStore, decode_template

logger = logging.getLogger("c2cl")

EXIT_OK = 0
EXIT_GRADIENT = 1
EXIT_VALIDATION = 2
EXIT_PARTIAL = 3


def _banner(command: str, config: AppConfig, cfg: PipelineConfig):
    logger.info("=" * 60)
    logger.info(f"c2cl {command}")
    logger.info("=" * 60)
    logger.info("Configuration loaded:")
    logger.info(f"  - Seed: {cfg.seed} | Jobs: {cfg.jobs} | Strict: {cfg.strict}")
    logger.info(f"  - Stages: {', '.join(cfg.stages)} | Warp source: {cfg.warp_source}")
    logger.info(f"  - Target ridge period: {cfg.target_ridge_period} | TPS grid: {cfg.tps_grid}")
    logger.info(f"  - Fusion: w_t={cfg.w_t}, w_m={cfg.w_m} | Protocol: {cfg.protocol_rule} | k={cfg.search_k}")
    logger.info(f"  - Log Level: {config.logging.level}")
    logger.info("=" * 60)


def _finish(failures: List[FailureRecord], strict: bool) -> int:
    for f in failures:
        logger.warning(f"✗ {f.item_id} | {f.stage} | {f.error_type}: {f.message}")
    if failures and strict:
        logger.error(f"{len(failures)} items failed (strict mode)")
        return EXIT_PARTIAL
    return EXIT_OK


def _item(path: str) -> str:
    return Path(path).stem


def _external_mask(args, image_path: str):
    if not args.mask_dir:
        return None
    for suffix in (".png", ".pgm"):
        candidate = Path(args.mask_dir) / f"{_item(image_path)}{suffix}"
        if candidate.exists():
            return load_mask(candidate)
    return None


# ==================== Subcommands ====================

def cmd_segment(args, cfg: PipelineConfig) -> int:
    out = Path(args.output)
    failures = []
    for path in args.images:
        tracker = ItemTracker(_item(path))
        try:
            with tracker.step("load"):
                img = load_image(path)
            with tracker.step("segment"):
                mask = _external_mask(args, path) or segment_distal(img, **cfg.segmentation)
            save_mask(mask, out / f"{_item(path)}.png")
            logger.info(f"✓ {path}: coverage {mask.area / (mask.width * mask.height):.3f}"
                        f"{' (low confidence)' if mask.low_confidence else ''}")
        except (C2CLError, OSError) as e:
            failures.append(tracker.failure(e))
    return _finish(failures, cfg.strict)


def cmd_preprocess(args, cfg: PipelineConfig) -> int:
    out = Path(args.output)
    failures = []
    for path in args.images:
        tracker = ItemTracker(_item(path))
        try:
            with tracker.step("load"):
                img = load_image(path)
            result = preprocess_one(img, cfg, args.kind, _external_mask(args, path), None, tracker)
            save_image(result.image, out / f"{_item(path)}.png")
            write_json(result.audit(), out / f"{_item(path)}.warp.json")
        except (C2CLError, OSError) as e:
            failures.append(tracker.failure(e))
    return _finish(failures, cfg.strict)


def cmd_extract(args, cfg: PipelineConfig) -> int:
    store = TemplateStore(args.output)
    failures = []
    for path in args.images:
        tracker = ItemTracker(_item(path))
        try:
            with tracker.step("load"):
                img = load_image(path)
            if args.preprocess:
                img = preprocess_one(img, cfg, args.kind, _external_mask(args, path), None, tracker).image
            entry = ManifestEntry(subject_id=args.subject or _item(path), finger_position=args.finger,
                                  impression_index=0, capture_kind=args.kind, image_path=path)
            with tracker.step("extract"):
                template = extract_one(img, cfg, entry)
            store.save(template, cfg.config_hash())
            (Path(args.output) / f"{template.template_id}.min.txt").write_text(template.minutiae.to_text())
            if args.maps:
                np.save(Path(args.output) / f"{template.template_id}.mmap.npy",
                        minutiae_map(template.minutiae, sigma=cfg.map_sigma).values)
            logger.info(f"✓ {path}: {len(template.minutiae)} minutiae -> {template.template_id}")
        except (C2CLError, OSError, ValidationError) as e:
            failures.append(tracker.failure(e))
    return _finish(failures, cfg.strict)


def _load_for_match(path: str, cfg: PipelineConfig, kind: str):
    if Path(path).suffix == ".c2tp":
        return decode_template(Path(path).read_bytes(), path)
    img = load_image(path)
    entry = ManifestEntry(subject_id=_item(path), finger_position="unknown", impression_index=0,
                          capture_kind=kind, image_path=path)
    return extract_one(img, cfg, entry)


def cmd_match(args, cfg: PipelineConfig) -> int:
    a = _load_for_match(args.probe, cfg, "contactless")
    b = _load_for_match(args.gallery, cfg, "contact")
    s_t = texture_similarity(a.embedding, b.embedding)
    s_m = match_minutiae(a.minutiae, b.minutiae, seed=cfg.seed, **cfg.matching).score
    result = {"s_t": s_t, "s_m": s_m, "fused": fuse_scores(s_t, s_m, cfg.w_t, cfg.w_m)}
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_verify(args, cfg: PipelineConfig) -> int:
    manifest = DatasetManifest.load_jsonl(args.manifest)
    store = TemplateStore(cfg.templates_path)
    run = run_verification(manifest, cfg, args.output, store, fingers=args.fingers)
    report = run.report
    record_run("verify", cfg, report.batch, eer=report.metrics.get("eer"), db_path=args.db)
    if args.ablation:
        run_ablation(manifest, cfg, Path(args.output or cfg.output_dir) / "ablation")
    return _finish(report.batch.failures, cfg.strict)


def cmd_search(args, cfg: PipelineConfig) -> int:
    manifest = DatasetManifest.load_jsonl(args.manifest)
    store = TemplateStore(cfg.templates_path)
    run = run_search(manifest, cfg, args.output, store, exhaustive=args.exhaustive)
    report = run.report
    record_run("search", cfg, report.batch, rank1=report.rank_hit_rates.get("1"), db_path=args.db)
    return _finish(report.batch.failures, cfg.strict)


def cmd_seg_eval(args, cfg: PipelineConfig) -> int:
    manifest = DatasetManifest.load_jsonl(args.manifest)
    report = run_seg_eval(manifest, cfg, args.output)
    batch = BatchSummary(**report["batch"])
    record_run("seg-eval", cfg, batch, mean_iou=report["mean_iou"], db_path=args.db)
    return _finish(batch.failures, cfg.strict)


def cmd_gradcheck(args, cfg: PipelineConfig) -> int:
    results = run_gradcheck(cfg.seed, args.configurations)
    if args.output:
        write_json({"results": [r.to_dict() for r in results]}, Path(args.output) / "gradcheck.json")
    failed = [r for r in results if not r.passed]
    for r in failed:
        logger.error(f"✗ {r.name}: relative error {r.max_rel_error:.3e}")
    return EXIT_GRADIENT if failed else EXIT_OK


def cmd_synth(args, cfg: PipelineConfig) -> int:
    path = write_synthetic_dataset(args.out, args.fingers, cfg.seed, args.contact_impressions,
                                   args.contactless_impressions, tuple(args.positions))
    logger.info(f"✓ Manifest: {path}")
    return EXIT_OK


# ==================== Parser ====================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="c2cl",
        description="Contact to contactless fingerprint preprocessing, matching and evaluation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  Demo dataset:
    c2cl synth --out data/synth --fingers 100
  Verification protocol:
    c2cl --seed 0 --jobs 4 verify data/synth/manifest.jsonl -o output/verify
  Two fingers per subject, fused, plus the warp ablation:
    c2cl synth --out data/synth2 --fingers 50 --positions R-index L-index
    c2cl verify data/synth2/manifest.jsonl -o output/verify2 --fingers R-index L-index --ablation
  Two-stage search:
    c2cl search data/synth/manifest.jsonl -o output/search -k 500 --exhaustive
  Single images:
    c2cl segment photo.png -o output/masks
    c2cl preprocess photo.png -o output/pre
    c2cl match output/templates/a.c2tp output/templates/b.c2tp

Manifest: JSON Lines, one object per capture with subject_id,
finger_position, impression_index, capture_kind (contactless|contact),
image_path and optional mask_path / device.
        """
    )
    parser.add_argument("--config", help="YAML config file (default: ./config.yaml)")
    parser.add_argument("--seed", type=int, help="Random seed for matching and synthesis")
    parser.add_argument("--jobs", type=int, help="Worker threads")
    parser.add_argument("--strict", action="store_true", default=None, help="Exit 3 when any item fails")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING, ERROR")
    parser.add_argument("--mask-dir", help="External masks named <item>.png")
    parser.add_argument("--embedding-dir", help="Imported embeddings named <item>.c2em or <item>.json")
    parser.add_argument("--warp-dir", help="Warp parameter files named <item>.json (warp_source=file)")
    parser.add_argument("--db", help="Run ledger sqlite path")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="Distal phalange masks")
    p.add_argument("images", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(handler=cmd_segment)

    p = sub.add_parser("preprocess", help="Segment, enhance, scale and warp")
    p.add_argument("images", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--kind", choices=["contactless", "contact"], default="contactless")
    p.set_defaults(handler=cmd_preprocess)

    p = sub.add_parser("extract", help="Templates (embedding + minutiae)")
    p.add_argument("images", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--kind", choices=["contactless", "contact"], default="contactless")
    p.add_argument("--subject")
    p.add_argument("--finger", default="unknown")
    p.add_argument("--preprocess", action="store_true", help="Preprocess before extraction")
    p.add_argument("--maps", action="store_true", help="Also write minutiae maps (<id>.mmap.npy)")
    p.set_defaults(handler=cmd_extract)

    p = sub.add_parser("match", help="1:1 comparison of two templates or preprocessed images")
    p.add_argument("probe")
    p.add_argument("gallery")
    p.set_defaults(handler=cmd_match)

    p = sub.add_parser("verify", help="Verification protocol run")
    p.add_argument("manifest")
    p.add_argument("-o", "--output")
    p.add_argument("--rule", choices=["full-cross", "first-impression"])
    p.add_argument("--fingers", nargs="+", metavar="POSITION",
                   help="Also fuse these finger positions per subject (multi_finger_rule)")
    p.add_argument("--ablation", action="store_true",
                   help="Compare segment+enhance+scale against all stages (Mann-Whitney ROC test)")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("search", help="Two-stage identification")
    p.add_argument("manifest")
    p.add_argument("-o", "--output")
    p.add_argument("-k", type=int)
    p.add_argument("--exhaustive", action="store_true", help="Also rank by exhaustive fused search")
    p.set_defaults(handler=cmd_search)

    p = sub.add_parser("seg-eval", help="IOU against ground-truth masks")
    p.add_argument("manifest")
    p.add_argument("-o", "--output")
    p.set_defaults(handler=cmd_seg_eval)

    p = sub.add_parser("gradcheck", help="Finite-difference gradient suites")
    p.add_argument("--configurations", type=int, default=10)
    p.add_argument("-o", "--output")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("synth", help="Synthetic contact/contactless dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--fingers", type=int, default=20)
    p.add_argument("--contact-impressions", type=int, default=1)
    p.add_argument("--contactless-impressions", type=int, default=1)
    p.add_argument("--positions", nargs="+", default=["R-index"], help="Finger positions per subject")
    p.set_defaults(handler=cmd_synth)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = init_config(args.config)
    except (OSError, ValueError) as e:
        print(f"Error loading config: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.log_level:
        config = replace(config, logging=replace(config.logging, level=args.log_level))
    setup_logging(
        level=config.logging.level,
        log_format=config.logging.format,
        log_file=config.logging.file,
        max_file_size=config.logging.max_file_size,
        backup_count=config.logging.backup_count,
    )

    try:
        cfg = PipelineConfig.from_app_config(
            config,
            seed=args.seed,
            jobs=args.jobs,
            strict=args.strict,
            mask_dir=args.mask_dir,
            embedding_dir=args.embedding_dir,
            warp_dir=args.warp_dir,
            protocol_rule=getattr(args, "rule", None),
            search_k=getattr(args, "k", None),
        )
        _banner(args.command, config, cfg)
        return args.handler(args, cfg)
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_VALIDATION
    except C2CLError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
