#!/usr/bin/env python3
"""
CLI Tool for dataset manifest import
数据集清单导入

Converts a CSV or XLSX directory listing into the JSONL manifest.

Usage:
    python -m c2cl.cli.manifest_import listing.csv -o data/manifest.jsonl
    python -m c2cl.cli.manifest_import listing.xlsx -o data/manifest.jsonl --root data
"""
import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import openpyxl
from pydantic import ValidationError

from ..exceptions import ManifestError
from ..logging_utils import setup_logging
from ..schemas import DatasetManifest, ManifestEntry

logger = logging.getLogger(__name__)

# column -> substrings accepted in the header (case-insensitive)
COLUMN_ALIASES: Dict[str, Tuple[str, ...]] = {
    "subject_id": ("subject", "person", "id"),
    "finger_position": ("finger", "position"),
    "impression_index": ("impression", "sample", "index"),
    "capture_kind": ("kind", "type", "sensor"),
    "image_path": ("path", "file", "image"),
    "mask_path": ("mask",),
    "device": ("device",),
}
REQUIRED = ("subject_id", "finger_position", "impression_index", "capture_kind", "image_path")

KIND_ALIASES = {
    "contactless": "contactless", "cl": "contactless", "touchless": "contactless",
    "finger-photo": "contactless", "photo": "contactless",
    "contact": "contact", "c": "contact", "contact-based": "contact", "livescan": "contact",
}


def _match_columns(headers: List[Optional[str]]) -> Dict[str, int]:
    """Map manifest fields to header positions; mask and device are matched first so 'path' stays free"""
    found: Dict[str, int] = {}
    lowered = [str(h).strip().lower() if h is not None else "" for h in headers]
    for field in ("mask_path", "device", "subject_id", "finger_position", "impression_index",
                  "capture_kind", "image_path"):
        for alias in COLUMN_ALIASES[field]:
            hits = [i for i, name in enumerate(lowered) if name and alias in name and i not in found.values()]
            if hits:
                found[field] = hits[0]
                break
    missing = [f for f in REQUIRED if f not in found]
    if missing:
        raise ManifestError(f"Could not find columns {missing}. Found columns: {[h for h in headers if h]}")
    return found


def _row_to_entry(row: List, columns: Dict[str, int], line: int, warnings: List[str]) -> Optional[ManifestEntry]:
    def cell(field: str) -> str:
        idx = columns.get(field)
        value = row[idx] if idx is not None and idx < len(row) else None
        return "" if value is None else str(value).strip()

    if not cell("image_path"):
        return None
    kind = KIND_ALIASES.get(cell("capture_kind").lower())
    if kind is None:
        warnings.append(f"Row {line}: unknown capture kind '{cell('capture_kind')}', skipped")
        return None
    impression = cell("impression_index")
    try:
        impression_index = int(float(impression))
    except ValueError:
        warnings.append(f"Row {line}: invalid impression '{impression}', skipped")
        return None
    try:
        return ManifestEntry(
            subject_id=cell("subject_id"),
            finger_position=cell("finger_position"),
            impression_index=impression_index,
            capture_kind=kind,
            image_path=cell("image_path"),
            mask_path=cell("mask_path") or None,
            device=cell("device"),
        )
    except ValidationError as e:
        warnings.append(f"Row {line}: {e.errors()[0].get('msg', 'invalid row')}, skipped")
        return None


def parse_xlsx(file_path: str) -> Tuple[List[ManifestEntry], List[str]]:
    """Header is the first row that names all required columns"""
    workbook = openpyxl.load_workbook(file_path, read_only=True, data_only=True)
    sheet = workbook.active
    rows = list(sheet.iter_rows(values_only=True))
    workbook.close()

    columns, start = None, 0
    for i, row in enumerate(rows[:10]):
        try:
            columns = _match_columns(list(row))
            start = i + 1
            break
        except ManifestError:
            continue
    if columns is None:
        raise ManifestError(f"No header row with {list(REQUIRED)} in the first 10 rows of {file_path}")

    entries, warnings = [], []
    for line, row in enumerate(rows[start:], start=start + 1):
        entry = _row_to_entry(list(row), columns, line, warnings)
        if entry is not None:
            entries.append(entry)
    return entries, warnings


def parse_csv(file_path: str) -> Tuple[List[ManifestEntry], List[str]]:
    entries, warnings = [], []
    with open(file_path, "r", encoding="utf-8-sig", newline="") as f:
        sample = f.read(4096)
        f.seek(0)
        if "\t" in sample:
            delimiter = "\t"
        elif ";" in sample:
            delimiter = ";"
        else:
            delimiter = ","

        reader = csv.reader(f, delimiter=delimiter)
        headers = next(reader, None)
        if not headers:
            raise ManifestError(f"{file_path} is empty")
        columns = _match_columns(headers)
        logger.info("Using columns: " + ", ".join(f"{k}='{headers[v]}'" for k, v in sorted(columns.items())))
        for line, row in enumerate(reader, start=2):
            entry = _row_to_entry(row, columns, line, warnings)
            if entry is not None:
                entries.append(entry)
    return entries, warnings


def parse_file(file_path: str) -> Tuple[List[ManifestEntry], List[str]]:
    """Parse by extension (.xlsx or .csv); returns (entries, warnings)"""
    ext = Path(file_path).suffix.lower()
    if ext == ".xlsx":
        return parse_xlsx(file_path)
    if ext in (".csv", ".tsv"):
        return parse_csv(file_path)
    raise ManifestError(f"Unsupported file format: {ext}. Use .xlsx or .csv")


def import_manifest(file_path: str, output: str, check_paths: bool = True) -> Tuple[DatasetManifest, List[str]]:
    entries, warnings = parse_file(file_path)
    if not entries:
        raise ManifestError(f"No valid rows found in {file_path}")
    try:
        manifest = DatasetManifest(entries=entries, root=str(Path(output).resolve().parent))
    except ValidationError as e:
        raise ManifestError(str(e.errors()[0].get("msg", "invalid manifest"))) from e
    if check_paths:
        missing = manifest.missing_paths()
        if missing:
            warnings.append(f"{len(missing)} paths do not resolve from {manifest.root}, first: {missing[0]}")
    manifest.to_jsonl(output)
    return manifest, warnings


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        description="Convert a CSV/XLSX dataset listing to a JSONL manifest",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
    manifest_import listing.csv -o data/manifest.jsonl
    manifest_import listing.xlsx -o data/manifest.jsonl --no-check

CSV/XLSX columns required:
  - subject:    subject identifier
  - finger:     finger position (e.g. R-index)
  - impression: impression index (0-based)
  - kind:       contactless | contact
  - path:       image path, relative to the manifest directory
Optional: mask, device
        """
    )
    parser.add_argument("file", help="Path to XLSX or CSV listing")
    parser.add_argument("-o", "--output", required=True, help="Output JSONL manifest")
    parser.add_argument("--no-check", action="store_true", help="Do not check that image paths exist")
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)
    setup_logging(args.log_level)

    if not Path(args.file).exists():
        logger.error(f"File not found: {args.file}")
        return 2
    try:
        manifest, warnings = import_manifest(args.file, args.output, not args.no_check)
    except ManifestError as e:
        logger.error(f"Error parsing file: {e}")
        return 2

    for w in warnings:
        logger.warning(w)
    logger.info(f"✓ Wrote {len(manifest)} entries to {args.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
