"""
CSV/XLSX listing to JSONL manifest conversion
"""
import openpyxl
import pytest

from c2cl.cli.manifest_import import import_manifest, main, parse_csv, parse_file, parse_xlsx
from c2cl.exceptions import ManifestError
from c2cl.schemas import DatasetManifest

HEADER = ["Subject", "Finger", "Impression", "Type", "Path", "Mask"]
ROWS = [
    ["S1", "R-index", "0", "CL", "contactless/S1_0.png", "masks/S1_0.png"],
    ["S1", "R-index", "0", "contact", "contact/S1_0.png", ""],
    ["S2", "R-index", "1", "touchless", "contactless/S2_1.png", ""],
]


def _write_csv(path, header, rows, delimiter=","):
    lines = [delimiter.join(header)] + [delimiter.join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class TestParseCsv:

    def test_kinds_and_optional_mask(self, tmp_path):
        entries, warnings = parse_csv(str(_write_csv(tmp_path / "l.csv", HEADER, ROWS)))
        assert not warnings
        assert [e.capture_kind for e in entries] == ["contactless", "contact", "contactless"]
        assert entries[0].mask_path == "masks/S1_0.png"
        assert entries[1].mask_path is None
        assert entries[2].item_id == "S2_R-index_cl1"

    def test_semicolon_delimiter(self, tmp_path):
        entries, _ = parse_csv(str(_write_csv(tmp_path / "l.csv", HEADER, ROWS, delimiter=";")))
        assert len(entries) == 3

    def test_bad_rows_become_warnings(self, tmp_path):
        rows = ROWS + [["S3", "R-index", "x", "contact", "contact/S3.png", ""],
                       ["S4", "R-index", "0", "scanner", "contact/S4.png", ""]]
        entries, warnings = parse_csv(str(_write_csv(tmp_path / "l.csv", HEADER, rows)))
        assert len(entries) == 3
        assert len(warnings) == 2
        assert "Row 5" in warnings[0]
        assert "scanner" in warnings[1]

    def test_missing_required_column(self, tmp_path):
        path = _write_csv(tmp_path / "l.csv", ["Subject", "Finger", "Path"], [["S1", "R-index", "a.png"]])
        with pytest.raises(ManifestError):
            parse_csv(str(path))


class TestParseXlsx:

    def test_title_row_before_header(self, tmp_path):
        workbook = openpyxl.Workbook()
        sheet = workbook.active
        sheet.append(["Capture listing"])
        sheet.append(HEADER)
        for row in ROWS:
            sheet.append([int(c) if c.isdigit() else c for c in row])
        path = tmp_path / "listing.xlsx"
        workbook.save(path)

        entries, warnings = parse_xlsx(str(path))
        assert not warnings
        assert [e.subject_id for e in entries] == ["S1", "S1", "S2"]
        assert entries[2].impression_index == 1

    def test_unknown_extension(self, tmp_path):
        with pytest.raises(ManifestError):
            parse_file(str(tmp_path / "listing.txt"))


class TestImport:

    def test_writes_loadable_manifest(self, tmp_path):
        listing = _write_csv(tmp_path / "l.csv", HEADER, ROWS)
        output = tmp_path / "data" / "manifest.jsonl"
        output.parent.mkdir()
        manifest, warnings = import_manifest(str(listing), str(output))
        assert len(manifest) == 3
        # none of the images exist
        assert any("do not resolve" in w for w in warnings)
        loaded = DatasetManifest.load_jsonl(output, check_paths=False)
        assert [e.item_id for e in loaded.entries] == [e.item_id for e in manifest.entries]

    def test_duplicate_tuple_rejected(self, tmp_path):
        listing = _write_csv(tmp_path / "l.csv", HEADER, ROWS + [ROWS[0]])
        with pytest.raises(ManifestError):
            import_manifest(str(listing), str(tmp_path / "m.jsonl"), check_paths=False)

    def test_main_exit_codes(self, tmp_path):
        listing = _write_csv(tmp_path / "l.csv", HEADER, ROWS)
        assert main([str(listing), "-o", str(tmp_path / "m.jsonl"), "--no-check",
                     "--log-level", "WARNING"]) == 0
        assert (tmp_path / "m.jsonl").exists()
        assert main([str(tmp_path / "absent.csv"), "-o", str(tmp_path / "x.jsonl")]) == 2
