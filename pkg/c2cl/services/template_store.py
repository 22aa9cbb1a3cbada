"""
Template Store - one binary file per template plus a JSON index
模板存储 - 每个模板一个二进制文件 + JSON 索引

Layout: "C2TP", version byte, u32 metadata length, metadata JSON,
u32 embedding dim, <f4 values, u32 minutiae count, packed minutiae records
(x <f4, y <f4, theta <f4, kind u1, quality <f4). All integers little-endian.
"""
from __future__ import annotations

import json
import logging
import struct
import threading
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import numpy as np

from ..exceptions import TemplateFormatError
from ..schemas import TemplateMetadata
from .minutiae import KINDS, Minutia, MinutiaeSet
from .representation import Embedding
from .search import Template

logger = logging.getLogger(__name__)

TEMPLATE_MAGIC = b"C2TP"
TEMPLATE_VERSION = 1
INDEX_NAME = "index.json"

MINUTIA_RECORD = np.dtype([("x", "<f4"), ("y", "<f4"), ("theta", "<f4"), ("kind", "u1"), ("quality", "<f4")])


def encode_template(template: Template, config_hash: Optional[str] = None) -> bytes:
    meta = TemplateMetadata(
        template_id=template.template_id,
        subject_id=template.subject_id,
        finger_position=template.finger_position,
        impression_index=template.impression_index,
        capture_kind=template.capture_kind,
        device=template.device,
        flags=list(template.flags),
        embedding_flags=list(template.embedding.flags),
        minutiae_flags=list(template.minutiae.flags),
        source_dims=template.minutiae.source_dims,
        config_hash=config_hash,
    )
    meta_bytes = json.dumps(meta.model_dump(), sort_keys=True, separators=(",", ":")).encode("utf-8")

    records = np.zeros(len(template.minutiae), dtype=MINUTIA_RECORD)
    for i, m in enumerate(template.minutiae):
        records[i] = (m.x, m.y, m.theta, KINDS.index(m.kind), m.quality)

    parts = [
        TEMPLATE_MAGIC,
        struct.pack("<BI", TEMPLATE_VERSION, len(meta_bytes)),
        meta_bytes,
        struct.pack("<I", template.embedding.dim),
        template.embedding.values.astype("<f4").tobytes(),
        struct.pack("<I", len(records)),
        records.tobytes(),
    ]
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise TemplateFormatError(f"{self.source}: truncated at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_template(data: bytes, source: str = "<bytes>") -> Template:
    r = _Reader(data, source)
    if r.take(4) != TEMPLATE_MAGIC:
        raise TemplateFormatError(f"{source}: bad magic")
    (version,) = struct.unpack("<B", r.take(1))
    if version != TEMPLATE_VERSION:
        raise TemplateFormatError(f"{source}: unsupported version {version}")

    try:
        meta = TemplateMetadata(**json.loads(r.take(r.u32()).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ValueError) as e:
        raise TemplateFormatError(f"{source}: bad metadata block") from e

    dim = r.u32()
    values = np.frombuffer(r.take(4 * dim), dtype="<f4").astype(np.float64)
    count = r.u32()
    records = np.frombuffer(r.take(count * MINUTIA_RECORD.itemsize), dtype=MINUTIA_RECORD)
    if r.offset != len(data):
        raise TemplateFormatError(f"{source}: {len(data) - r.offset} trailing bytes")

    try:
        # float32 storage; renormalize so the unit-norm invariant holds after decoding
        embedding = Embedding.from_raw(values, meta.template_id, meta.embedding_flags)
        minutiae = MinutiaeSet(
            tuple(Minutia(float(rec["x"]), float(rec["y"]), float(rec["theta"]),
                          KINDS[int(rec["kind"])], float(rec["quality"])) for rec in records),
            tuple(meta.source_dims),
            tuple(meta.minutiae_flags),
        )
    except (IndexError, ValueError) as e:
        raise TemplateFormatError(f"{source}: invalid payload ({e})") from e

    return Template(
        template_id=meta.template_id,
        subject_id=meta.subject_id,
        finger_position=meta.finger_position,
        impression_index=meta.impression_index,
        capture_kind=meta.capture_kind,
        embedding=embedding,
        minutiae=minutiae,
        device=meta.device,
        flags=tuple(meta.flags),
    )


def read_config_hash(path: str | Path) -> Optional[str]:
    data = Path(path).read_bytes()
    r = _Reader(data, str(path))
    if r.take(4) != TEMPLATE_MAGIC:
        raise TemplateFormatError(f"{path}: bad magic")
    r.take(1)
    return json.loads(r.take(r.u32()).decode("utf-8")).get("config_hash")


class TemplateStore:
    """Directory of .c2tp files; index.json maps template ids to file names"""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._index: Dict[str, str] = self._read_index()

    def _read_index(self) -> Dict[str, str]:
        path = self.root / INDEX_NAME
        if not path.exists():
            return {}
        try:
            return dict(json.loads(path.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, ValueError) as e:
            raise TemplateFormatError(f"Corrupt template index {path}") from e

    def _write_index(self):
        (self.root / INDEX_NAME).write_text(json.dumps(self._index, indent=2, sort_keys=True), encoding="utf-8")

    def __contains__(self, template_id: str) -> bool:
        return template_id in self._index and (self.root / self._index[template_id]).exists()

    def __len__(self) -> int:
        return len(self._index)

    def ids(self) -> List[str]:
        return sorted(self._index)

    def path_for(self, template_id: str) -> Path:
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in template_id)
        return self.root / f"{safe}.c2tp"

    def save(self, template: Template, config_hash: Optional[str] = None) -> Path:
        path = self.path_for(template.template_id)
        path.write_bytes(encode_template(template, config_hash))
        with self._lock:
            self._index[template.template_id] = path.name
            self._write_index()
        return path

    def load(self, template_id: str) -> Template:
        if template_id not in self._index:
            raise TemplateFormatError(f"Template {template_id} not in store {self.root}")
        path = self.root / self._index[template_id]
        try:
            data = path.read_bytes()
        except OSError as e:
            raise TemplateFormatError(f"Cannot read template {path}: {e}") from e
        return decode_template(data, str(path))

    def config_hash(self, template_id: str) -> Optional[str]:
        return read_config_hash(self.root / self._index[template_id])

    def __iter__(self) -> Iterator[Template]:
        for template_id in self.ids():
            yield self.load(template_id)
