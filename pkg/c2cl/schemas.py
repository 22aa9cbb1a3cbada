"""
Pydantic Schemas for manifests, pipeline config and reports
数据集清单、流水线配置与报告模型
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .exceptions import ManifestError

logger = logging.getLogger(__name__)

STAGES = ("segment", "enhance", "scale", "warp")


# ==================== Dataset Manifest ====================
class ManifestEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    subject_id: str
    finger_position: str
    impression_index: int = Field(ge=0)
    capture_kind: Literal["contactless", "contact"]
    image_path: str
    mask_path: Optional[str] = None
    device: str = ""

    @field_validator("subject_id", "finger_position", "image_path")
    @classmethod
    def _not_blank(cls, v: str) -> str:
        if not str(v).strip():
            raise ValueError("must not be blank")
        return str(v).strip()

    @property
    def key(self) -> Tuple[str, str, int, str]:
        return (self.subject_id, self.finger_position, self.impression_index, self.capture_kind)

    @property
    def item_id(self) -> str:
        """Stable identifier used for templates, warp files and reports"""
        kind = "cl" if self.capture_kind == "contactless" else "c"
        return f"{self.subject_id}_{self.finger_position}_{kind}{self.impression_index}"


class DatasetManifest(BaseModel):
    entries: List[ManifestEntry]
    root: Optional[str] = None

    @model_validator(mode="after")
    def _unique_tuples(self) -> "DatasetManifest":
        seen = set()
        for e in self.entries:
            if e.key in seen:
                raise ValueError(f"duplicate entry {e.key}")
            seen.add(e.key)
        return self

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, index: int) -> ManifestEntry:
        return self.entries[index]

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        if path is None:
            return None
        p = Path(path)
        if not p.is_absolute() and self.root:
            p = Path(self.root) / p
        return p

    def missing_paths(self) -> List[str]:
        missing = []
        for e in self.entries:
            for p in (e.image_path, e.mask_path):
                if p is not None and not self.resolve(p).exists():
                    missing.append(p)
        return missing

    def of_kind(self, kind: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.capture_kind == kind]

    @classmethod
    def load_jsonl(cls, path: str | Path, check_paths: bool = True) -> "DatasetManifest":
        """One JSON object per line; relative paths resolve against the manifest's directory"""
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise ManifestError(f"Cannot read manifest {path}: {e}") from e

        raw = []
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                raw.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e

        try:
            manifest = cls(entries=raw, root=str(path.parent.resolve()))
        except ValidationError as e:
            raise ManifestError(f"{path}: {e.errors()[0].get('msg', 'invalid entry')}") from e

        if check_paths:
            missing = manifest.missing_paths()
            if missing:
                raise ManifestError(f"{path}: {len(missing)} paths not found, first: {missing[0]}")
        logger.info(f"Loaded manifest {path.name}: {len(manifest)} entries")
        return manifest

    def to_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for e in self.entries:
                f.write(e.model_dump_json(exclude_none=True) + "\n")
        return path


# ==================== Pipeline Config ====================
class PipelineConfig(BaseModel):
    """Validated per-run view of AppConfig"""
    model_config = ConfigDict(frozen=True)

    clahe_clip_limit: float = 2.0
    clahe_tiles: Tuple[int, int] = (8, 8)
    canvas: int = Field(480, ge=32)
    warp_source: Literal["estimated", "file"] = "estimated"
    warp_dir: Optional[str] = None
    target_ridge_period: float = 9.0
    tps_grid: int = Field(4, ge=2)
    tps_inset: float = Field(0.1, ge=0.0, lt=0.5)
    tps_regularization: float = Field(0.0, ge=0.0)
    tps_mode: Literal["ridge", "zero"] = "ridge"
    w_t: float = 0.5
    w_m: float = 0.5
    multi_finger_rule: Literal["mean", "sum"] = "mean"
    map_sigma: float = Field(1.5, gt=0.0)
    protocol_rule: Literal["full-cross", "first-impression"] = "full-cross"
    search_k: int = 500
    ranks: List[int] = Field(default_factory=lambda: [1, 10, 100, 500])
    seed: int = Field(0, ge=0)
    jobs: int = Field(4, ge=1)
    strict: bool = False
    skip_contact_preprocess: bool = True
    stages: Tuple[str, ...] = STAGES
    mask_dir: Optional[str] = None
    embedding_dir: Optional[str] = None
    output_dir: str = "output"
    template_dir: Optional[str] = None
    reuse_templates: bool = True

    # keyword groups forwarded to the services
    segmentation: Dict[str, Any] = Field(default_factory=dict)
    period: Dict[str, Any] = Field(default_factory=dict)
    extraction: Dict[str, Any] = Field(default_factory=dict)
    matching: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("clahe_clip_limit")
    @classmethod
    def _clip_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("clip limit must be > 0")
        return v

    @field_validator("target_ridge_period")
    @classmethod
    def _period_range(cls, v: float) -> float:
        if not 3.0 <= v <= 25.0:
            raise ValueError("target ridge period must be in [3, 25]")
        return v

    @field_validator("w_t", "w_m")
    @classmethod
    def _weight_non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("fusion weights must be >= 0")
        return v

    @field_validator("search_k")
    @classmethod
    def _k_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("search k must be >= 1")
        return v

    @field_validator("ranks")
    @classmethod
    def _ranks_positive(cls, v: List[int]) -> List[int]:
        if not v or min(v) < 1:
            raise ValueError("ranks must be positive")
        return sorted(set(v))

    @field_validator("stages")
    @classmethod
    def _known_stages(cls, v) -> Tuple[str, ...]:
        unknown = set(v) - set(STAGES)
        if unknown:
            raise ValueError(f"unknown stages: {sorted(unknown)}")
        return tuple(s for s in STAGES if s in v)

    @model_validator(mode="after")
    def _weights_not_both_zero(self) -> "PipelineConfig":
        if self.w_t + self.w_m <= 0:
            raise ValueError("fusion weights must not both be zero")
        if self.warp_source == "file" and "warp" in self.stages and not self.warp_dir:
            raise ValueError("warp_source 'file' needs warp_dir")
        return self

    def stage_enabled(self, stage: str) -> bool:
        return stage in self.stages

    @property
    def templates_path(self) -> Path:
        return Path(self.template_dir) if self.template_dir else Path(self.output_dir) / "templates"

    def config_hash(self) -> str:
        """Digest of every setting that changes results; excludes jobs and paths"""
        payload = self.model_dump(exclude={"jobs", "strict", "output_dir", "template_dir", "reuse_templates"})
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()

    @classmethod
    def from_app_config(cls, cfg, **overrides) -> "PipelineConfig":
        from .services.minutiae import extraction_params, matching_params
        from .services.segmentation import segmentation_params

        g = cfg.geometry
        data = {
            "clahe_clip_limit": cfg.imaging.clahe_clip_limit,
            "clahe_tiles": tuple(cfg.imaging.clahe_tiles),
            "canvas": cfg.imaging.canvas,
            "warp_source": cfg.pipeline.warp_source,
            "target_ridge_period": g.target_ridge_period,
            "tps_grid": g.tps_grid,
            "tps_inset": g.tps_inset,
            "tps_regularization": g.tps_regularization,
            "tps_mode": g.tps_mode,
            "w_t": cfg.fusion.w_t,
            "w_m": cfg.fusion.w_m,
            "multi_finger_rule": cfg.fusion.multi_finger_rule,
            "map_sigma": cfg.minutiae.map_sigma,
            "protocol_rule": cfg.protocol.rule,
            "search_k": cfg.search.k,
            "ranks": list(cfg.search.ranks),
            "seed": cfg.pipeline.seed,
            "jobs": cfg.pipeline.jobs,
            "strict": cfg.pipeline.strict,
            "skip_contact_preprocess": cfg.pipeline.skip_contact_preprocess,
            "stages": tuple(cfg.pipeline.stages),
            "output_dir": cfg.pipeline.output_dir,
            "template_dir": cfg.pipeline.template_dir,
            "reuse_templates": cfg.pipeline.reuse_templates,
            "segmentation": segmentation_params(cfg.segmentation),
            "period": {
                "block": g.ridge_block,
                "period_min": g.period_min,
                "period_max": g.period_max,
                "min_valid_fraction": g.min_valid_fraction,
            },
            "extraction": extraction_params(cfg.minutiae),
            "matching": matching_params(cfg.minutiae),
        }
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


# ==================== Reports ====================
class FailureRecord(BaseModel):
    item_id: str
    stage: str
    error_type: str
    message: str


class TemplateMetadata(BaseModel):
    """JSON block stored in each template file"""
    template_id: str
    subject_id: str
    finger_position: str
    impression_index: int
    capture_kind: Literal["contactless", "contact"]
    device: str = ""
    flags: List[str] = Field(default_factory=list)
    embedding_flags: List[str] = Field(default_factory=list)
    minutiae_flags: List[str] = Field(default_factory=list)
    source_dims: Tuple[int, int] = (480, 480)
    config_hash: Optional[str] = None


class BatchSummary(BaseModel):
    total: int
    processed: int
    failed: int
    failures: List[FailureRecord] = Field(default_factory=list)

    @model_validator(mode="after")
    def _reconcile(self) -> "BatchSummary":
        if self.processed + self.failed != self.total:
            raise ValueError("processed + failed must equal total")
        return self


class VerificationReport(BaseModel):
    rule: str
    config_hash: str
    seed: int
    counts: Dict[str, int]
    metrics: Dict[str, Any]
    texture_only: Dict[str, Any] = Field(default_factory=dict)
    minutiae_only: Dict[str, Any] = Field(default_factory=dict)
    excluded_fingers: List[str] = Field(default_factory=list)
    multi_finger: Dict[str, Any] = Field(default_factory=dict)
    missing: List[str] = Field(default_factory=list)
    batch: BatchSummary
    insufficient: bool = False


class SearchReport(BaseModel):
    k: int
    gallery_size: int
    probes: int
    mated_probes: int
    unmatchable: int
    rank_hit_rates: Dict[str, float]
    exhaustive_rank_hit_rates: Dict[str, float] = Field(default_factory=dict)
    shortlist_recall: Dict[str, float] = Field(default_factory=dict)
    timing: Dict[str, float] = Field(default_factory=dict)
    batch: BatchSummary
