"""
Configuration Loader Module
Loads and validates configuration from config.yaml
"""
import os
import yaml
import logging
from pathlib import Path
from typing import Optional, Dict, Any, List, Tuple
from dataclasses import dataclass, field, asdict, replace
from functools import lru_cache

from .exceptions import ParameterError

logger = logging.getLogger(__name__)


@dataclass
class LoggingConfig:
    """Logging Configuration"""
    level: str = "INFO"
    format: str = "%(asctime)s - %(name)s - %(levelname)s - [%(filename)s:%(lineno)d] - %(message)s"
    file: str = "logs/c2cl.log"
    max_file_size: int = 10
    backup_count: int = 5


@dataclass
class ImagingConfig:
    """Enhancement and canvas normalization"""
    clahe_clip_limit: float = 2.0
    clahe_tiles: Tuple[int, int] = (8, 8)
    canvas: int = 480


@dataclass
class SegmentationConfig:
    """Classical distal-phalange segmenter"""
    smooth_sigma: float = 2.0
    closing_size: int = 5
    distal_fraction: float = 0.6
    elongation_ratio: float = 1.6
    min_area_frac: float = 0.01
    max_area_frac: float = 0.95
    work_size: int = 256


@dataclass
class GeometryConfig:
    """Scaling and TPS deformation"""
    tps_grid: int = 4
    tps_inset: float = 0.1
    tps_regularization: float = 0.0
    tps_mode: str = "ridge"          # ridge / zero
    target_ridge_period: float = 9.0
    ridge_block: int = 32
    period_min: float = 3.0
    period_max: float = 25.0
    min_valid_fraction: float = 0.25


@dataclass
class MinutiaeConfig:
    """Extraction, matching and correspondence thresholds"""
    orientation_block: int = 16
    spur_length: int = 8
    opposing_distance: float = 6.0
    dedup_distance: float = 4.0
    dedup_angle_deg: float = 10.0
    border_margin: int = 16
    descriptor_k: int = 5
    ransac_iterations: int = 200
    match_tolerance_px: float = 12.0
    match_tolerance_deg: float = 30.0
    map_sigma: float = 1.5


@dataclass
class FusionConfig:
    """Score-level fusion"""
    w_t: float = 0.5
    w_m: float = 0.5
    multi_finger_rule: str = "mean"   # mean / sum


@dataclass
class ProtocolConfig:
    """Verification pair generation"""
    rule: str = "full-cross"          # full-cross / first-impression


@dataclass
class SearchConfig:
    """Two-stage identification"""
    k: int = 500
    ranks: List[int] = field(default_factory=lambda: [1, 10, 100, 500])


@dataclass
class PipelineSection:
    """Batch orchestration"""
    seed: int = 0
    jobs: int = 4
    strict: bool = False
    skip_contact_preprocess: bool = True
    warp_source: str = "estimated"    # estimated / file
    stages: List[str] = field(default_factory=lambda: ["segment", "enhance", "scale", "warp"])
    output_dir: str = "output"
    template_dir: str = "output/templates"
    reuse_templates: bool = True


@dataclass
class DatabaseConfig:
    """Run ledger Configuration"""
    path: str = "output/c2cl_runs.db"
    echo: bool = False


@dataclass
class AppConfig:
    """Main Application Configuration"""
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    imaging: ImagingConfig = field(default_factory=ImagingConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    minutiae: MinutiaeConfig = field(default_factory=MinutiaeConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    database: DatabaseConfig = field(default_factory=DatabaseConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _find_config_file() -> Optional[Path]:
    """C2CL_CONFIG first, then ./config.yaml, then the repo root"""
    possible_paths = [Path.cwd() / "config.yaml", Path(__file__).parent.parent / "config.yaml"]
    if os.getenv('C2CL_CONFIG'):
        possible_paths.insert(0, Path(os.environ['C2CL_CONFIG']))

    for path in possible_paths:
        if path.exists():
            return path.resolve()
    return None


def _load_yaml_config(config_path: Path) -> Dict[str, Any]:
    """Load configuration from YAML file; a file that does not parse is an error"""
    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            config_dict = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ParameterError(f"Failed to load config from {config_path}: {e}") from e
    if not isinstance(config_dict, dict):
        raise ParameterError(f"Config {config_path} must be a mapping, got {type(config_dict).__name__}")
    logger.info(f"Configuration loaded from: {config_path}")
    return config_dict


def _parse_logging_config(data: Dict[str, Any]) -> LoggingConfig:
    """Parse logging configuration"""
    log_data = data.get('logging', {}) or {}
    defaults = LoggingConfig()
    return LoggingConfig(
        level=log_data.get('level', defaults.level),
        format=log_data.get('format', defaults.format),
        file=log_data.get('file', defaults.file),
        max_file_size=int(log_data.get('max_file_size', defaults.max_file_size)),
        backup_count=int(log_data.get('backup_count', defaults.backup_count))
    )


def _parse_imaging_config(data: Dict[str, Any]) -> ImagingConfig:
    """Parse imaging configuration"""
    img_data = data.get('imaging', {}) or {}
    tiles = img_data.get('clahe_tiles', [8, 8])
    return ImagingConfig(
        clahe_clip_limit=float(img_data.get('clahe_clip_limit', 2.0)),
        clahe_tiles=(int(tiles[0]), int(tiles[1])),
        canvas=int(img_data.get('canvas', 480))
    )


def _parse_segmentation_config(data: Dict[str, Any]) -> SegmentationConfig:
    """Parse segmentation configuration"""
    seg_data = data.get('segmentation', {}) or {}
    defaults = SegmentationConfig()
    return SegmentationConfig(
        smooth_sigma=float(seg_data.get('smooth_sigma', defaults.smooth_sigma)),
        closing_size=int(seg_data.get('closing_size', defaults.closing_size)),
        distal_fraction=float(seg_data.get('distal_fraction', defaults.distal_fraction)),
        elongation_ratio=float(seg_data.get('elongation_ratio', defaults.elongation_ratio)),
        min_area_frac=float(seg_data.get('min_area_frac', defaults.min_area_frac)),
        max_area_frac=float(seg_data.get('max_area_frac', defaults.max_area_frac)),
        work_size=int(seg_data.get('work_size', defaults.work_size))
    )


def _parse_geometry_config(data: Dict[str, Any]) -> GeometryConfig:
    """Parse geometry configuration"""
    geo_data = data.get('geometry', {}) or {}
    defaults = GeometryConfig()
    return GeometryConfig(
        tps_grid=int(geo_data.get('tps_grid', defaults.tps_grid)),
        tps_inset=float(geo_data.get('tps_inset', defaults.tps_inset)),
        tps_regularization=float(geo_data.get('tps_regularization', defaults.tps_regularization)),
        tps_mode=str(geo_data.get('tps_mode', defaults.tps_mode)),
        target_ridge_period=float(geo_data.get('target_ridge_period', defaults.target_ridge_period)),
        ridge_block=int(geo_data.get('ridge_block', defaults.ridge_block)),
        period_min=float(geo_data.get('period_min', defaults.period_min)),
        period_max=float(geo_data.get('period_max', defaults.period_max)),
        min_valid_fraction=float(geo_data.get('min_valid_fraction', defaults.min_valid_fraction))
    )


def _parse_minutiae_config(data: Dict[str, Any]) -> MinutiaeConfig:
    """Parse minutiae configuration"""
    min_data = data.get('minutiae', {}) or {}
    defaults = MinutiaeConfig()
    return MinutiaeConfig(
        orientation_block=int(min_data.get('orientation_block', defaults.orientation_block)),
        spur_length=int(min_data.get('spur_length', defaults.spur_length)),
        opposing_distance=float(min_data.get('opposing_distance', defaults.opposing_distance)),
        dedup_distance=float(min_data.get('dedup_distance', defaults.dedup_distance)),
        dedup_angle_deg=float(min_data.get('dedup_angle_deg', defaults.dedup_angle_deg)),
        border_margin=int(min_data.get('border_margin', defaults.border_margin)),
        descriptor_k=int(min_data.get('descriptor_k', defaults.descriptor_k)),
        ransac_iterations=int(min_data.get('ransac_iterations', defaults.ransac_iterations)),
        match_tolerance_px=float(min_data.get('match_tolerance_px', defaults.match_tolerance_px)),
        match_tolerance_deg=float(min_data.get('match_tolerance_deg', defaults.match_tolerance_deg)),
        map_sigma=float(min_data.get('map_sigma', defaults.map_sigma))
    )


def _parse_fusion_config(data: Dict[str, Any]) -> FusionConfig:
    """Parse fusion configuration"""
    fus_data = data.get('fusion', {}) or {}
    return FusionConfig(
        w_t=float(fus_data.get('w_t', 0.5)),
        w_m=float(fus_data.get('w_m', 0.5)),
        multi_finger_rule=str(fus_data.get('multi_finger_rule', 'mean'))
    )


def _parse_protocol_config(data: Dict[str, Any]) -> ProtocolConfig:
    """Parse protocol configuration"""
    proto_data = data.get('protocol', {}) or {}
    return ProtocolConfig(rule=str(proto_data.get('rule', 'full-cross')))


def _parse_search_config(data: Dict[str, Any]) -> SearchConfig:
    """Parse search configuration"""
    search_data = data.get('search', {}) or {}
    return SearchConfig(
        k=int(search_data.get('k', 500)),
        ranks=[int(r) for r in search_data.get('ranks', [1, 10, 100, 500])]
    )


def _parse_pipeline_config(data: Dict[str, Any]) -> PipelineSection:
    """Parse pipeline configuration"""
    pipe_data = data.get('pipeline', {}) or {}
    defaults = PipelineSection()
    return PipelineSection(
        seed=int(pipe_data.get('seed', defaults.seed)),
        jobs=int(pipe_data.get('jobs', defaults.jobs)),
        strict=bool(pipe_data.get('strict', defaults.strict)),
        skip_contact_preprocess=bool(pipe_data.get('skip_contact_preprocess', defaults.skip_contact_preprocess)),
        warp_source=str(pipe_data.get('warp_source', defaults.warp_source)),
        stages=list(pipe_data.get('stages', defaults.stages)),
        output_dir=str(pipe_data.get('output_dir', defaults.output_dir)),
        template_dir=str(pipe_data.get('template_dir', defaults.template_dir)),
        reuse_templates=bool(pipe_data.get('reuse_templates', defaults.reuse_templates))
    )


def _parse_database_config(data: Dict[str, Any]) -> DatabaseConfig:
    """Parse database configuration"""
    db_data = data.get('database', {}) or {}
    return DatabaseConfig(
        path=db_data.get('path', 'output/c2cl_runs.db'),
        echo=bool(db_data.get('echo', False))
    )


def config_from_dict(config_dict: Dict[str, Any]) -> AppConfig:
    """Build an AppConfig from an already-parsed mapping"""
    return AppConfig(
        logging=_parse_logging_config(config_dict),
        imaging=_parse_imaging_config(config_dict),
        segmentation=_parse_segmentation_config(config_dict),
        geometry=_parse_geometry_config(config_dict),
        minutiae=_parse_minutiae_config(config_dict),
        fusion=_parse_fusion_config(config_dict),
        protocol=_parse_protocol_config(config_dict),
        search=_parse_search_config(config_dict),
        pipeline=_parse_pipeline_config(config_dict),
        database=_parse_database_config(config_dict)
    )


def load_config_file(config_path: str) -> AppConfig:
    """Load an explicit config file (CLI --config)"""
    path = Path(config_path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {config_path}")
    return config_from_dict(_load_yaml_config(path))


@lru_cache(maxsize=1)
def load_config() -> AppConfig:
    """
    Load and parse application configuration.
    Uses caching to avoid repeated file reads.
    """
    config_path = _find_config_file()

    if config_path:
        config_dict = _load_yaml_config(config_path)
    else:
        logger.warning("No config.yaml found, using default configuration")
        config_dict = {}

    return config_from_dict(config_dict)


def reload_config() -> AppConfig:
    """
    Force reload configuration from file.
    Clears the cache and reloads.
    """
    load_config.cache_clear()
    return load_config()


# Environment variable overrides
def apply_env_overrides(config: AppConfig) -> AppConfig:
    """
    Apply environment variable overrides to configuration.
    Environment variables take precedence over config file.
    Returns a new AppConfig; the one passed in (possibly cached) is left as is.
    """
    log_changes: Dict[str, Any] = {}
    pipe_changes: Dict[str, Any] = {}
    db_changes: Dict[str, Any] = {}
    if os.getenv('C2CL_LOG_LEVEL'):
        log_changes['level'] = os.getenv('C2CL_LOG_LEVEL')
    if os.getenv('C2CL_SEED'):
        pipe_changes['seed'] = int(os.getenv('C2CL_SEED'))
    if os.getenv('C2CL_JOBS'):
        pipe_changes['jobs'] = int(os.getenv('C2CL_JOBS'))
    if os.getenv('C2CL_STRICT'):
        pipe_changes['strict'] = os.getenv('C2CL_STRICT').lower() in ('true', '1', 'yes')
    if os.getenv('C2CL_OUTPUT_DIR'):
        pipe_changes['output_dir'] = os.getenv('C2CL_OUTPUT_DIR')
        pipe_changes['template_dir'] = str(Path(pipe_changes['output_dir']) / "templates")
    if os.getenv('C2CL_DB_PATH'):
        db_changes['path'] = os.getenv('C2CL_DB_PATH')

    return replace(
        config,
        logging=replace(config.logging, **log_changes),
        pipeline=replace(config.pipeline, **pipe_changes),
        database=replace(config.database, **db_changes),
    )


_config: Optional[AppConfig] = None


def init_config(config_path: Optional[str] = None) -> AppConfig:
    """Initialize configuration on application startup"""
    global _config
    _config = load_config_file(config_path) if config_path else load_config()
    _config = apply_env_overrides(_config)
    return _config


def get_current_config() -> AppConfig:
    """Get current initialized configuration"""
    global _config
    if _config is None:
        _config = init_config()
    return _config
