"""
Services Package
"""
from .imaging import GrayImage, clahe, invert, load_image, resize_pad, save_image
from .segmentation import Mask, iou, segment_distal
from .geometry import AffineParams, TPSField, WarpParams, warp_image, warp_param_gradients
from .minutiae import Minutia, MinutiaeSet, extract_minutiae, match_minutiae, correspondence_metrics
from .representation import Embedding, extract_texture_embedding, import_embedding, texture_similarity
from .matcheval import ScoreSet, eer, gen_protocol, metric_report, roc, tar_at_far
from .search import GalleryIndex, Template, rank_n_search, two_stage_search
from .template_store import TemplateStore

__all__ = [
    "GrayImage", "clahe", "invert", "load_image", "resize_pad", "save_image",
    "Mask", "iou", "segment_distal",
    "AffineParams", "TPSField", "WarpParams", "warp_image", "warp_param_gradients",
    "Minutia", "MinutiaeSet", "extract_minutiae", "match_minutiae", "correspondence_metrics",
    "Embedding", "extract_texture_embedding", "import_embedding", "texture_similarity",
    "ScoreSet", "eer", "gen_protocol", "metric_report", "roc", "tar_at_far",
    "GalleryIndex", "Template", "rank_n_search", "two_stage_search",
    "TemplateStore",
]
