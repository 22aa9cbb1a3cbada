"""
Domain exceptions for the c2cl pipeline.
"""


class C2CLError(Exception):
    """Base class for all pipeline errors"""


class ParameterError(C2CLError, ValueError):
    """Invalid numeric parameter or argument"""


class DimensionMismatchError(ParameterError):
    """Two rasters or vectors that must agree in shape do not"""


class ImageFormatError(C2CLError):
    """Unreadable, empty or out-of-range image data"""


class SegmentationFailedError(C2CLError):
    """No plausible finger region found"""


class NoRidgeStructureError(C2CLError):
    """Too few blocks carry oriented periodic texture"""


class SingularSystemError(C2CLError):
    """TPS system cannot be solved (coincident control points)"""


class EmbeddingFormatError(C2CLError):
    """Embedding file has the wrong length, magic or non-finite values"""


class TemplateFormatError(C2CLError):
    """Template file is corrupt or has an unsupported version"""


class ManifestError(C2CLError):
    """Dataset manifest is malformed or inconsistent"""


class InsufficientScoresError(C2CLError):
    """Metric requested on an empty genuine or imposter list"""
