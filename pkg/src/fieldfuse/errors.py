"""Exception types shared across the pipeline stages."""


class FieldFuseError(Exception):
    """Base class for all package-specific errors."""


class AngleAtCutoff(FieldFuseError):
    """Rotation angle too close to pi for a stable logarithm."""


class PixelOutOfBounds(FieldFuseError):
    """Requested pixel lies outside the camera image bounds."""


class DimensionMismatch(FieldFuseError):
    """Array shapes or vector dimensionalities do not agree."""


class DivergenceDetected(FieldFuseError):
    """An optimization loss became non-finite."""


class NoConvergence(FieldFuseError):
    """Optimization hit its iteration budget without meeting the threshold.

    Raised only where a caller asks for strict behavior; most loops report
    the condition through a flag instead.
    """


class NoValidCandidates(FieldFuseError):
    """Candidate selection received no successful registration results."""


class EmptyIndex(FieldFuseError):
    """Search issued against an index with no elements."""


class EmptyInput(FieldFuseError):
    """Operation received empty input where at least one element is required."""


class InvalidArgument(FieldFuseError):
    """Argument value violates a documented precondition."""


class InvalidSpec(FieldFuseError):
    """Scene specification fails validation."""


class ImageTooSmall(FieldFuseError):
    """Image smaller than the minimum size required by the metric window."""


class DegenerateConfiguration(FieldFuseError):
    """Geometric configuration leaves the requested estimate underdetermined."""


class NonPositiveDistance(FieldFuseError):
    """Distance-ratio weighting requires strictly positive distances."""


class ConfigError(FieldFuseError):
    """Pipeline configuration is malformed or references missing paths."""


class StageFailure(FieldFuseError):
    """A pipeline stage aborted; partial artifacts are retained."""
