"""Exception types raised by the library."""


class UnisplatError(ValueError):
    """Base class for all library errors."""


class DegenerateReference(UnisplatError):
    """Scale solve has no information: sum of squared predictions is zero."""


class LengthMismatch(UnisplatError):
    """Per-camera vector length does not match the camera count."""


class ShapeMismatch(UnisplatError):
    """Array shape incompatible with a network or sampling operation."""


class ChannelMismatch(UnisplatError):
    """Sparse conv layer channel count does not match its input."""


class GridMismatch(UnisplatError):
    """Scaffold operands do not share grid spec or feature width."""


class DimensionMismatch(UnisplatError):
    """Image/mask dimensions disagree."""


class AllMasked(UnisplatError):
    """A masked reduction has no surviving pixels."""


class InsufficientValidPixels(UnisplatError):
    """Requested more sample pixels than are valid in the frame."""


class ConfigNotFound(UnisplatError):
    """Config or scene file path does not exist."""


class PipelineStageError(UnisplatError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
