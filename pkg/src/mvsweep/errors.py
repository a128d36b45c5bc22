"""Exception types raised across the reconstruction pipeline."""


class ReconstructionError(Exception):
    """Base class for all pipeline errors."""


# --- geometry ---

class DepthNonPositive(ReconstructionError):
    """A point has z <= 0 in the camera it is projected into."""


class DegenerateConfiguration(ReconstructionError):
    """Minimal-solver input is rank deficient (coincident or collinear points)."""


class InsufficientMatches(ReconstructionError):
    """Fewer matches than the minimal sample size."""


class NoConsensus(ReconstructionError):
    """Robust estimation found no model above the inlier-ratio floor."""


class CheiralityAmbiguous(ReconstructionError):
    """Two pose candidates tie on positive-depth support."""


class RaysParallel(ReconstructionError):
    """Triangulation rays are (near-)parallel."""


class ZeroTranslation(ReconstructionError):
    """Translation has no direction to normalize."""


# --- matching ---

class ImageTooSmall(ReconstructionError):
    """Input image below the minimum supported size."""


class DimensionMismatch(ReconstructionError):
    """Feature maps disagree in descriptor dimension or scale."""


class NoValidFlow(ReconstructionError):
    """A flow field has an empty validity mask."""


# --- depth ---

class NonPositiveDepth(ReconstructionError):
    """A plane depth hypothesis must be strictly positive."""


class NoSourceViews(ReconstructionError):
    """Plane sweep requires at least one source view."""


# --- fusion ---

class TooFewViews(ReconstructionError):
    """Fusion requires at least two depth maps."""


# --- evaluation ---

class ShapeMismatch(ReconstructionError):
    """Prediction and ground truth have different shapes."""


class NoOverlap(ReconstructionError):
    """No jointly valid pixels to evaluate."""


class EmptyCloud(ReconstructionError):
    """Point-cloud metric on an empty cloud."""


# --- synthetic scenes ---

class ViewIndexOutOfRange(ReconstructionError):
    """Requested view index not present in the scene."""


# --- io / driver ---

class ParseError(ReconstructionError):
    """A file does not match its documented format.

    Carries the byte offset at which parsing failed when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ReconstructionError):
    """Invalid pipeline configuration."""


class PipelineStageError(ReconstructionError):
    """Failure inside a pipeline stage, annotated with stage and view context."""

    def __init__(self, stage, message, views=None):
        context = f"stage '{stage}'"
        if views:
            context += f", views {list(views)}"
        super().__init__(f"{context}: {message}")
        self.stage = stage
        self.views = list(views) if views else []
