"""Exception hierarchy shared across the pipeline stages."""


class ClipArtError(Exception):
    """Base class for all errors raised by this package."""


# geometry
class NonPositiveDepth(ClipArtError):
    pass


class RayParallelToPlane(ClipArtError):
    pass


class PointBehindCamera(ClipArtError):
    pass


# shape model / metrics
class DimensionMismatch(ClipArtError):
    pass


# pose fitting
class TooFewPoints(ClipArtError):
    pass


class DegenerateConfiguration(ClipArtError):
    pass


class DivergedOptimization(ClipArtError):
    pass


class EmptyTrack(ClipArtError):
    pass


# mining
class LengthMismatch(ClipArtError):
    pass


# compositor
class EmptyPool(ClipArtError):
    pass


class OverlappingFootprints(ClipArtError):
    pass


class CropOutOfBounds(ClipArtError):
    pass


class DegenerateHull(ClipArtError):
    pass


class EmptyAmodal(ClipArtError):
    pass


class ModalNotSubset(ClipArtError):
    pass


# synthetic scenes
class InfeasiblePlacement(ClipArtError):
    pass


# metrics
class EmptyGroundTruth(ClipArtError):
    pass


class NoAnnotatedKeypoints(ClipArtError):
    pass


# dataset io
class ParseError(ClipArtError):
    """Malformed document. Message carries file path and field diagnostics."""


class ValidationError(ClipArtError):
    """Document parsed but violates a declared invariant."""


class VersionMismatch(ClipArtError):
    pass


class SizeMismatch(ClipArtError):
    pass


class CountOverflow(ClipArtError):
    pass


# cli
class ConfigError(ClipArtError):
    pass


class InputMissing(ClipArtError):
    pass


class StageError(ClipArtError):
    """Wraps a module error with the pipeline stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
