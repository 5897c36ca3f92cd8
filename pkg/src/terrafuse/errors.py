"""Exception hierarchy shared by all terrafuse modules."""


class TerrafuseError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(TerrafuseError, ValueError):
    """An argument violates a documented precondition or invariant."""


class InsufficientDataError(TerrafuseError):
    """Too few observations to run the requested estimation."""


class NoConvergenceError(TerrafuseError):
    """Iterative optimisation failed to converge.

    Carries the last residual so callers can report how far off it was.
    """

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class EmptyWindowError(TerrafuseError):
    """An acceleration window contains no samples."""


class EmptyTrajectoryError(TerrafuseError):
    """A trajectory with no samples was queried."""


class EmptyPatchError(TerrafuseError):
    """A ground patch with no points was passed to feature extraction."""


class InvalidSpectrumError(TerrafuseError):
    """A spectrum lacks the bands required by the requested operation."""


class UndefinedNdviError(TerrafuseError):
    """NDVI is undefined because NIR + RED is zero."""


class InvalidStreamError(TerrafuseError):
    """A feature stream is not time-ordered."""


class DatasetError(TerrafuseError):
    """Base class for on-disk dataset problems."""


class MissingManifestError(DatasetError):
    """The dataset directory has no manifest file."""


class MissingPayloadError(DatasetError):
    """A manifest record points at a payload file that does not exist."""


class DatasetFormatError(DatasetError):
    """A dataset file exists but does not parse against its schema."""
