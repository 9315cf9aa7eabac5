"""Exception types shared across the package.

The CLI maps these onto its exit-code contract (see ``panoslam.cli``).
"""


class PanoSlamError(Exception):
    """Base class for all package errors."""


class InvalidInputError(PanoSlamError, ValueError):
    """A geometric operation received an argument outside its domain."""


class ConfigurationError(PanoSlamError, ValueError):
    """Inconsistent or malformed configuration."""


class CorrectionUnavailableError(PanoSlamError):
    """Too few (or collinear) correction pixels to build an interpolant."""


class TrackingLostError(PanoSlamError):
    """Raised when a frame cannot be tracked against the map."""

    def __init__(self, frame_index, n_matches, message=None):
        self.frame_index = frame_index
        self.n_matches = n_matches
        super().__init__(
            message or f"tracking lost at frame {frame_index}: {n_matches} usable matches"
        )


class EvaluationError(PanoSlamError):
    """Trajectories cannot be compared (too few associated poses, too short...)."""


class DatasetError(PanoSlamError):
    """A dataset or trajectory file is missing or does not parse."""

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")
