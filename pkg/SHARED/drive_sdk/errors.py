"""
Exception hierarchy for the differentiable driving simulator.

Every error carries a short error code so that the CLI (and log readers) can
discriminate failures without parsing messages.
"""

from typing import Optional


class DiffDriveError(Exception):
    """Base class for all simulator errors"""

    error_code = "E000"

    def __init__(self, message: str, error_code: Optional[str] = None):
        super().__init__(message)
        if error_code is not None:
            self.error_code = error_code


class ShapeError(DiffDriveError, ValueError):
    """Operands with incompatible shapes"""
    error_code = "E001"


class NonFiniteError(DiffDriveError, ValueError):
    """A forward op produced NaN or Inf, or was given non-finite input"""
    error_code = "E002"


class DomainError(DiffDriveError, ValueError):
    """Input outside the mathematical domain of an op (log of 0, atan2 at origin, ...)"""
    error_code = "E003"


class GeometryError(DiffDriveError, ValueError):
    """Degenerate geometry (zero-area box, polygon with too few vertices)"""
    error_code = "E004"


class FittingError(DiffDriveError, ValueError):
    """Trajectory cannot be fitted by the bicycle model"""
    error_code = "E005"


class TrackFormatError(DiffDriveError, ValueError):
    """Malformed track CSV"""
    error_code = "E010"


class MapFormatError(DiffDriveError, ValueError):
    """Malformed map file"""
    error_code = "E011"


class CheckpointError(DiffDriveError, ValueError):
    """Unreadable or incompatible model checkpoint"""
    error_code = "E012"


class ConfigError(DiffDriveError, ValueError):
    """Invalid configuration or command-line flags"""
    error_code = "E013"


class EgoNotPresentError(DiffDriveError, ValueError):
    """Requested ego agent has no valid state at the requested step"""
    error_code = "E014"


class RolloutFormatError(DiffDriveError, ValueError):
    """Malformed rollout export"""
    error_code = "E015"


class TrainingDivergedError(DiffDriveError, RuntimeError):
    """Training loss became non-finite"""
    error_code = "E020"


# Errors caused by bad user input rather than a failure while running.
USAGE_ERRORS = (
    TrackFormatError,
    MapFormatError,
    CheckpointError,
    ConfigError,
    GeometryError,
    FittingError,
    EgoNotPresentError,
    RolloutFormatError,
)
