"""Exception types raised across the package."""


class SurfelTrackError(Exception):
    """Base class for all package errors."""


class InvalidDepth(SurfelTrackError):
    """Depth missing or non-positive around a requested pixel."""


class BadArity(SurfelTrackError, ValueError):
    """Wrong number of deformation parameters for a model."""


class Singular(SurfelTrackError, ValueError):
    """Deformation parameters produce an undefined tensor."""


class OutOfBounds(SurfelTrackError):
    """Sample location outside the valid image domain."""


class TooSmall(SurfelTrackError, ValueError):
    """Image too small for the requested pyramid depth."""


class BehindCamera(SurfelTrackError):
    """Point at or behind the camera plane."""


class OutOfImage(SurfelTrackError):
    """Texture grid does not fit inside the reference image."""


class LinearSolveFailure(SurfelTrackError):
    """Damped normal equations stayed singular after all retries."""


class TrackingLost(SurfelTrackError):
    """Camera pose became unobservable or the joint solve diverged."""

    def __init__(self, message, frames_processed=0, results=None):
        super().__init__(message)
        self.frames_processed = frames_processed
        self.results = results if results is not None else []


class AnchorOffSurface(SurfelTrackError, ValueError):
    """Ground-truth anchor does not lie on any body surface."""


class UnknownPreset(SurfelTrackError, ValueError):
    """Scene preset name not recognised."""


class DatasetError(SurfelTrackError):
    """Malformed or missing dataset files."""
