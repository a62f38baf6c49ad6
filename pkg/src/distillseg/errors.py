"""Exception types shared across the package."""


class DistillsegError(Exception):
    """Base class for all package errors."""


class DecodeError(DistillsegError):
    """An image file could not be read or decoded."""


class ShapeError(DistillsegError):
    """Two grids that must match in shape do not."""


class EmptyMaskError(DistillsegError):
    """An operation requiring foreground pixels received an empty mask."""


class InsufficientDataError(DistillsegError):
    """Not enough samples to satisfy the request."""


class InsufficientPixelsError(DistillsegError):
    """A mask does not contain enough pixels of the requested label."""


class UndefinedMetricError(DistillsegError):
    """A metric has no defined value for this input."""


class DegenerateTestError(DistillsegError):
    """A statistical test cannot be computed (zero-variance differences)."""


class ConfigurationError(DistillsegError):
    """Invalid model, schedule, or training configuration."""


class NumericalError(DistillsegError):
    """A numeric precondition failed (NaN component, non-PSD matrix)."""


class NoDetectionError(DistillsegError):
    """The detector produced no box above the confidence floor."""


class EmptyPromptError(DistillsegError):
    """A prompt string or prompt set was empty."""


class StateTransitionError(DistillsegError):
    """An illegal state transition was attempted (e.g. deciding twice)."""


class ExternalServiceError(DistillsegError):
    """A call to an external generation service failed.

    Attributes:
        retry_after: suggested seconds to wait before retrying, or None.
    """

    def __init__(self, message, retry_after=None):
        super().__init__(message)
        self.retry_after = retry_after


class CheckpointError(DistillsegError):
    """A checkpoint archive is missing, malformed, or inconsistent."""
