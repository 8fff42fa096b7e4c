"""Exception types shared across the package."""


class SkeganError(Exception):
    """Base class for all package-specific errors."""


class StrokeFormatError(SkeganError, ValueError):
    """A stroke record or stroke-5 sequence violates the format invariants."""


class EmptyDatasetError(SkeganError, ValueError):
    """An operation that needs at least one sketch received none."""


class NonFiniteError(SkeganError, ArithmeticError):
    """A NaN or infinity appeared; the message names the producing operation."""


class CheckpointError(SkeganError, IOError):
    """A checkpoint file is unreadable, truncated, or of the wrong version."""


class TrainingDivergedError(SkeganError, RuntimeError):
    """Training hit a non-finite loss.

    Carries the last checkpoint taken while the loss was still finite so the
    run can be resumed or inspected.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
