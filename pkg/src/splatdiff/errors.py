"""Exception types raised across the package."""


class SplatDiffError(Exception):
    """Base class for all package errors."""


class ShapeError(SplatDiffError, ValueError):
    """Array or tensor dimensions do not line up."""


class RigError(SplatDiffError, ValueError):
    """Invalid camera rig request."""


class ScheduleError(SplatDiffError, ValueError):
    """Bad noise schedule construction or timestep ordering."""


class PipelineError(SplatDiffError, RuntimeError):
    """A stage of the sampling / training pipeline produced inconsistent output."""


class CheckpointError(SplatDiffError, IOError):
    """Checkpoint or cloud file could not be read."""


class NonFiniteLossError(SplatDiffError, FloatingPointError):
    """Training produced a NaN/Inf loss."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
