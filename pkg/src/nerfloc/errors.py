"""Exception types shared across the localization pipeline."""


class SceneBoundsError(ValueError):
    """Coordinates fall outside the field's normalized scene bounds."""


class CorruptCheckpointError(RuntimeError):
    """A checkpoint file failed validation (bad magic, version, or non-finite values)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class InsufficientOverlapError(RuntimeError):
    """Two views share too little surface to produce the required matches."""


class DegenerateGeometryError(ValueError):
    """A geometric configuration with no valid solution (collinear points, empty frustum)."""


class LocalizationFailure(RuntimeError):
    """RANSAC could not find a pose supported by at least four inliers."""


class StageError(RuntimeError):
    """A pipeline stage aborted; partial artifacts are left in the output directory."""

    def __init__(self, stage, message=None):
        self.stage = stage
        super().__init__(message or f"pipeline stage '{stage}' failed")
