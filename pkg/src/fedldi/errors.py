"""Exception types shared across the package."""


class FedLdiError(Exception):
    """Base class for all package errors."""


class ShapeError(FedLdiError, ValueError):
    pass


class ValidationError(FedLdiError, ValueError):
    pass


class FormatError(FedLdiError, ValueError):
    """Malformed on-disk data (IDX files, checkpoints)."""


class CapacityError(FedLdiError, ValueError):
    """The pool does not hold enough samples to satisfy a partition request."""


class SearchFailure(FedLdiError, RuntimeError):
    """Size search did not reach the tolerance band.

    ``best`` holds the candidate size whose probe norm was closest to the
    target, ``trace`` the full search trace.
    """

    def __init__(self, message, best=None, trace=None):
        super().__init__(message)
        self.best = best
        self.trace = trace or []


class ConfigError(FedLdiError, ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class StageError(FedLdiError, RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
