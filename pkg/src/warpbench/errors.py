"""Exception types shared across the package."""


class WarpBenchError(Exception):
    """Base class for all errors raised by warpbench."""


class ConfigError(WarpBenchError, ValueError):
    """Invalid argument, shape or configuration value."""


class DegenerateDraw(WarpBenchError, ArithmeticError):
    """A random tensor had (numerically) zero mean absolute value."""


class FormatError(WarpBenchError):
    """A file on disk does not match its expected binary/text layout."""


class StateError(WarpBenchError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class TrainingDiverged(WarpBenchError, RuntimeError):
    def __init__(self, epoch: int, message: str = "loss became non-finite"):
        super().__init__(f"training diverged at epoch {epoch}: {message}")
        self.epoch = epoch
