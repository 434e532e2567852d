"""Exception types raised by the simulator."""


class TileError(Exception):
    """Base class for all simulator errors."""


class ConfigError(TileError, ValueError):
    pass


class RangeError(TileError, ValueError):
    pass


class DimensionError(TileError, ValueError):
    pass


class ConvergenceError(TileError, ArithmeticError):
    """Fixed-point solve did not converge.

    ``last_iterate`` and ``residual`` hold the final state of the loop.
    """

    def __init__(self, message, last_iterate=None, residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class StatisticalQualityError(TileError):
    pass


class FitQualityError(TileError):
    pass


class UndefinedMetricError(TileError, ValueError):
    pass


class CalibrationError(TileError):
    pass
