"""Exception types shared across the package."""


class MuxloopError(Exception):
    """Base class for all errors raised by muxloop."""


class ParameterError(MuxloopError, ValueError):
    """A parameter lies outside its physical or logical domain."""


class UndefinedRatioError(MuxloopError, ZeroDivisionError):
    """A ratio was requested whose denominator vanishes."""


class InconsistentCountsError(MuxloopError, ValueError):
    """Measured counts cannot come from a heralded pair source."""


class CapacityError(MuxloopError, ValueError):
    """A request exceeds what the timing budget or the run size allows."""


class UndefinedEstimateError(MuxloopError, ValueError):
    """An estimator has no data to work with (e.g. zero heralds)."""


class ConfigError(MuxloopError, ValueError):
    """A configuration document failed validation."""
