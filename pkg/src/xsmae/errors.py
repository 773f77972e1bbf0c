"""Exception types shared across the package."""


class XsmaeError(Exception):
    """Base class for package errors."""


class ShapeError(XsmaeError, ValueError):
    """Operand shapes do not conform."""


class ConfigError(XsmaeError, ValueError):
    """Invalid configuration value or combination."""


class DegenerateInputError(XsmaeError, ValueError):
    """Input is mathematically degenerate (zero norm, sub-pixel scale, ...)."""


class ConsistencyError(XsmaeError, ValueError):
    """Two pieces of state that must agree do not (mask vs grid, ...)."""


class DivergenceError(XsmaeError, RuntimeError):
    """Training produced a non-finite quantity."""


class OracleError(XsmaeError, RuntimeError):
    """A verification oracle could not be evaluated."""


class CheckpointError(XsmaeError, RuntimeError):
    """Checkpoint file is malformed or incompatible with the config."""
