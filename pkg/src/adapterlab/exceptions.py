"""Exception hierarchy shared across adapterlab."""


class AdapterLabError(Exception):
    """Base class for every error raised by adapterlab."""


class ShapeError(AdapterLabError, ValueError):
    """Operand shapes are incompatible."""


class SvdConvergenceError(AdapterLabError, ArithmeticError):
    """One-sided Jacobi failed to converge within the sweep cap."""

    def __init__(self, sweeps, residual):
        self.sweeps = sweeps
        self.residual = residual
        super().__init__(
            f"Jacobi SVD did not converge after {sweeps} sweeps "
            f"(relative off-diagonal mass {residual:.3e})"
        )


class ConfigError(AdapterLabError, ValueError):
    """Invalid configuration value or config file contents."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StaleCacheError(AdapterLabError, RuntimeError):
    """A forward cache was used with parameters it was not computed from."""


class IdxFormatError(AdapterLabError, ValueError):
    """Malformed IDX file."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    def __init__(self, path, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"{path}: truncated IDX file, expected {expected} bytes, got {actual}"
        )


class IdxCountMismatchError(IdxFormatError):
    pass


class IdxLabelRangeError(IdxFormatError):
    pass


class CheckpointError(AdapterLabError, ValueError):
    """Checkpoint file cannot be read."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class SchemaError(AdapterLabError, ValueError):
    """A metrics CSV does not follow the expected column layout."""
