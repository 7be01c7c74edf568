"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes; library code raises them
directly so callers can tell a bad argument from a bad file from a
diverged run.
"""


class ShapeError(ValueError):
    """Operands have incompatible or malformed dimensions."""


class NotPsdError(ValueError):
    """A matrix required to be positive semi-definite is not."""


class ConfigError(ValueError):
    """Bad run configuration (unknown key, unparseable value, bad grid)."""


class DataFormatError(ValueError):
    """A dataset or snapshot file does not match its declared format."""


class DataError(ValueError):
    """Semantically invalid data (labels out of range, empty subset...)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite parameter vector or loss."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class AnalysisError(RuntimeError):
    """A snapshot series cannot support the requested analysis."""


class ConsistencyError(RuntimeError):
    """An internal cross-check failed (quantities disagree beyond tolerance)."""


class VerificationError(RuntimeError):
    """The self-check suite found a failing identity."""
