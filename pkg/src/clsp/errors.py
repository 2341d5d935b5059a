"""Exception hierarchy shared across the package.

CLI exit-code mapping lives in :mod:`clsp.cli`; library code raises these
directly and never calls ``sys.exit``.
"""


class ClspError(Exception):
    """Base class for all package-specific errors."""


class InvalidArgumentError(ClspError, ValueError):
    """A caller-supplied value violates a documented precondition."""


class InvalidStateError(ClspError, RuntimeError):
    """An operation was invoked on an object in an unusable state."""


class DegenerateEmbeddingError(ClspError, ArithmeticError):
    """A projected embedding is the zero vector and cannot be normalized."""


class NumericError(ClspError, ArithmeticError):
    """Training produced a non-finite value; carries diagnostic context."""

    def __init__(self, message: str, **context):
        if context:
            detail = ", ".join(f"{k}={v}" for k, v in sorted(context.items()))
            message = f"{message} ({detail})"
        super().__init__(message)
        self.context = context


class CorruptStoreError(ClspError, OSError):
    """A persisted artifact (candidate store, checkpoint) fails size or digest validation."""


class UnsupportedFormatError(ClspError, OSError):
    """A persisted artifact declares a format version we cannot read."""


class StratificationError(ClspError, ValueError):
    """Stratified label subsampling left a class without examples."""
