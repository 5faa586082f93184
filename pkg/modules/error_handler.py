"""
Error Handling
==============
Exception hierarchy and exit-code policy for the reranker.

This module provides:
- Structured exceptions that name the failing record, shape or parameter block
- Classification of exceptions into validation / numeric / I/O failures
- Exit-code contract for the command surface (0 ok, 2 validation, 3 numeric)
- Error statistics for the run report
"""
import functools
import logging
from typing import Any, Callable, Dict, Optional, Sequence

logger = logging.getLogger("error_handler")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


class ClannError(Exception):
    """Base class for every error raised by this package."""
    pass


class ValidationError(ClannError):
    """Invalid input: config, data record, shape or schema."""
    pass


class ConfigError(ValidationError):
    """Raised when a run config or hyper-parameter value is invalid."""
    pass


class RecordError(ValidationError):
    """
    Raised for malformed input records.

    Carries the file path and 1-based line number when known.
    """

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        elif line is not None:
            location = f"line {line}: "
        super().__init__(f"{location}{message}")


class DimensionMismatch(ValidationError):
    """Raised when array shapes do not line up."""

    def __init__(self, operation: str, left: Sequence[int], right: Sequence[int]):
        self.operation = operation
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{operation}: shape mismatch {self.left} vs {self.right}")


class SchemaMismatch(ValidationError):
    """Raised when a model file does not match the supplied resources."""

    def __init__(self, what: str, expected: Any, actual: Any):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what} mismatch: model has {expected!r}, supplied {actual!r}")


class EmptyPoolError(ValidationError):
    """Raised when a required example pool is empty."""

    def __init__(self, pool: str):
        self.pool = pool
        super().__init__(f"required pool '{pool}' is empty")


class NumericAbort(ClannError):
    """
    Raised when training produces a non-finite loss or gradient.

    Training aborts instead of skipping the batch so imbalance between the
    task head and the discriminator is never hidden.
    """

    def __init__(self, epoch: int, batch: int, block: str, detail: str = ""):
        self.epoch = epoch
        self.batch = batch
        self.block = block
        msg = f"non-finite values at epoch {epoch}, batch {batch}, parameter block '{block}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ErrorHandler:
    """
    Centralised classification of failures.

    Features:
    - Validation vs numeric vs I/O classification
    - Statistics by exception type
    - Exit-code mapping for the CLI
    """

    def __init__(self):
        self.stats = {
            'total_failures': 0,
            'validation_failures': 0,
            'numeric_failures': 0,
            'io_failures': 0,
            'errors_by_type': {},
        }

    @staticmethod
    def classify(error: BaseException) -> str:
        """Return 'validation', 'numeric', 'io' or 'unexpected'."""
        if isinstance(error, ValidationError):
            return 'validation'
        if isinstance(error, (NumericAbort, FloatingPointError)):
            return 'numeric'
        if isinstance(error, OSError):
            return 'io'
        return 'unexpected'

    def exit_code_for(self, error: BaseException) -> int:
        """Map an exception to the command-line exit code."""
        kind = self.classify(error)
        if kind == 'validation':
            return EXIT_VALIDATION
        if kind == 'numeric':
            return EXIT_NUMERIC
        if kind == 'io':
            # Missing or unreadable inputs are an operator validation problem
            return EXIT_VALIDATION
        return EXIT_UNEXPECTED

    def record_error(self, error: BaseException):
        """Record an error in the statistics."""
        kind = self.classify(error)
        self.stats['total_failures'] += 1
        if kind in ('validation', 'numeric', 'io'):
            self.stats[f'{kind}_failures'] += 1
        error_type = type(error).__name__
        self.stats['errors_by_type'][error_type] = \
            self.stats['errors_by_type'].get(error_type, 0) + 1

    def get_stats(self) -> Dict[str, Any]:
        """Get error statistics."""
        return dict(self.stats)


# Global error handler instance
_error_handler = ErrorHandler()


def with_exit_codes(func: Callable[..., Optional[int]]) -> Callable[..., int]:
    """
    Decorator for CLI commands: turns exceptions into exit codes.

    Usage:
        @with_exit_codes
        def cmd_train(args):
            ...
            return 0
    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs) -> int:
        try:
            result = func(*args, **kwargs)
            return EXIT_OK if result is None else int(result)
        except Exception as e:
            _error_handler.record_error(e)
            code = _error_handler.exit_code_for(e)
            kind = _error_handler.classify(e)
            if kind == 'unexpected':
                logger.exception(f"{func.__name__} failed: {e}")
            else:
                logger.error(f"{func.__name__} failed ({kind}): {e}")
            return code

    return wrapper


def get_error_stats() -> Dict[str, Any]:
    """Get global error statistics."""
    return _error_handler.get_stats()
