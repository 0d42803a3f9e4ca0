"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: data/compatibility problems exit with 2,
numeric failures with 3.
"""


class CtrScopeError(Exception):
    """Base class for all package errors."""


class SchemaError(CtrScopeError, ValueError):
    """A feature schema or generator configuration is invalid."""


class DataParseError(CtrScopeError, ValueError):
    """A dataset file is malformed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CompatibilityError(CtrScopeError):
    """Data, schema and checkpoint do not belong together."""


class ShapeError(CtrScopeError, ValueError):
    """Tensors that must be co-shaped are not."""


class NumericError(CtrScopeError, ArithmeticError):
    """A non-finite value appeared during a computation."""


class TrainingDivergedError(NumericError):
    def __init__(self, step: int, batch: int):
        self.step = step
        self.batch = batch
        super().__init__(f"non-finite loss at step {step} (batch {batch})")


class UndefinedMetricError(CtrScopeError, ValueError):
    """A metric is undefined for the given input (e.g. AUC on one class)."""
