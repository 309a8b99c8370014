"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ValidationError -> 1,
NumericFault -> 2, CorruptionError (and plain OSError) -> 3.
"""


class ValidationError(Exception):
    """Bad configuration, arguments, or input data."""


class ShapeError(ValidationError):
    """Tensor operation called with non-conforming extents."""


class NumericFault(ArithmeticError):
    """A forward operation produced NaN/Inf, or a training step diverged."""


class CorruptionError(Exception):
    """A dataset or checkpoint file failed structural validation."""
