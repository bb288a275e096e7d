"""Exception classes.

Every error raised by treeood derives from `TreeOODError` and from the builtin
exception closest in meaning, so ``except ValueError`` keeps working for
callers who do not care about the library hierarchy.
"""

from __future__ import annotations


class TreeOODError(Exception):
    """Base class for all treeood errors."""


class LoadError(TreeOODError, OSError):
    """A mandatory input file is missing or unreadable."""


class FormatError(TreeOODError, ValueError):
    """Input data does not follow the expected file format."""


class VersionError(FormatError):
    """A persisted artifact was written by an incompatible format version."""


class ParameterError(TreeOODError, ValueError):
    """An argument is outside the range an operation accepts."""


class BatchSizeError(ParameterError):
    """A batch is too small for the requested loss."""


class DomainError(TreeOODError, ValueError):
    """The input lies outside the mathematical domain of an operation,
    e.g. structural entropy of an edgeless graph."""


class StructuralError(TreeOODError, ValueError):
    """A coding tree operation was applied to nodes that do not satisfy
    its structural precondition."""


class ShapeError(TreeOODError, ValueError):
    """Tensor or matrix dimensions do not chain."""


class NumericError(TreeOODError, ArithmeticError):
    """A loss, gradient or update became non-finite."""

    def __init__(self, message: str, term: str | None = None) -> None:
        super().__init__(message)
        self.term = term


class UndefinedMetricError(TreeOODError, ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""
