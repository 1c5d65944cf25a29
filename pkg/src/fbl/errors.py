"""Exception types shared across the package.

The CLI maps these onto exit codes: anything derived from ``DataError``
exits 2 (bad input data or on-disk state), everything else unexpected
exits 3.
"""

from __future__ import annotations


class FblError(Exception):
    """Base class for all package errors."""


class DataError(FblError):
    """Input data or persisted artifact is unusable."""


class MalformedDiff(DataError):
    """Unified diff text could not be parsed."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class NoNegativeAvailable(DataError):
    """Every candidate document is gold for some bug; no negative can be drawn."""


class EmptyGoldSet(DataError):
    """Bug has no gold class names to categorize against."""


class DimensionMismatch(FblError):
    """Embedder and projection disagree on the input dimension."""


class NonFiniteLoss(FblError):
    """Training produced a NaN/inf loss; aborted."""


class InsufficientData(DataError):
    """Not enough embeddings to build the requested index."""


class EmptyIndex(DataError):
    """Search issued against an index with no embeddings."""


class FormatError(DataError):
    """A binary or JSON artifact failed structural validation."""


class ConfigMismatch(DataError):
    """Session artifacts were built under a different configuration."""
