"""Exception types shared across the toolkit."""


class SproadError(Exception):
    """Base class for all toolkit errors."""


class FormatError(SproadError, ValueError):
    """A file does not follow the expected on-disk format."""


class DataError(SproadError, ValueError):
    """Inputs are well-formed but inconsistent (shapes, ranges, empty sets)."""


class DegenerateDataError(DataError):
    """Not enough data to fit a model; the caller should skip that stage."""


class ConsistencyError(SproadError, RuntimeError):
    """An internal invariant was violated."""
