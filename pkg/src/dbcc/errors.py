"""Exception hierarchy shared across the package."""


class DBCCError(Exception):
    """Base class for all library errors."""


class ShapeError(DBCCError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class NonFiniteError(DBCCError, FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op, detail=""):
        self.op = op
        msg = f"non-finite values produced by {op!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class DegenerateEstimateError(DBCCError, ArithmeticError):
    """A vector that should be normalized has (near) zero length."""


class GraphError(DBCCError, RuntimeError):
    """Backward pass requested on an unusable graph."""


class FormatError(DBCCError, ValueError):
    """A file does not follow the expected on-disk format."""


class ChecksumError(FormatError):
    """Checkpoint payload checksum does not match."""


class VersionError(FormatError):
    """Checkpoint format version is not supported."""


class ConfigError(DBCCError, ValueError):
    """Invalid or unknown configuration."""
