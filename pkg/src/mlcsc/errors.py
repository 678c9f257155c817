"""Exception types shared across the package."""


class MLCSCError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(MLCSCError):
    """Geometry/shape mismatch between an operator and its operand."""


class NormalizationError(MLCSCError):
    """An operation that requires unit-norm atoms was given an
    unnormalized dictionary (or a filter with zero norm)."""


class InfeasibleModelError(MLCSCError):
    """Sampling could not produce a representation stack satisfying the
    per-layer sparsity caps within the retry budget."""


class FormatError(MLCSCError):
    """A serialized file violates its format contract.

    ``offset`` (when not None) is the byte offset at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(MLCSCError):
    """Invalid solver/training/CLI configuration."""
