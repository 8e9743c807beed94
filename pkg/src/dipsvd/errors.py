"""Exception types shared across the package.

Everything raised on purpose derives from :class:`DipsvdError` so callers
(and the CLI exit-code mapping) can tell deliberate contract failures from
genuine bugs.
"""


class DipsvdError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolationError(DipsvdError, ValueError):
    """An argument violates a documented precondition."""


class ShapeError(ContractViolationError):
    """Matrix dimensions do not line up."""


class FormatError(DipsvdError, ValueError):
    """A matrix file failed to parse.

    ``byte_offset`` points at the first offending byte for binary files;
    ``row`` names the offending line for CSV files (both optional).
    """

    def __init__(self, message, byte_offset=None, row=None):
        detail = message
        if byte_offset is not None:
            detail = f"{message} (byte offset {byte_offset})"
        elif row is not None:
            detail = f"{message} (row {row})"
        super().__init__(detail)
        self.byte_offset = byte_offset
        self.row = row


class FactorizationError(DipsvdError, RuntimeError):
    """A matrix factorization failed to converge."""


class SingularWhiteningError(DipsvdError, RuntimeError):
    """The damped channel Gram is numerically singular; raise the damping."""


class DegenerateSpectrumError(DipsvdError, ValueError):
    """A spectrum needed for a threshold rule is identically zero."""


class UndefinedCorrelationError(DipsvdError, ValueError):
    """Pearson correlation is undefined (zero variance input)."""


class UndefinedSimilarityError(DipsvdError, ValueError):
    """Cosine similarity is undefined (zero-norm output)."""


class InfeasibleBudgetError(DipsvdError, ValueError):
    """No allocation inside the bounds can meet the requested budget."""


class ConfigError(DipsvdError, ValueError):
    """A run configuration failed validation."""
