"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: MissingArtifactError -> 2,
ValidationError (and subclasses) -> 3, ProviderError -> 4, anything
else -> 1.
"""


class GagaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GagaError):
    """Tensor or array shapes are incompatible with the requested operation."""


class ContractError(GagaError):
    """A documented precondition was violated by the caller."""


class ValidationError(GagaError):
    """Input data or configuration failed validation."""


class ConfigError(ValidationError):
    """Configuration file or flag is malformed or out of range."""


class DegenerateInputError(GagaError):
    """Numerically degenerate input (e.g. zero-norm vector for cosine)."""


class NumericsError(GagaError):
    """A forward or backward pass produced a non-finite value."""


class ProviderError(GagaError):
    """A remote embedding/annotation provider failed permanently."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class MissingArtifactError(GagaError):
    """A pipeline stage prerequisite artifact does not exist."""
