"""Exception hierarchy shared across the package."""


class IcditError(Exception):
    """Base class for all package errors."""


class ShapeError(IcditError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(IcditError):
    """A call violated a documented precondition."""


class ConfigError(IcditError):
    """Invalid or inconsistent configuration."""


class VocabularyError(IcditError):
    """Token id outside the caption vocabulary."""


class FormatError(IcditError):
    """A binary file is corrupt, truncated, or of an unknown version."""


class AgentError(IcditError):
    """A remote annotation agent failed or returned malformed output."""

    def __init__(self, message, patch_id=None):
        super().__init__(message)
        self.patch_id = patch_id


class NumericError(IcditError):
    """A numeric routine failed to converge or produced non-finite values."""
