"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes do not conform."""


class ParameterError(ValueError):
    """Invalid argument or configuration value."""


class NumericError(ArithmeticError):
    """Non-finite value produced where a finite one is required."""


class ContractError(RuntimeError):
    """A caller violated a documented precondition (e.g. non-canonical genome)."""


class FormatError(ValueError):
    """A serialized artifact (dataset bundle, checkpoint, config) failed validation."""
