"""Exception hierarchy shared across the package."""


class VeloraError(Exception):
    """Base class for all package errors."""


class ShapeError(VeloraError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(VeloraError, RuntimeError):
    """A call violated an operation's precondition."""


class ConfigError(VeloraError, ValueError):
    """Invalid configuration value or key."""


class DataError(VeloraError, ValueError):
    """Malformed or out-of-range input data."""


class FormatError(VeloraError, ValueError):
    """Unreadable or incompatible file."""


class TrainingError(VeloraError, RuntimeError):
    """Numerical failure during optimization."""
