"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(RuntimeError):
    """A caller broke an operation's precondition (e.g. non-scalar loss)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed, empty, or inconsistent data."""
