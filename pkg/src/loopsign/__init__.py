"""Looped transformers with hyperbolic contrastive alignment for skeleton sign recognition."""

from .errors import ConfigError, ContractError, DataError, DomainError, ShapeError

__all__ = ["ConfigError", "ContractError", "DataError", "DomainError", "ShapeError"]
__version__ = "0.1.0"
