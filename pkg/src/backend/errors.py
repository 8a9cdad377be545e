# src/backend/errors.py
"""Exception types shared across the backend.

Each one also derives from the closest builtin so callers that only know
about ``ValueError`` / ``RuntimeError`` keep working.
"""
from __future__ import annotations


class USRError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(USRError, ValueError):
    """Invalid configuration value; the message names the field."""


class ShapeError(USRError, ValueError):
    """Tensor shapes that cannot be combined."""


class ContractError(USRError, ValueError):
    """A caller broke a documented precondition."""


class TokenizationError(USRError, ValueError):
    """Text contains characters outside the toy alphabet."""


class EmptyInputError(USRError, ValueError):
    """An operation received a zero-length sequence it cannot handle."""


class NumericError(USRError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class TrainingError(USRError, RuntimeError):
    """A training run had to be aborted (e.g. too many skipped steps)."""
