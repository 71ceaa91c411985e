"""Shared exception types."""


class FedreconError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(FedreconError):
    """Raised when operand shapes are incompatible; names the offending dims."""


class LayoutMismatchError(FedreconError):
    """Raised when a flat gradient layout does not match a model layout."""


class DataFormatError(FedreconError):
    """Raised on malformed dataset files; message carries the byte offset."""


class ConfigError(FedreconError):
    """Raised on invalid experiment or attack configuration."""


class AttackDivergedError(FedreconError):
    """Raised when a reconstruction loop produces non-finite values."""
