"""Shared exception types."""


class ContractViolation(ValueError):
    """An argument breaks a documented precondition (shape, range, size)."""


class DomainError(ValueError):
    """A value is outside the mathematical domain of an operation."""


class DegenerateInput(ContractViolation):
    """Input is too small or collapsed to be processed (e.g. all points equal)."""


class ConfigError(ValueError):
    """A run configuration is missing, inconsistent, or names unknown keys."""


class ParseError(ValueError):
    """A file could not be parsed; message carries location information."""
