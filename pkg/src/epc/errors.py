"""Shared exception types.

The CLI maps ``ContractError`` (and subclasses) to exit code 2 and any other
failure to exit code 3, so lower layers should raise these for caller mistakes
rather than bare ValueError.
"""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(ContractError):
    """Invalid or inconsistent configuration."""
