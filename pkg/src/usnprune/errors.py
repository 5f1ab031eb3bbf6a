"""Exception taxonomy shared across the package.

Three failure classes: configuration errors (ill-formed networks or shape
mismatches), contract errors (caller violated a documented precondition),
and numeric errors (non-finite values, iteration caps).
"""


class UsnpruneError(Exception):
    """Base class for all package errors."""


class ConfigurationError(UsnpruneError):
    """Network or layer description is internally inconsistent."""


class ContractError(UsnpruneError):
    """A documented precondition was violated by the caller."""


class NumericError(UsnpruneError):
    """Non-finite values or a numerical routine failed to converge."""
