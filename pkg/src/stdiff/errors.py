"""Exception hierarchy shared across the package.

Input/usage problems (bad files, unknown ids, bad arguments) map to CLI
exit code 2; numeric/internal failures map to exit code 1.
"""


class StdiffError(Exception):
    """Base class for all package errors."""


class ShapeError(StdiffError):
    """Incompatible array or matrix dimensions."""


class DomainError(StdiffError):
    """Value outside the mathematically valid domain (e.g. negative weight)."""


class ArgumentError(StdiffError):
    """Invalid argument combination or out-of-range configuration value."""


class IdentifierError(ArgumentError):
    """Unknown or duplicated sensor identifier."""


class FormatError(ArgumentError):
    """Malformed input file."""


class NumericError(StdiffError):
    """Non-finite value encountered during computation."""
