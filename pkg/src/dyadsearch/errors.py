"""Exception types shared across the package.

The CLI maps these onto exit codes: DataError -> 2, InvariantError -> 3.
"""


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class InvariantError(RuntimeError):
    """An internal invariant was violated (a bug, not bad input)."""
