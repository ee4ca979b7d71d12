"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
DivergenceError -> 4.
"""


class ScopflearnError(Exception):
    pass


class ConfigError(ScopflearnError):
    """Bad run configuration: unknown method, invalid sizes, flag conflicts."""


class DataError(ScopflearnError):
    """Bad input data: malformed case or dataset files, dimension mismatches."""


class DivergenceError(ScopflearnError):
    """Non-finite values encountered during training."""
