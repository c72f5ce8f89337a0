"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class QuakesynthError(Exception):
    pass


class ConfigError(QuakesynthError):
    """Bad or inconsistent configuration."""


class DataError(QuakesynthError):
    """Malformed datasets, checkpoints, or mismatched inputs."""


class NumericError(QuakesynthError):
    """NaN/Inf encountered, CFL violation, or solver blow-up."""


class ShapeError(QuakesynthError, ValueError):
    """Incompatible array shapes; message names both shapes."""
