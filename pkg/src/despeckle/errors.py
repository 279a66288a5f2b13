"""Exception types shared across the package.

Each carries a short machine-readable ``category`` used by the CLI when it
reports failures on a single line.
"""


class DespeckleError(Exception):
    category = "error"


class ConfigError(DespeckleError, ValueError):
    category = "config"


class DimensionError(DespeckleError, ValueError):
    category = "dimension"


class NumericError(DespeckleError, ArithmeticError):
    category = "numeric"


class UndefinedMetricError(DespeckleError, ValueError):
    """A metric whose precondition fails on the given data (e.g. sigma = 0)."""

    category = "undefined-metric"


class MissingInputError(DespeckleError, FileNotFoundError):
    category = "missing-input"
