"""Exception types shared across the library.

The CLI maps these onto exit codes: usage/configuration problems exit 1,
data and file-format problems exit 2, numeric divergence exits 3.
"""


class ConfigError(ValueError):
    """Inconsistent or invalid configuration (bad mode, bad shapes requested)."""


class DimensionError(ValueError):
    """Operands whose shapes cannot be combined."""


class FormatError(ValueError):
    """Malformed input file (bad magic, truncated payload, bad record)."""


class DataError(ValueError):
    """Input data violates a dataset precondition (label range, class count)."""


class DivergenceError(FloatingPointError):
    """Training or routing produced non-finite or runaway values."""
