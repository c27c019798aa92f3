"""Exception taxonomy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, DataFormatError -> 3,
NumericalError -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class DataFormatError(ValueError):
    """Input file missing, malformed, or inconsistent with its schema."""


class NumericalError(ArithmeticError):
    """Numerical failure: NaN objective, degenerate denominator, failed run."""
