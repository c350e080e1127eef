"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
FormatError (and plain OSError) -> 3, NumericalError -> 4.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class FormatError(ValueError):
    """Malformed on-disk artifact (bad magic, truncation, version skew)."""


class NumericalError(RuntimeError):
    """Non-finite values or numerically impossible state during a run."""
