"""Error taxonomy shared across the package.

Every error raised by library code derives from MatchDiffError and carries the
process exit code the CLI maps it to (0 ok, 2 config, 3 data, 4 numeric).
"""


class MatchDiffError(Exception):
    """Base class; exit_code is what the CLI returns for this failure."""

    exit_code = 1


class ConfigError(MatchDiffError):
    """Invalid configuration: bad bounds, unknown keys, inconsistent fields."""

    exit_code = 2


class DataError(MatchDiffError):
    """Unreadable or malformed input data (files, manifests, datasets)."""

    exit_code = 3


class NumericError(MatchDiffError):
    """Numerical contract violation: non-finite values, infeasible quantities."""

    exit_code = 4


class DimensionError(NumericError):
    """Shape or rank mismatch between operands."""


class DegenerateGeometryError(NumericError):
    """Geometric configuration without a well-posed solution (e.g. collinear)."""
