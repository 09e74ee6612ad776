"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2,
MissingArtifactError -> 3, NumericError -> 4.
"""


class PatchPruneError(Exception):
    """Base class for all package errors."""


class ShapeError(PatchPruneError):
    """Tensor or sequence shapes are incompatible with the operation."""


class ConfigError(PatchPruneError):
    """A configuration value is invalid or inconsistent."""


class ScheduleError(ConfigError):
    """A pruning schedule is malformed (bad layers or drop counts)."""


class LogicError(PatchPruneError):
    """An internal contract was violated (e.g. dropping a non-surviving token)."""


class UsageError(PatchPruneError):
    """An operation was called in a way its contract forbids."""


class ParseError(ConfigError):
    """A manifest, config, or data file could not be parsed."""


class NumericError(PatchPruneError):
    """A numeric failure: non-finite values, divergence, degenerate norms."""


class MissingArtifactError(PatchPruneError):
    """A required upstream artifact (dataset, checkpoint, cache) is absent."""
