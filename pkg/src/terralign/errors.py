"""Exception taxonomy shared across the package.

CLI exit codes: UsageError -> 1, DataError subclasses -> 2,
NumericalError -> 3.
"""


class TerralignError(Exception):
    """Base class for package-specific errors."""


class UsageError(TerralignError):
    """Caller asked for something impossible (empty dataset, bad flag combo)."""


class DataError(TerralignError):
    """On-disk data is malformed, truncated, or of the wrong version."""


class FormatError(DataError):
    """Stream or file violates its format contract (e.g. non-monotone timestamps)."""


class AlignmentError(DataError):
    """Modality streams do not share a common time interval."""


class CorruptionError(DataError):
    """Blob size disagrees with its manifest."""


class VersionError(DataError):
    """Unknown on-disk format version."""


class CheckpointError(DataError):
    """Checkpoint file is inconsistent with its manifest or expected config."""


class NumericalError(TerralignError):
    """A forward op or the training loss produced NaN/Inf."""


class DimensionError(ValueError):
    """Tensor arguments have incompatible shapes."""


class ConfigError(ValueError):
    """A configuration value violates a structural constraint."""


class DegenerateInputError(ValueError):
    """Input is mathematically degenerate (e.g. normalizing a zero vector)."""
