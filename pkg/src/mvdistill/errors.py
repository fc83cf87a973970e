"""Exception hierarchy shared by every module, mapped to CLI exit codes."""


class Error(Exception):
    """Base class; `exit_code` drives the CLI process status."""

    exit_code = 1
    kind = "usage"


class UsageError(Error):
    """Bad invocation: wrong arguments, wrong call sequence."""

    exit_code = 1
    kind = "usage"


class ParameterError(UsageError):
    """A numeric parameter outside its documented range."""

    kind = "usage"


class DimensionError(UsageError):
    """Incompatible tensor/image shapes."""

    kind = "usage"


class ConfigError(UsageError):
    """Invalid or inconsistent configuration."""

    kind = "usage"


class DataError(Error):
    """Broken input data: unreadable files, missing views, bad manifests."""

    exit_code = 2
    kind = "data"


class FormatError(DataError):
    """Malformed persisted artifact (checkpoint, embeddings, PGM)."""

    kind = "data"


class MetricUndefinedError(DataError):
    """Metric has no defined value for this input (e.g. single-class ROC)."""

    kind = "data"


class NumericError(Error):
    """NaN/Inf appeared where only finite values are allowed."""

    exit_code = 3
    kind = "numeric"
