"""Exception hierarchy shared by all pipeline stages."""


class ShardprofError(Exception):
    """Base class for every error raised by this package."""


class EmptyTableError(ShardprofError):
    """A required profiler table contains no rows."""


class SchemaMismatchError(ShardprofError):
    """A trace database is missing a required table or column."""


class TraceIoError(ShardprofError):
    """Reading or writing a pipeline artifact failed."""


class InvalidRangeError(ShardprofError):
    """A time range is empty or inverted."""


class OutOfRangeError(ShardprofError):
    """A timestamp falls outside the configured range."""


class ManifestConflictError(ShardprofError):
    """An existing manifest disagrees with the requested configuration."""


class ManifestMismatchError(ShardprofError):
    """A manifest does not match the flags of the current stage."""


class CollectiveTimeoutError(ShardprofError):
    """A collective operation did not complete before its deadline."""


class PayloadTooLargeError(ShardprofError):
    """A gather payload exceeds the configured size limit."""


class EmptyInputError(ShardprofError):
    """An operation that needs at least one element received none."""


class MalformedCsvError(ShardprofError):
    """A CSV file does not have the layout the renderer expects."""
