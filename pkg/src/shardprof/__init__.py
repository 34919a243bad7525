"""shardprof: distributed sharded analysis of GPU profiler trace databases."""

from .errors import (
    CollectiveTimeoutError,
    EmptyInputError,
    EmptyTableError,
    InvalidRangeError,
    MalformedCsvError,
    ManifestConflictError,
    ManifestMismatchError,
    OutOfRangeError,
    PayloadTooLargeError,
    SchemaMismatchError,
    ShardprofError,
    TraceIoError,
)
from .model import (
    AggregationConfig,
    AnomalyReport,
    CopyKind,
    DTOD,
    DTOH,
    FlaggedShard,
    GpuInfo,
    HTOD,
    IntervalKey,
    IntervalStats,
    JoinedSample,
    KernelRecord,
    MemcpyRecord,
    PartitionConfig,
    SynthSpec,
    Timestamp,
    decode_copy_kind,
)

__version__ = "0.1.0"

__all__ = [
    "AggregationConfig",
    "AnomalyReport",
    "CollectiveTimeoutError",
    "CopyKind",
    "DTOD",
    "DTOH",
    "EmptyInputError",
    "EmptyTableError",
    "FlaggedShard",
    "GpuInfo",
    "HTOD",
    "IntervalKey",
    "IntervalStats",
    "InvalidRangeError",
    "JoinedSample",
    "KernelRecord",
    "MalformedCsvError",
    "ManifestConflictError",
    "ManifestMismatchError",
    "MemcpyRecord",
    "OutOfRangeError",
    "PartitionConfig",
    "PayloadTooLargeError",
    "SchemaMismatchError",
    "ShardprofError",
    "SynthSpec",
    "Timestamp",
    "TraceIoError",
    "decode_copy_kind",
]
