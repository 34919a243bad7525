"""Core domain types shared by every pipeline stage."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import InvalidRangeError

# Timestamps are unsigned 64-bit nanoseconds since the trace epoch, carried as
# plain ints. Python ints never wrap; the uint64 bound is enforced wherever a
# timestamp enters the system (record construction, columnar serialization).
Timestamp = int

TIMESTAMP_MAX = 2**64 - 1


def check_timestamp(value: int, what: str = "timestamp") -> int:
    if not 0 <= value <= TIMESTAMP_MAX:
        raise ValueError(f"{what} {value} outside unsigned 64-bit range")
    return value


class CopyDirection(enum.Enum):
    HTOD = "HtoD"
    DTOH = "DtoH"
    DTOD = "DtoD"
    OTHER = "Other"


@dataclass(frozen=True)
class CopyKind:
    """Decoded memcpy direction; unknown raw codes are kept, not dropped."""

    direction: CopyDirection
    raw: int

    @property
    def label(self) -> str:
        return self.direction.value


HTOD = CopyKind(CopyDirection.HTOD, 1)
DTOH = CopyKind(CopyDirection.DTOH, 2)
DTOD = CopyKind(CopyDirection.DTOD, 8)


def decode_copy_kind(raw: int) -> CopyKind:
    """Map a raw CUPTI copy-kind code to a direction.

    Total: every integer decodes to exactly one kind. Codes 1, 2 and 8 are
    host-to-device, device-to-host and device-to-device; anything else is
    preserved as an opaque kind so per-kind byte totals stay conserved.
    """
    if raw == 1:
        return HTOD
    if raw == 2:
        return DTOH
    if raw == 8:
        return DTOD
    return CopyKind(CopyDirection.OTHER, raw)


@dataclass(frozen=True)
class KernelRecord:
    """One GPU kernel launch with its resource usage."""

    start: Timestamp
    end: Timestamp
    device_id: int
    stream_id: int
    name_id: int
    grid_x: int
    grid_y: int
    grid_z: int
    block_x: int
    block_y: int
    block_z: int
    regs_per_thread: int
    smem_bytes: int

    def __post_init__(self) -> None:
        check_timestamp(self.start, "kernel start")
        check_timestamp(self.end, "kernel end")
        if self.end < self.start:
            raise ValueError(f"kernel end {self.end} before start {self.start}")
        if self.device_id < 0 or self.stream_id < 0:
            raise ValueError("device_id and stream_id must be non-negative")


@dataclass(frozen=True)
class MemcpyRecord:
    """One memory transfer between host and/or device memory."""

    start: Timestamp
    end: Timestamp
    bytes: int
    copy_kind: CopyKind
    device_id: int
    stream_id: int

    def __post_init__(self) -> None:
        check_timestamp(self.start, "memcpy start")
        check_timestamp(self.end, "memcpy end")
        if self.end < self.start:
            raise ValueError(f"memcpy end {self.end} before start {self.start}")
        if self.bytes < 0:
            raise ValueError("memcpy byte count must be non-negative")


@dataclass(frozen=True)
class GpuInfo:
    """Static properties of one GPU in the trace database."""

    device_id: int
    global_mem_bytes: int
    bandwidth_kb_per_s: int
    sm_count: int
    compute_capability_major: int
    compute_capability_minor: int


@dataclass(frozen=True)
class JoinedSample:
    """A kernel launch left-joined with one matching memcpy, if any."""

    kernel: KernelRecord
    memcpy: MemcpyRecord | None = None
    gpu: GpuInfo | None = None


@dataclass(frozen=True)
class PartitionConfig:
    """Sharding parameters: N shards over [range_start, range_end) for P workers."""

    num_shards: int
    num_workers: int
    range_start: Timestamp
    range_end: Timestamp

    def __post_init__(self) -> None:
        if self.num_shards < 1:
            raise ValueError("num_shards must be >= 1")
        if self.num_workers < 1:
            raise ValueError("num_workers must be >= 1")
        check_timestamp(self.range_start, "range_start")
        check_timestamp(self.range_end, "range_end")
        if self.range_end <= self.range_start:
            raise InvalidRangeError(
                f"range [{self.range_start}, {self.range_end}) is empty"
            )

    @property
    def span_ns(self) -> int:
        return self.range_end - self.range_start


DEFAULT_INTERVAL_NS = 1_000_000_000
DEFAULT_TOP_K_SHARDS = 5
DEFAULT_VARIABILITY_FRACTION = Fraction(1, 20)


@dataclass(frozen=True)
class AggregationConfig:
    """Interval granularity and anomaly-selection parameters.

    The variability fraction is an exact rational so top-fraction selection
    sizes like ceil(0.05 * 200) never suffer binary-float rounding; float and
    string inputs are converted through their decimal reading.
    """

    interval_ns: int = DEFAULT_INTERVAL_NS
    top_k_shards: int = DEFAULT_TOP_K_SHARDS
    variability_fraction: Fraction = DEFAULT_VARIABILITY_FRACTION

    def __post_init__(self) -> None:
        frac = self.variability_fraction
        if isinstance(frac, float):
            frac = Fraction(str(frac))
        elif not isinstance(frac, Fraction):
            frac = Fraction(frac)
        object.__setattr__(self, "variability_fraction", frac)
        if self.interval_ns < 1:
            raise ValueError("interval_ns must be >= 1")
        if self.top_k_shards < 0:
            raise ValueError("top_k_shards must be >= 0")
        if not 0 < frac <= 1:
            raise ValueError("variability_fraction must be in (0, 1]")


@dataclass(frozen=True)
class SynthSpec:
    """Parameters for generating a synthetic trace database."""

    seed: int = 0
    duration_s: float = 10.0
    kernels_per_s: float = 100.0
    memcpys_per_s: float = 20.0
    devices: int = 1
    streams_per_device: int = 2
    direction_ratio: tuple[float, float, float] = (50.0, 50.0, 1.0)
    stall_bursts: tuple[tuple[float, float, float], ...] = ()

    def __post_init__(self) -> None:
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.kernels_per_s < 0 or self.memcpys_per_s < 0:
            raise ValueError("rates must be non-negative")
        if self.devices < 1 or self.streams_per_device < 1:
            raise ValueError("need at least one device and one stream")
        if any(w < 0 for w in self.direction_ratio) or not any(self.direction_ratio):
            raise ValueError("direction_ratio needs non-negative weights, one positive")


@dataclass(frozen=True)
class IntervalKey:
    """Identity of one fixed-duration aggregation interval."""

    index: int
    start: Timestamp


@dataclass(frozen=True)
class IntervalStats:
    """Per-interval stall statistics and transfer/kernel activity counts.

    An interval with no stall samples has all stall statistics defined as 0.
    """

    key: IntervalKey
    stall_min_ns: int = 0
    stall_max_ns: int = 0
    stall_std_ns: float = 0.0
    stall_total_ns: int = 0
    kernel_count: int = 0
    sample_count: int = 0
    memcpy_count_by_kind: dict[CopyKind, int] = field(default_factory=dict)
    bytes_by_kind: dict[CopyKind, int] = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return self.sample_count == 0


@dataclass(frozen=True)
class FlaggedShard:
    """One shard whose variability metric lies above the IQR upper fence."""

    shard_index: int
    metric: float
    exceedance: float


@dataclass(frozen=True)
class AnomalyReport:
    """IQR fences plus the shards and intervals selected as anomalous."""

    q1: float
    q3: float
    iqr: float
    upper_fence: float
    flagged_shards: tuple[FlaggedShard, ...]
    top_shards: tuple[FlaggedShard, ...]
    top_intervals: tuple[IntervalKey, ...]
