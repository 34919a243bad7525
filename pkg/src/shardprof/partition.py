"""Time-range sharding and contiguous block assignment of shards to workers."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidRangeError, OutOfRangeError
from .model import PartitionConfig, Timestamp


@dataclass(frozen=True)
class ShardSpec:
    """One contiguous, half-open slice of the global time range."""

    index: int
    start: Timestamp
    end: Timestamp

    @property
    def window(self) -> tuple[Timestamp, Timestamp]:
        return (self.start, self.end)

    def contains(self, t: Timestamp) -> bool:
        return self.start <= t < self.end


@dataclass(frozen=True)
class BlockAssignment:
    """The contiguous run of shard indices owned by one rank."""

    rank: int
    first_shard: int
    last_shard: int  # exclusive

    @property
    def shard_indices(self) -> range:
        return range(self.first_shard, self.last_shard)

    def __len__(self) -> int:
        return self.last_shard - self.first_shard


def make_shards(cfg: PartitionConfig) -> list[ShardSpec]:
    """Partition [range_start, range_end) into N abutting half-open windows.

    Window i is [t0 + floor(i*span/N), t0 + floor((i+1)*span/N)); floor
    arithmetic pushes remainder nanoseconds into later shards so the windows
    tile the range exactly and the last window ends at range_end.
    """
    if cfg.range_end <= cfg.range_start:
        raise InvalidRangeError(
            f"range [{cfg.range_start}, {cfg.range_end}) is empty"
        )
    t0, span, n = cfg.range_start, cfg.span_ns, cfg.num_shards
    return [
        ShardSpec(i, t0 + (i * span) // n, t0 + ((i + 1) * span) // n)
        for i in range(n)
    ]


def assign_blocks(cfg: PartitionConfig) -> list[BlockAssignment]:
    """Assign contiguous shard blocks to ranks, sizes differing by at most 1.

    Rank r owns floor(N/P) shards plus one extra when r < N mod P; ranks may
    own zero shards when P exceeds N.
    """
    n, p = cfg.num_shards, cfg.num_workers
    base, extra = divmod(n, p)
    blocks = []
    for rank in range(p):
        first = rank * base + min(rank, extra)
        size = base + (1 if rank < extra else 0)
        blocks.append(BlockAssignment(rank, first, first + size))
    return blocks


def shard_of(t: Timestamp, cfg: PartitionConfig) -> int:
    """Return the index of the shard whose window contains t.

    t == range_end is clamped onto the last shard; anything else outside
    [range_start, range_end) is an error.
    """
    t0, t1 = cfg.range_start, cfg.range_end
    if t < t0 or t > t1:
        raise OutOfRangeError(f"timestamp {t} outside [{t0}, {t1}]")
    n = cfg.num_shards
    if t == t1:
        return n - 1
    span = cfg.span_ns
    # Inverse of the floor-based window formula: the unique i with
    # floor(i*span/N) <= t-t0 < floor((i+1)*span/N).
    return (((t - t0 + 1) * n + span - 1) // span) - 1
