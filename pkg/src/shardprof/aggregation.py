"""Stage two: interval statistics, shard variability, and IQR anomaly selection.

Workers bin their assigned shard files into fixed-duration intervals keyed by
timestamp, exchange partial sums so that interval ownership is round-robin
(interval index mod P), finalize statistics at the owners, and gather the
complete map at rank 0. All partial accumulators are exact integers, so the
merged result is bit-identical for every worker count.
"""

from __future__ import annotations

import bisect
import json
import math
import pickle
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import pyarrow as pa
import pyarrow.parquet as pq

from .comm import WorkerCtx
from .errors import (
    EmptyInputError,
    ManifestMismatchError,
    OutOfRangeError,
    TraceIoError,
)
from .generation import (
    Manifest,
    ShardFileMeta,
    load_manifest,
    read_shard_batches,
    update_manifest_timings,
)
from .model import (
    AggregationConfig,
    AnomalyReport,
    CopyDirection,
    FlaggedShard,
    IntervalKey,
    IntervalStats,
    PartitionConfig,
    Timestamp,
    decode_copy_kind,
)
from .partition import ShardSpec, assign_blocks, make_shards

INTERVAL_STATS_NAME = "interval_stats.parquet"
ANOMALIES_NAME = "anomalies.json"

AGGREGATION_PHASE_KEY = "aggregation_ns"


def interval_of(t: Timestamp, t0: Timestamp, interval_ns: int) -> int:
    """Index of the fixed-duration interval containing t."""
    if t < t0:
        raise OutOfRangeError(f"timestamp {t} before interval origin {t0}")
    return (t - t0) // interval_ns


def interval_key(index: int, t0: Timestamp, interval_ns: int) -> IntervalKey:
    return IntervalKey(index=index, start=t0 + index * interval_ns)


def stall_duration(sample, interval: tuple[Timestamp, Timestamp]) -> int:
    """Overlap of the sample's memcpy busy window with the interval window.

    The memcpy transfer [start, end) is clipped against the interval; disjoint
    windows and zero-duration transfers contribute 0.
    """
    lo, hi = interval
    m = sample.memcpy
    return max(0, min(m.end, hi) - max(m.start, lo))


class _Accum:
    """Exact per-interval partial: integer moments merge associatively."""

    __slots__ = ("n", "total", "sumsq", "mn", "mx", "kernels", "counts", "bytes")

    def __init__(self) -> None:
        self.n = 0
        self.total = 0
        self.sumsq = 0
        self.mn = 0
        self.mx = 0
        self.kernels = 0
        self.counts: dict[int, int] = {}
        self.bytes: dict[int, int] = {}

    def add_stall(self, duration: int) -> None:
        if self.n == 0 or duration < self.mn:
            self.mn = duration
        if duration > self.mx:
            self.mx = duration
        self.n += 1
        self.total += duration
        self.sumsq += duration * duration

    def as_tuple(self) -> tuple:
        return (
            self.n, self.total, self.sumsq, self.mn, self.mx,
            self.kernels, self.counts, self.bytes,
        )

    @classmethod
    def from_tuple(cls, data: tuple) -> _Accum:
        acc = cls()
        (acc.n, acc.total, acc.sumsq, acc.mn, acc.mx,
         acc.kernels, acc.counts, acc.bytes) = data
        return acc

    def merge(self, other_tuple: tuple) -> None:
        n, total, sumsq, mn, mx, kernels, counts, byte_totals = other_tuple
        if n:
            if self.n == 0 or mn < self.mn:
                self.mn = mn
            if mx > self.mx:
                self.mx = mx
            self.n += n
            self.total += total
            self.sumsq += sumsq
        self.kernels += kernels
        for raw, c in counts.items():
            self.counts[raw] = self.counts.get(raw, 0) + c
        for raw, b in byte_totals.items():
            self.bytes[raw] = self.bytes.get(raw, 0) + b


def _pop_std_exact(n: int, total: int, sumsq: int) -> float:
    """Population standard deviation from exact integer moments.

    n*sumsq - total^2 is computed in unbounded integers, so the result equals
    the two-pass formula up to one final float rounding and is independent of
    accumulation order.
    """
    if n == 0:
        return 0.0
    numerator = n * sumsq - total * total
    if numerator <= 0:
        return 0.0
    return math.sqrt(numerator) / n


def bin_shard_file(
    path: Path, t0: Timestamp, interval_ns: int, partials: dict[int, _Accum]
) -> None:
    """Accumulate one shard file's rows into per-interval partials.

    Kernel counts and memcpy counts/bytes attribute to the interval of the
    record's start; stall time is the memcpy busy window clipped against every
    interval it crosses, one sample per (memcpy, interval) overlap.
    """
    for batch in read_shard_batches(path):
        kernel_starts = batch.column("kernel_start").to_pylist()
        memcpy_starts = batch.column("memcpy_start").to_pylist()
        memcpy_ends = batch.column("memcpy_end").to_pylist()
        memcpy_bytes = batch.column("memcpy_bytes").to_pylist()
        kinds = batch.column("copy_kind_raw").to_pylist()
        for ks, ms, me, mb, kind in zip(
            kernel_starts, memcpy_starts, memcpy_ends, memcpy_bytes, kinds
        ):
            if ks < t0:
                raise OutOfRangeError(f"kernel start {ks} before range start {t0}")
            acc = partials.get((ks - t0) // interval_ns)
            if acc is None:
                acc = partials[(ks - t0) // interval_ns] = _Accum()
            acc.kernels += 1
            if ms is None:
                continue
            if ms < t0:
                raise OutOfRangeError(f"memcpy start {ms} before range start {t0}")
            index = (ms - t0) // interval_ns
            acc = partials.get(index)
            if acc is None:
                acc = partials[index] = _Accum()
            acc.counts[kind] = acc.counts.get(kind, 0) + 1
            acc.bytes[kind] = acc.bytes.get(kind, 0) + mb
            while ms < me:
                window_end = t0 + (index + 1) * interval_ns
                acc = partials.get(index)
                if acc is None:
                    acc = partials[index] = _Accum()
                acc.add_stall(min(me, window_end) - ms)
                ms = window_end
                index += 1


def _finalize(index: int, acc: _Accum, t0: Timestamp, interval_ns: int) -> IntervalStats:
    return IntervalStats(
        key=interval_key(index, t0, interval_ns),
        stall_min_ns=acc.mn,
        stall_max_ns=acc.mx,
        stall_std_ns=_pop_std_exact(acc.n, acc.total, acc.sumsq),
        stall_total_ns=acc.total,
        kernel_count=acc.kernels,
        sample_count=acc.n,
        memcpy_count_by_kind={
            decode_copy_kind(raw): acc.counts[raw] for raw in sorted(acc.counts)
        },
        bytes_by_kind={
            decode_copy_kind(raw): acc.bytes[raw] for raw in sorted(acc.bytes)
        },
    )


def compute_interval_stats(
    files: Sequence[ShardFileMeta],
    cfg: AggregationConfig,
    ctx: WorkerCtx,
) -> dict[IntervalKey, IntervalStats] | None:
    """Collaboratively compute the complete interval-statistics map.

    Every rank receives the full file list, loads its contiguous block of
    shard files, and bins locally; partials are then gathered to round-robin
    interval owners (index mod P), finalized there, and the finished map is
    gathered at rank 0. Returns the map at rank 0 and None elsewhere. The map
    covers the whole [t0, t1) grid, zero-filled where nothing happened, plus
    any spill intervals reached by transfers running past t1.
    """
    if not files:
        raise EmptyInputError("no shard files to aggregate")
    ordered = sorted(files, key=lambda f: f.shard_index)
    t0 = min(f.window[0] for f in ordered)
    t1 = max(f.window[1] for f in ordered)
    interval_ns = cfg.interval_ns
    world = ctx.world_size

    block = assign_blocks(
        PartitionConfig(
            num_shards=len(ordered),
            num_workers=world,
            range_start=t0,
            range_end=t1,
        )
    )[ctx.rank]
    partials: dict[int, _Accum] = {}
    for position in block.shard_indices:
        bin_shard_file(ordered[position].path, t0, interval_ns, partials)

    owned: dict[int, _Accum] = {}
    for owner in range(world):
        mine = {
            index: acc.as_tuple()
            for index, acc in partials.items()
            if index % world == owner
        }
        gathered = ctx.gather(pickle.dumps(mine, protocol=4), root=owner)
        if gathered is None:
            continue
        for blob in gathered:  # rank order fixes the merge order
            for index, data in pickle.loads(blob).items():
                acc = owned.get(index)
                if acc is None:
                    owned[index] = _Accum.from_tuple(data)
                else:
                    acc.merge(data)

    finalized = {
        index: _finalize(index, acc, t0, interval_ns) for index, acc in owned.items()
    }
    collected = ctx.gather(pickle.dumps(finalized, protocol=4), root=0)
    if collected is None:
        return None

    merged: dict[int, IntervalStats] = {}
    for blob in collected:
        merged.update(pickle.loads(blob))
    last_grid_index = (t1 - t0 - 1) // interval_ns
    top_index = max(last_grid_index, max(merged) if merged else 0)
    stats: dict[IntervalKey, IntervalStats] = {}
    for index in range(top_index + 1):
        st = merged.get(index)
        if st is None:
            st = IntervalStats(key=interval_key(index, t0, interval_ns))
        stats[st.key] = st
    return stats


def quantile_linear(sorted_values: Sequence[float], p: float) -> float:
    """Quantile by linear interpolation between order statistics (type 7)."""
    n = len(sorted_values)
    if n == 0:
        raise EmptyInputError("quantile of empty sequence")
    if n == 1:
        return float(sorted_values[0])
    position = p * (n - 1)
    below = int(position)
    if below >= n - 1:
        return float(sorted_values[-1])
    weight = position - below
    return sorted_values[below] + weight * (
        sorted_values[below + 1] - sorted_values[below]
    )


def shard_variability(
    stats: Mapping[IntervalKey, IntervalStats],
    shards: Sequence[ShardSpec],
    cfg: AggregationConfig,
) -> dict[int, float]:
    """Per-shard variability: population std of stall totals over the shard's
    non-empty intervals (by interval start), 0 when fewer than two exist."""
    ordered = sorted(shards, key=lambda s: s.index)
    starts = [s.start for s in ordered]
    totals: dict[int, list[int]] = {s.index: [] for s in ordered}
    for st in stats.values():
        if st.sample_count == 0:
            continue
        slot = bisect.bisect_right(starts, st.key.start) - 1
        if slot < 0 or st.key.start >= ordered[slot].end:
            continue  # spill interval past the sharded range
        totals[ordered[slot].index].append(st.stall_total_ns)
    metrics: dict[int, float] = {}
    for index, values in totals.items():
        if len(values) < 2:
            metrics[index] = 0.0
        else:
            metrics[index] = _pop_std_exact(
                len(values), sum(values), sum(v * v for v in values)
            )
    return metrics


def iqr_anomalies(
    metrics: Mapping[int, float],
    cfg: AggregationConfig,
    top_intervals: Sequence[IntervalKey] = (),
) -> AnomalyReport:
    """Flag shards whose metric exceeds Q3 + 1.5*IQR and keep the top k.

    Only the upper fence is used; flagged shards are ordered by exceedance
    descending with ties broken by lower shard index.
    """
    if not metrics:
        raise EmptyInputError("no shard metrics")
    values = sorted(metrics.values())
    q1 = quantile_linear(values, 0.25)
    q3 = quantile_linear(values, 0.75)
    iqr = q3 - q1
    fence = q3 + 1.5 * iqr
    flagged = sorted(
        (
            FlaggedShard(shard_index=i, metric=m, exceedance=m - fence)
            for i, m in metrics.items()
            if m > fence
        ),
        key=lambda f: (-f.exceedance, f.shard_index),
    )
    return AnomalyReport(
        q1=q1,
        q3=q3,
        iqr=iqr,
        upper_fence=fence,
        flagged_shards=tuple(flagged),
        top_shards=tuple(flagged[: cfg.top_k_shards]),
        top_intervals=tuple(top_intervals),
    )


def top_variability_intervals(
    stats: Mapping[IntervalKey, IntervalStats], cfg: AggregationConfig
) -> list[IntervalKey]:
    """The top variability_fraction of non-empty intervals by stall std."""
    non_empty = [st for st in stats.values() if st.sample_count > 0]
    if not non_empty:
        raise EmptyInputError("no non-empty intervals")
    non_empty.sort(key=lambda st: (-st.stall_std_ns, st.key.index))
    take = math.ceil(Fraction(cfg.variability_fraction) * len(non_empty))
    return [st.key for st in non_empty[:take]]


def analyze(
    stats: Mapping[IntervalKey, IntervalStats],
    shards: Sequence[ShardSpec],
    cfg: AggregationConfig,
) -> AnomalyReport:
    """Full anomaly report: shard IQR outliers plus top-variability intervals."""
    metrics = shard_variability(stats, shards, cfg)
    has_samples = any(st.sample_count > 0 for st in stats.values())
    top = top_variability_intervals(stats, cfg) if has_samples else []
    return iqr_anomalies(metrics, cfg, top_intervals=top)


# One row per interval; by-kind maps flatten to the three named directions
# plus an "other" bucket so the columnar output has a fixed schema.
INTERVAL_SCHEMA = pa.schema(
    [
        ("index", pa.uint64()),
        ("start", pa.uint64()),
        ("stall_min_ns", pa.uint64()),
        ("stall_max_ns", pa.uint64()),
        ("stall_std_ns", pa.float64()),
        ("stall_total_ns", pa.uint64()),
        ("kernel_count", pa.uint64()),
        ("sample_count", pa.uint64()),
        ("htod_count", pa.uint64()),
        ("dtoh_count", pa.uint64()),
        ("dtod_count", pa.uint64()),
        ("other_count", pa.uint64()),
        ("htod_bytes", pa.uint64()),
        ("dtoh_bytes", pa.uint64()),
        ("dtod_bytes", pa.uint64()),
        ("other_bytes", pa.uint64()),
    ]
)


@dataclass(frozen=True)
class IntervalRow:
    """Flattened interval statistics as stored in interval_stats.parquet."""

    index: int
    start: int
    stall_min_ns: int
    stall_max_ns: int
    stall_std_ns: float
    stall_total_ns: int
    kernel_count: int
    sample_count: int
    htod_count: int
    dtoh_count: int
    dtod_count: int
    other_count: int
    htod_bytes: int
    dtoh_bytes: int
    dtod_bytes: int
    other_bytes: int


def _by_direction(by_kind: Mapping, direction: CopyDirection) -> int:
    return sum(v for k, v in by_kind.items() if k.direction is direction)


def stats_to_rows(stats: Mapping[IntervalKey, IntervalStats]) -> list[IntervalRow]:
    rows = []
    for st in sorted(stats.values(), key=lambda s: s.key.index):
        rows.append(
            IntervalRow(
                index=st.key.index,
                start=st.key.start,
                stall_min_ns=st.stall_min_ns,
                stall_max_ns=st.stall_max_ns,
                stall_std_ns=st.stall_std_ns,
                stall_total_ns=st.stall_total_ns,
                kernel_count=st.kernel_count,
                sample_count=st.sample_count,
                htod_count=_by_direction(st.memcpy_count_by_kind, CopyDirection.HTOD),
                dtoh_count=_by_direction(st.memcpy_count_by_kind, CopyDirection.DTOH),
                dtod_count=_by_direction(st.memcpy_count_by_kind, CopyDirection.DTOD),
                other_count=_by_direction(st.memcpy_count_by_kind, CopyDirection.OTHER),
                htod_bytes=_by_direction(st.bytes_by_kind, CopyDirection.HTOD),
                dtoh_bytes=_by_direction(st.bytes_by_kind, CopyDirection.DTOH),
                dtod_bytes=_by_direction(st.bytes_by_kind, CopyDirection.DTOD),
                other_bytes=_by_direction(st.bytes_by_kind, CopyDirection.OTHER),
            )
        )
    return rows


def write_interval_stats(
    stats: Mapping[IntervalKey, IntervalStats], path: str | Path
) -> None:
    rows = stats_to_rows(stats)
    table = pa.table(
        {name: [getattr(r, name) for r in rows] for name in INTERVAL_SCHEMA.names},
        schema=INTERVAL_SCHEMA,
    )
    try:
        pq.write_table(table, path)
    except OSError as exc:
        raise TraceIoError(f"cannot write {path}: {exc}") from exc


def read_interval_stats(path: str | Path) -> list[IntervalRow]:
    if not Path(path).is_file():
        raise TraceIoError(f"no interval statistics at {path}")
    table = pq.read_table(path)
    columns = {name: table.column(name).to_pylist() for name in INTERVAL_SCHEMA.names}
    return [
        IntervalRow(**{name: columns[name][i] for name in INTERVAL_SCHEMA.names})
        for i in range(table.num_rows)
    ]


def anomaly_report_to_json_dict(report: AnomalyReport) -> dict:
    def shard_entry(f: FlaggedShard) -> dict:
        return {
            "shard_index": f.shard_index,
            "metric": f.metric,
            "exceedance": f.exceedance,
        }

    return {
        "q1": report.q1,
        "q3": report.q3,
        "iqr": report.iqr,
        "upper_fence": report.upper_fence,
        "flagged_shards": [shard_entry(f) for f in report.flagged_shards],
        "top_shards": [shard_entry(f) for f in report.top_shards],
        "top_intervals": [
            {"index": k.index, "start": k.start} for k in report.top_intervals
        ],
    }


def write_anomaly_report(report: AnomalyReport, path: str | Path) -> None:
    try:
        Path(path).write_text(
            json.dumps(anomaly_report_to_json_dict(report), indent=2) + "\n",
            encoding="utf-8",
        )
    except OSError as exc:
        raise TraceIoError(f"cannot write {path}: {exc}") from exc


def read_anomaly_report(path: str | Path) -> AnomalyReport:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return AnomalyReport(
        q1=data["q1"],
        q3=data["q3"],
        iqr=data["iqr"],
        upper_fence=data["upper_fence"],
        flagged_shards=tuple(
            FlaggedShard(f["shard_index"], f["metric"], f["exceedance"])
            for f in data["flagged_shards"]
        ),
        top_shards=tuple(
            FlaggedShard(f["shard_index"], f["metric"], f["exceedance"])
            for f in data["top_shards"]
        ),
        top_intervals=tuple(
            IntervalKey(k["index"], k["start"]) for k in data["top_intervals"]
        ),
    )


def _validate_manifest(
    manifest: Manifest, expect_num_shards: int | None
) -> list[ShardFileMeta]:
    n = manifest.config.num_shards
    if expect_num_shards is not None and expect_num_shards != n:
        raise ManifestMismatchError(
            f"manifest has {n} shards, aggregation was asked for {expect_num_shards}"
        )
    files = sorted(manifest.files, key=lambda f: f.shard_index)
    indices = [f.shard_index for f in files]
    if indices != list(range(n)):
        raise ManifestMismatchError(
            f"manifest files cover shards {indices}, expected 0..{n - 1}"
        )
    missing = [str(f.path) for f in files if not f.path.is_file()]
    if missing:
        raise TraceIoError(f"shard files listed in manifest are missing: {missing}")
    return files


def run_aggregation(
    out_dir: str | Path,
    cfg: AggregationConfig,
    ctx: WorkerCtx,
    *,
    expect_num_shards: int | None = None,
) -> tuple[dict[IntervalKey, IntervalStats] | None, AnomalyReport | None]:
    """Aggregate a generated shard set and write the rank-0 output artifacts.

    Validates the manifest against the requested flags, computes the interval
    map collaboratively, and at rank 0 writes interval_stats.parquet and
    anomalies.json and records per-rank aggregation wall times in the
    manifest. Returns (stats, report) at rank 0, (None, None) elsewhere.
    """
    out = Path(out_dir)
    manifest = load_manifest(out)
    files = _validate_manifest(manifest, expect_num_shards)

    phase_start = time.perf_counter_ns()
    stats = compute_interval_stats(files, cfg, ctx)
    phase_ns = time.perf_counter_ns() - phase_start
    timing_blobs = ctx.gather_to_root(pickle.dumps(phase_ns))

    report: AnomalyReport | None = None
    if ctx.rank == 0:
        assert stats is not None and timing_blobs is not None
        partition = PartitionConfig(
            num_shards=manifest.config.num_shards,
            num_workers=manifest.config.num_workers,
            range_start=manifest.t0,
            range_end=manifest.t1,
        )
        report = analyze(stats, make_shards(partition), cfg)
        write_interval_stats(stats, out / INTERVAL_STATS_NAME)
        write_anomaly_report(report, out / ANOMALIES_NAME)
        update_manifest_timings(
            out,
            AGGREGATION_PHASE_KEY,
            {rank: pickle.loads(blob) for rank, blob in enumerate(timing_blobs)},
        )
    ctx.barrier()  # outputs durable before any rank leaves the stage
    return stats, report
