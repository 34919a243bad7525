"""Reading CUPTI tables from an SQLite trace export and streaming the left join."""

from __future__ import annotations

import logging
import sqlite3
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from .errors import EmptyTableError, InvalidRangeError, SchemaMismatchError, TraceIoError
from .model import (
    GpuInfo,
    JoinedSample,
    KernelRecord,
    MemcpyRecord,
    Timestamp,
    decode_copy_kind,
)

logger = logging.getLogger(__name__)

KERNEL_TABLE = "CUPTI_ACTIVITY_KIND_KERNEL"
MEMCPY_TABLE = "CUPTI_ACTIVITY_KIND_MEMCPY"
GPU_TABLE = "TARGET_INFO_GPU"
STRING_TABLE = "StringIds"

# Join keys and timestamps are hard requirements; everything else defaults to
# 0 with a warning so schema variations across Nsight versions stay readable.
_KERNEL_REQUIRED = ("start", "end", "deviceId", "streamId")
_KERNEL_OPTIONAL = (
    "shortName",
    "gridX",
    "gridY",
    "gridZ",
    "blockX",
    "blockY",
    "blockZ",
    "registersPerThread",
    "staticSharedMemory",
    "dynamicSharedMemory",
)
_MEMCPY_REQUIRED = ("start", "end", "deviceId", "streamId")
_MEMCPY_OPTIONAL = ("bytes", "copyKind")
_GPU_REQUIRED = ("id",)
_GPU_OPTIONAL = (
    "globalMemorySize",
    "globalMemoryBandwidth",
    "numMultiprocessors",
    "computeCapabilityMajor",
    "computeCapabilityMinor",
)

JoinKey = tuple[int, int]


@dataclass(frozen=True)
class TraceDatabaseRef:
    """Reference to one profiler SQLite export plus its producing-rank label."""

    path: Path
    profiling_rank_label: int = 0

    def connect(self) -> sqlite3.Connection:
        if not Path(self.path).is_file():
            raise TraceIoError(f"trace database not found: {self.path}")
        try:
            return sqlite3.connect(f"file:{self.path}?mode=ro", uri=True)
        except sqlite3.Error as exc:
            raise TraceIoError(f"cannot open {self.path}: {exc}") from exc


def _table_columns(conn: sqlite3.Connection, table: str) -> set[str]:
    rows = conn.execute(f"PRAGMA table_info({table})").fetchall()
    if not rows:
        raise SchemaMismatchError(f"table {table} is missing")
    return {row[1] for row in rows}


def _select_columns(
    conn: sqlite3.Connection,
    table: str,
    required: tuple[str, ...],
    optional: tuple[str, ...],
) -> list[str]:
    """Validate the table schema and return the SELECT list, padding absent
    optional columns with a literal 0."""
    present = _table_columns(conn, table)
    missing = [c for c in required if c not in present]
    if missing:
        raise SchemaMismatchError(f"table {table} lacks required columns {missing}")
    parts = list(required)
    for col in optional:
        if col in present:
            parts.append(col)
        else:
            logger.warning("table %s has no column %s; defaulting to 0", table, col)
            parts.append(f"0 AS {col}")
    return parts


def _check_window(window: tuple[Timestamp, Timestamp]) -> tuple[Timestamp, Timestamp]:
    lo, hi = window
    if hi <= lo:
        raise InvalidRangeError(f"window [{lo}, {hi}) is empty")
    return lo, hi


def scan_kernel_time_range(db: TraceDatabaseRef) -> tuple[Timestamp, Timestamp]:
    """Return (min kernel start, max kernel end + 1) for the whole database.

    The +1 makes the upper bound half-open so the latest record still falls
    inside the range.
    """
    with db.connect() as conn:
        _select_columns(conn, KERNEL_TABLE, _KERNEL_REQUIRED, ())
        row = conn.execute(
            f"SELECT MIN(start), MAX(end) FROM {KERNEL_TABLE}"
        ).fetchone()
    if row is None or row[0] is None:
        raise EmptyTableError(f"{KERNEL_TABLE} has no rows in {db.path}")
    return int(row[0]), int(row[1]) + 1


def load_kernels(
    db: TraceDatabaseRef, window: tuple[Timestamp, Timestamp]
) -> list[KernelRecord]:
    """Kernel rows whose start timestamp lies in the half-open window."""
    lo, hi = _check_window(window)
    with db.connect() as conn:
        cols = _select_columns(conn, KERNEL_TABLE, _KERNEL_REQUIRED, _KERNEL_OPTIONAL)
        rows = conn.execute(
            f"SELECT {', '.join(cols)} FROM {KERNEL_TABLE}"
            " WHERE start >= ? AND start < ?",
            (lo, hi),
        ).fetchall()
    return [
        KernelRecord(
            start=int(r[0]),
            end=int(r[1]),
            device_id=int(r[2]),
            stream_id=int(r[3]),
            name_id=int(r[4]),
            grid_x=int(r[5]),
            grid_y=int(r[6]),
            grid_z=int(r[7]),
            block_x=int(r[8]),
            block_y=int(r[9]),
            block_z=int(r[10]),
            regs_per_thread=int(r[11]),
            smem_bytes=int(r[12]) + int(r[13]),
        )
        for r in rows
    ]


def load_memcpys(
    db: TraceDatabaseRef, window: tuple[Timestamp, Timestamp]
) -> list[MemcpyRecord]:
    """Memcpy rows whose start timestamp lies in the half-open window."""
    lo, hi = _check_window(window)
    with db.connect() as conn:
        cols = _select_columns(conn, MEMCPY_TABLE, _MEMCPY_REQUIRED, _MEMCPY_OPTIONAL)
        rows = conn.execute(
            f"SELECT {', '.join(cols)} FROM {MEMCPY_TABLE}"
            " WHERE start >= ? AND start < ?",
            (lo, hi),
        ).fetchall()
    return [
        MemcpyRecord(
            start=int(r[0]),
            end=int(r[1]),
            device_id=int(r[2]),
            stream_id=int(r[3]),
            bytes=int(r[4]),
            copy_kind=decode_copy_kind(int(r[5])),
        )
        for r in rows
    ]


def load_gpus(db: TraceDatabaseRef) -> list[GpuInfo]:
    """All GPU property rows (never windowed)."""
    with db.connect() as conn:
        cols = _select_columns(conn, GPU_TABLE, _GPU_REQUIRED, _GPU_OPTIONAL)
        rows = conn.execute(f"SELECT {', '.join(cols)} FROM {GPU_TABLE}").fetchall()
    return [
        GpuInfo(
            device_id=int(r[0]),
            global_mem_bytes=int(r[1]),
            bandwidth_kb_per_s=int(r[2]),
            sm_count=int(r[3]),
            compute_capability_major=int(r[4]),
            compute_capability_minor=int(r[5]),
        )
        for r in rows
    ]


def read_string_table(db: TraceDatabaseRef) -> dict[int, str] | None:
    """The interned kernel-name table, if the export carries one."""
    with db.connect() as conn:
        try:
            rows = conn.execute(f"SELECT id, value FROM {STRING_TABLE}").fetchall()
        except sqlite3.Error:
            return None
    return {int(r[0]): str(r[1]) for r in rows}


def load_records(
    db: TraceDatabaseRef, window: tuple[Timestamp, Timestamp]
) -> tuple[list[KernelRecord], list[MemcpyRecord], list[GpuInfo]]:
    """Load the three profiler tables, kernels and memcpys filtered by start."""
    return load_kernels(db, window), load_memcpys(db, window), load_gpus(db)


def group_memcpys(memcpys: Iterable[MemcpyRecord]) -> dict[JoinKey, list[MemcpyRecord]]:
    groups: dict[JoinKey, list[MemcpyRecord]] = {}
    for m in memcpys:
        groups.setdefault((m.device_id, m.stream_id), []).append(m)
    return groups


def iter_join_rows(
    kernels: Iterable[KernelRecord],
    memcpy_groups: dict[JoinKey, list[MemcpyRecord]],
    gpu_by_device: dict[int, GpuInfo],
) -> Iterator[tuple[KernelRecord, MemcpyRecord | None, GpuInfo | None]]:
    """Stream the left join as raw (kernel, memcpy, gpu) triples.

    Memory stays bounded by the grouped build side: the output is never
    materialized, only the memcpy hash and one kernel at a time are resident.
    """
    empty: list[MemcpyRecord | None] = [None]
    for k in kernels:
        gpu = gpu_by_device.get(k.device_id)
        matches = memcpy_groups.get((k.device_id, k.stream_id)) or empty
        for m in matches:
            yield k, m, gpu


def left_join(
    kernels: Iterable[KernelRecord],
    memcpys: Iterable[MemcpyRecord],
    gpus: Iterable[GpuInfo],
) -> Iterator[JoinedSample]:
    """Left-join kernels with memcpys on (device_id, stream_id).

    Every kernel yields at least one sample; a kernel with matching memcpys
    yields one sample per match, and GPU properties attach by device_id when
    present. Output size is the sum over kernels of max(1, match count).
    """
    groups = group_memcpys(memcpys)
    gpu_by_device = {g.device_id: g for g in gpus}
    for k, m, g in iter_join_rows(kernels, groups, gpu_by_device):
        yield JoinedSample(kernel=k, memcpy=m, gpu=g)
