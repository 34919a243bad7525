"""Synthetic trace databases with exact, recomputable ground truth.

The generator is deterministic: all draws come from a counter-based SplitMix64
stream seeded by the spec, so a fixed spec yields a byte-identical database on
any platform.
"""

from __future__ import annotations

import json
import sqlite3
from dataclasses import dataclass
from pathlib import Path

from .errors import TraceIoError
from .ingest import TraceDatabaseRef
from .model import KernelRecord, MemcpyRecord, SynthSpec

_MASK64 = (1 << 64) - 1

_KERNEL_NAMES = (
    "gemm_nn_128x128",
    "reduce_sum_stage1",
    "elementwise_relu",
    "softmax_rows",
    "layernorm_fused",
    "adam_update",
    "transpose_tiled",
    "scatter_add",
)

_DIRECTION_RAWS = (1, 2, 8)  # HtoD, DtoH, DtoD


class CounterRng:
    """SplitMix64: a tiny counter-based generator, bit-exact everywhere."""

    def __init__(self, seed: int) -> None:
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def randint(self, lo: int, hi: int) -> int:
        """Uniform-ish integer in [lo, hi]; modulo bias is irrelevant here."""
        return lo + self.next_u64() % (hi - lo + 1)

    def pick_weighted(self, weights: list[int]) -> int:
        total = sum(weights)
        r = self.next_u64() % total
        for i, w in enumerate(weights):
            if r < w:
                return i
            r -= w
        return len(weights) - 1


@dataclass(frozen=True)
class GroundTruth:
    """Exact counts recomputable from the emitted database by direct scan."""

    seed: int
    kernel_count: int
    memcpy_count: int
    memcpy_in_range_count: int
    t0: int
    t1: int
    join_row_count: int
    key_multiplicities: dict[str, tuple[int, int]]
    bursts: tuple[tuple[float, float, float], ...]

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "kernel_count": self.kernel_count,
            "memcpy_count": self.memcpy_count,
            "memcpy_in_range_count": self.memcpy_in_range_count,
            "t0": self.t0,
            "t1": self.t1,
            "join_row_count": self.join_row_count,
            "key_multiplicities": {
                k: list(v) for k, v in sorted(self.key_multiplicities.items())
            },
            "bursts": [list(b) for b in self.bursts],
        }


def ground_truth_path(db_path: str | Path) -> Path:
    p = Path(db_path)
    return p.with_name(p.stem + ".ground_truth.json")


def read_ground_truth(db_path: str | Path) -> GroundTruth:
    data = json.loads(ground_truth_path(db_path).read_text(encoding="utf-8"))
    return GroundTruth(
        seed=data["seed"],
        kernel_count=data["kernel_count"],
        memcpy_count=data["memcpy_count"],
        memcpy_in_range_count=data["memcpy_in_range_count"],
        t0=data["t0"],
        t1=data["t1"],
        join_row_count=data["join_row_count"],
        key_multiplicities={
            k: (v[0], v[1]) for k, v in data["key_multiplicities"].items()
        },
        bursts=tuple(tuple(b) for b in data["bursts"]),
    )


_EPOCH_BASE = 1_000_000  # keep timestamps away from 0 so range checks bite


def _draw_kernels(spec: SynthSpec, rng: CounterRng, total_ns: int) -> list[KernelRecord]:
    count = int(round(spec.kernels_per_s * spec.duration_s))
    kernels = []
    for _ in range(count):
        start = _EPOCH_BASE + rng.randint(0, total_ns - 1)
        duration = rng.randint(2_000, 80_000)
        device = rng.randint(0, spec.devices - 1)
        stream = rng.randint(1, spec.streams_per_device)
        kernels.append(
            KernelRecord(
                start=start,
                end=start + duration,
                device_id=device,
                stream_id=stream,
                name_id=rng.randint(1, len(_KERNEL_NAMES)),
                grid_x=rng.randint(1, 256),
                grid_y=rng.randint(1, 4),
                grid_z=1,
                block_x=32 * rng.randint(1, 8),
                block_y=1,
                block_z=1,
                regs_per_thread=rng.randint(16, 128),
                smem_bytes=1024 * rng.randint(0, 4),
            )
        )
    kernels.sort(key=lambda k: (k.start, k.end, k.device_id, k.stream_id))
    return kernels


def _draw_memcpys(spec: SynthSpec, rng: CounterRng, total_ns: int) -> list[MemcpyRecord]:
    from .model import decode_copy_kind

    count = int(round(spec.memcpys_per_s * spec.duration_s))
    weights = [max(0, int(round(w * 1000))) for w in spec.direction_ratio]
    burst_windows = [
        (_EPOCH_BASE + int(t * 1e9), _EPOCH_BASE + int((t + w) * 1e9), amp)
        for t, w, amp in spec.stall_bursts
    ]
    memcpys = []
    for _ in range(count):
        start = _EPOCH_BASE + rng.randint(0, total_ns - 1)
        duration = rng.randint(1_000, 50_000)
        for lo, hi, amp in burst_windows:
            if lo <= start < hi:
                duration = int(duration * amp)
        raw = _DIRECTION_RAWS[rng.pick_weighted(weights)]
        memcpys.append(
            MemcpyRecord(
                start=start,
                end=start + duration,
                bytes=rng.randint(1 << 10, 1 << 20),
                copy_kind=decode_copy_kind(raw),
                device_id=rng.randint(0, spec.devices - 1),
                stream_id=rng.randint(1, spec.streams_per_device),
            )
        )
    memcpys.sort(key=lambda m: (m.start, m.end, m.device_id, m.stream_id))
    return memcpys


def _ground_truth(
    spec: SynthSpec, kernels: list[KernelRecord], memcpys: list[MemcpyRecord]
) -> GroundTruth:
    if kernels:
        t0 = min(k.start for k in kernels)
        t1 = max(k.end for k in kernels) + 1
    else:
        t0 = t1 = 0
    in_range = [m for m in memcpys if t0 <= m.start < t1]
    kernel_keys: dict[str, int] = {}
    memcpy_keys: dict[str, int] = {}
    for k in kernels:
        key = f"{k.device_id}:{k.stream_id}"
        kernel_keys[key] = kernel_keys.get(key, 0) + 1
    for m in in_range:
        key = f"{m.device_id}:{m.stream_id}"
        memcpy_keys[key] = memcpy_keys.get(key, 0) + 1
    join_rows = sum(
        count * max(1, memcpy_keys.get(key, 0)) for key, count in kernel_keys.items()
    )
    keys = {
        key: (kernel_keys.get(key, 0), memcpy_keys.get(key, 0))
        for key in set(kernel_keys) | set(memcpy_keys)
    }
    return GroundTruth(
        seed=spec.seed,
        kernel_count=len(kernels),
        memcpy_count=len(memcpys),
        memcpy_in_range_count=len(in_range),
        t0=t0,
        t1=t1,
        join_row_count=join_rows,
        key_multiplicities=keys,
        bursts=tuple(spec.stall_bursts),
    )


def _write_db(
    path: Path,
    spec: SynthSpec,
    kernels: list[KernelRecord],
    memcpys: list[MemcpyRecord],
) -> None:
    path.unlink(missing_ok=True)
    conn = sqlite3.connect(path)
    try:
        conn.execute(
            "CREATE TABLE CUPTI_ACTIVITY_KIND_KERNEL ("
            "start INTEGER NOT NULL, end INTEGER NOT NULL,"
            " deviceId INTEGER NOT NULL, streamId INTEGER NOT NULL,"
            " shortName INTEGER, gridX INTEGER, gridY INTEGER, gridZ INTEGER,"
            " blockX INTEGER, blockY INTEGER, blockZ INTEGER,"
            " registersPerThread INTEGER, staticSharedMemory INTEGER,"
            " dynamicSharedMemory INTEGER)"
        )
        conn.execute(
            "CREATE TABLE CUPTI_ACTIVITY_KIND_MEMCPY ("
            "start INTEGER NOT NULL, end INTEGER NOT NULL,"
            " deviceId INTEGER NOT NULL, streamId INTEGER NOT NULL,"
            " bytes INTEGER, copyKind INTEGER)"
        )
        conn.execute(
            "CREATE TABLE TARGET_INFO_GPU (id INTEGER, name TEXT,"
            " globalMemorySize INTEGER, globalMemoryBandwidth INTEGER,"
            " numMultiprocessors INTEGER, computeCapabilityMajor INTEGER,"
            " computeCapabilityMinor INTEGER)"
        )
        conn.execute("CREATE TABLE StringIds (id INTEGER, value TEXT)")
        conn.executemany(
            "INSERT INTO CUPTI_ACTIVITY_KIND_KERNEL VALUES"
            " (?,?,?,?,?,?,?,?,?,?,?,?,?,?)",
            [
                (
                    k.start, k.end, k.device_id, k.stream_id, k.name_id,
                    k.grid_x, k.grid_y, k.grid_z, k.block_x, k.block_y, k.block_z,
                    k.regs_per_thread, k.smem_bytes, 0,
                )
                for k in kernels
            ],
        )
        conn.executemany(
            "INSERT INTO CUPTI_ACTIVITY_KIND_MEMCPY VALUES (?,?,?,?,?,?)",
            [
                (m.start, m.end, m.device_id, m.stream_id, m.bytes, m.copy_kind.raw)
                for m in memcpys
            ],
        )
        conn.executemany(
            "INSERT INTO TARGET_INFO_GPU VALUES (?,?,?,?,?,?,?)",
            [
                (d, f"Synthetic GPU {d}", 40 * (1 << 30), 1_555_000_000, 108, 8, 0)
                for d in range(spec.devices)
            ],
        )
        conn.executemany(
            "INSERT INTO StringIds VALUES (?,?)",
            list(enumerate(_KERNEL_NAMES, start=1)),
        )
        conn.commit()
    finally:
        conn.close()


def generate_db(spec: SynthSpec, out: str | Path) -> tuple[TraceDatabaseRef, GroundTruth]:
    """Write a synthetic trace database and its ground-truth sidecar.

    Returns the database reference and the exact expected counts, including
    the full-range left-join row count.
    """
    path = Path(out)
    rng = CounterRng(spec.seed)
    total_ns = max(1, int(spec.duration_s * 1e9))
    kernels = _draw_kernels(spec, rng, total_ns)
    memcpys = _draw_memcpys(spec, rng, total_ns)
    truth = _ground_truth(spec, kernels, memcpys)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_db(path, spec, kernels, memcpys)
        ground_truth_path(path).write_text(
            json.dumps(truth.to_json_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    except OSError as exc:
        raise TraceIoError(f"cannot write synthetic database {path}: {exc}") from exc
    return TraceDatabaseRef(path=path, profiling_rank_label=0), truth
