"""Stage one: extract assigned shards, join records, write columnar shard files."""

from __future__ import annotations

import json
import logging
import os
import pickle
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import pyarrow as pa
import pyarrow.parquet as pq

from .comm import WorkerCtx
from .errors import ManifestConflictError, TraceIoError
from .ingest import (
    TraceDatabaseRef,
    group_memcpys,
    iter_join_rows,
    load_gpus,
    load_kernels,
    load_memcpys,
    read_string_table,
)
from .model import GpuInfo, KernelRecord, MemcpyRecord, PartitionConfig
from .partition import assign_blocks, make_shards

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
STRING_TABLE_NAME = "string_table.json"

SHARD_SCHEMA = pa.schema(
    [
        ("kernel_start", pa.uint64()),
        ("kernel_end", pa.uint64()),
        ("device_id", pa.int32()),
        ("stream_id", pa.int32()),
        ("kernel_name_id", pa.int32()),
        ("grid_x", pa.int32()),
        ("grid_y", pa.int32()),
        ("grid_z", pa.int32()),
        ("block_x", pa.int32()),
        ("block_y", pa.int32()),
        ("block_z", pa.int32()),
        ("regs_per_thread", pa.int32()),
        ("smem_bytes", pa.int64()),
        ("memcpy_start", pa.uint64()),
        ("memcpy_end", pa.uint64()),
        ("memcpy_bytes", pa.uint64()),
        ("copy_kind_raw", pa.int32()),
        ("gpu_sm_count", pa.int32()),
        ("gpu_mem_bytes", pa.uint64()),
    ]
)

_BATCH_ROWS = 65536


def shard_file_name(rank: int, shard_index: int) -> str:
    return f"rank{rank:04d}_shard{shard_index:06d}.parquet"


@dataclass(frozen=True)
class ShardFileMeta:
    """Catalog entry for one written shard file."""

    rank: int
    shard_index: int
    path: Path
    row_count: int
    window: tuple[int, int]
    wall_time_ns: int


JoinRow = tuple[KernelRecord, MemcpyRecord | None, GpuInfo | None]


def write_shard_file(path: Path, rows: Iterable[JoinRow]) -> int:
    """Stream joined rows into one parquet file; returns the row count.

    Rows are flushed in bounded batches so peak memory never scales with the
    join output size.
    """
    names = SHARD_SCHEMA.names
    columns: list[list] = [[] for _ in names]
    (
        c_kstart, c_kend, c_dev, c_stream, c_name,
        c_gx, c_gy, c_gz, c_bx, c_by, c_bz, c_regs, c_smem,
        c_mstart, c_mend, c_mbytes, c_kind, c_sm, c_gmem,
    ) = columns
    count = 0
    writer = pq.ParquetWriter(path, SHARD_SCHEMA)
    try:
        for kernel, memcpy, gpu in rows:
            c_kstart.append(kernel.start)
            c_kend.append(kernel.end)
            c_dev.append(kernel.device_id)
            c_stream.append(kernel.stream_id)
            c_name.append(kernel.name_id)
            c_gx.append(kernel.grid_x)
            c_gy.append(kernel.grid_y)
            c_gz.append(kernel.grid_z)
            c_bx.append(kernel.block_x)
            c_by.append(kernel.block_y)
            c_bz.append(kernel.block_z)
            c_regs.append(kernel.regs_per_thread)
            c_smem.append(kernel.smem_bytes)
            if memcpy is None:
                c_mstart.append(None)
                c_mend.append(None)
                c_mbytes.append(None)
                c_kind.append(None)
            else:
                c_mstart.append(memcpy.start)
                c_mend.append(memcpy.end)
                c_mbytes.append(memcpy.bytes)
                c_kind.append(memcpy.copy_kind.raw)
            if gpu is None:
                c_sm.append(None)
                c_gmem.append(None)
            else:
                c_sm.append(gpu.sm_count)
                c_gmem.append(gpu.global_mem_bytes)
            count += 1
            if count % _BATCH_ROWS == 0:
                writer.write_table(
                    pa.table(dict(zip(names, columns)), schema=SHARD_SCHEMA)
                )
                for col in columns:
                    col.clear()
        if columns[0] or count == 0:
            writer.write_table(
                pa.table(dict(zip(names, columns)), schema=SHARD_SCHEMA)
            )
    finally:
        writer.close()
    return count


def read_shard_batches(path: Path, batch_rows: int = _BATCH_ROWS) -> Iterator[pa.RecordBatch]:
    pf = pq.ParquetFile(path)
    yield from pf.iter_batches(batch_size=batch_rows)


@dataclass(frozen=True)
class ManifestConfig:
    """Partition configuration pinned by a generation run."""

    num_shards: int
    num_workers: int
    range_start: int
    range_end: int
    db_path: str
    db_rank_label: int

    def partition_fields(self) -> tuple[int, int, int, int]:
        return (self.num_shards, self.num_workers, self.range_start, self.range_end)


@dataclass
class Manifest:
    """Record of one generation run: config, shard files, per-rank timings."""

    config: ManifestConfig
    t0: int
    t1: int
    files: list[ShardFileMeta]
    timings: dict[int, dict[str, int]]

    def to_json_dict(self) -> dict:
        return {
            "config": {
                "num_shards": self.config.num_shards,
                "num_workers": self.config.num_workers,
                "range_start": self.config.range_start,
                "range_end": self.config.range_end,
                "db_path": self.config.db_path,
                "db_rank_label": self.config.db_rank_label,
            },
            "t0": self.t0,
            "t1": self.t1,
            "files": [
                {
                    "rank": f.rank,
                    "shard_index": f.shard_index,
                    "path": f.path.name,
                    "row_count": f.row_count,
                    "window": list(f.window),
                    "wall_time_ns": f.wall_time_ns,
                }
                for f in sorted(self.files, key=lambda f: f.shard_index)
            ],
            "timings": {
                str(rank): dict(phases) for rank, phases in sorted(self.timings.items())
            },
        }


def manifest_path(out_dir: str | Path) -> Path:
    return Path(out_dir) / MANIFEST_NAME


def save_manifest(manifest: Manifest, out_dir: str | Path) -> None:
    target = manifest_path(out_dir)
    tmp = target.with_suffix(".json.tmp")
    tmp.write_text(
        json.dumps(manifest.to_json_dict(), indent=2) + "\n", encoding="utf-8"
    )
    os.replace(tmp, target)


def load_manifest(out_dir: str | Path) -> Manifest:
    path = manifest_path(out_dir)
    if not path.is_file():
        raise TraceIoError(f"no manifest at {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    cfg = ManifestConfig(
        num_shards=data["config"]["num_shards"],
        num_workers=data["config"]["num_workers"],
        range_start=data["config"]["range_start"],
        range_end=data["config"]["range_end"],
        db_path=data["config"].get("db_path", ""),
        db_rank_label=data["config"].get("db_rank_label", 0),
    )
    files = [
        ShardFileMeta(
            rank=f["rank"],
            shard_index=f["shard_index"],
            path=Path(out_dir) / f["path"],
            row_count=f["row_count"],
            window=(f["window"][0], f["window"][1]),
            wall_time_ns=f["wall_time_ns"],
        )
        for f in data["files"]
    ]
    timings = {
        int(rank): {k: int(v) for k, v in phases.items()}
        for rank, phases in data.get("timings", {}).items()
    }
    return Manifest(config=cfg, t0=data["t0"], t1=data["t1"], files=files, timings=timings)


def update_manifest_timings(
    out_dir: str | Path, phase_key: str, per_rank_ns: dict[int, int]
) -> None:
    """Merge one phase's per-rank wall times into the stored manifest."""
    manifest = load_manifest(out_dir)
    for rank, ns in per_rank_ns.items():
        manifest.timings.setdefault(rank, {})[phase_key] = ns
    save_manifest(manifest, out_dir)


def _check_existing_manifest(out_dir: Path, cfg: PartitionConfig, db: TraceDatabaseRef) -> None:
    if not manifest_path(out_dir).is_file():
        return
    existing = load_manifest(out_dir)
    wanted = (cfg.num_shards, cfg.num_workers, cfg.range_start, cfg.range_end)
    if existing.config.partition_fields() != wanted:
        raise ManifestConflictError(
            f"manifest in {out_dir} was generated with config "
            f"{existing.config.partition_fields()}, requested {wanted}"
        )


def run_generation(
    db: TraceDatabaseRef,
    cfg: PartitionConfig,
    ctx: WorkerCtx,
    out_dir: str | Path,
) -> list[ShardFileMeta]:
    """Write this rank's shard files and, at rank 0, the merged manifest.

    Each shard file holds exactly the joined samples whose kernel start lies
    in the shard window; the memcpy side of the join always spans the full
    time range so the union over shards equals the unsharded join. Returns
    the full file list at rank 0 and this rank's own files elsewhere.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise TraceIoError(f"cannot create output directory {out}: {exc}") from exc
    _check_existing_manifest(out, cfg, db)

    ctx.barrier()  # config agreement: nobody writes until everyone checked

    phase_start = time.perf_counter_ns()
    full_range = (cfg.range_start, cfg.range_end)
    memcpy_groups = group_memcpys(load_memcpys(db, full_range))
    gpu_by_device = {g.device_id: g for g in load_gpus(db)}
    shards = make_shards(cfg)
    block = assign_blocks(cfg)[ctx.rank]

    local: list[ShardFileMeta] = []
    for shard_index in block.shard_indices:
        shard = shards[shard_index]
        file_start = time.perf_counter_ns()
        kernels = load_kernels(db, shard.window)
        path = out / shard_file_name(ctx.rank, shard_index)
        try:
            rows = write_shard_file(
                path, iter_join_rows(kernels, memcpy_groups, gpu_by_device)
            )
        except OSError as exc:
            raise TraceIoError(f"cannot write shard file {path}: {exc}") from exc
        local.append(
            ShardFileMeta(
                rank=ctx.rank,
                shard_index=shard_index,
                path=path,
                row_count=rows,
                window=shard.window,
                wall_time_ns=time.perf_counter_ns() - file_start,
            )
        )
        logger.debug("rank %d wrote shard %d (%d rows)", ctx.rank, shard_index, rows)
    phase_ns = time.perf_counter_ns() - phase_start

    gathered = ctx.gather_to_root(pickle.dumps((local, phase_ns)))
    result = local
    if gathered is not None:
        all_files: list[ShardFileMeta] = []
        timings: dict[int, dict[str, int]] = {}
        for rank, blob in enumerate(gathered):
            rank_files, rank_ns = pickle.loads(blob)
            all_files.extend(rank_files)
            timings[rank] = {"generation_ns": rank_ns}
        manifest = Manifest(
            config=ManifestConfig(
                num_shards=cfg.num_shards,
                num_workers=cfg.num_workers,
                range_start=cfg.range_start,
                range_end=cfg.range_end,
                db_path=str(db.path),
                db_rank_label=db.profiling_rank_label,
            ),
            t0=cfg.range_start,
            t1=cfg.range_end,
            files=sorted(all_files, key=lambda f: f.shard_index),
            timings=timings,
        )
        save_manifest(manifest, out)
        names = read_string_table(db)
        if names:
            (out / STRING_TABLE_NAME).write_text(
                json.dumps({str(k): v for k, v in sorted(names.items())}, indent=2)
                + "\n",
                encoding="utf-8",
            )
        result = manifest.files

    ctx.barrier()  # manifest visible to every rank before the stage returns
    return result
