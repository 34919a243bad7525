"""Command-line entry point wiring the pipeline stages together."""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import subprocess
import sys
import tempfile
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from . import aggregation, comm, report
from .comm import ENV_RANK, ENV_RENDEZVOUS, ENV_WORLD_SIZE, FileRendezvousCtx, run_workers
from .errors import ShardprofError
from .generation import load_manifest, run_generation
from .ingest import TraceDatabaseRef, scan_kernel_time_range
from .model import AggregationConfig, PartitionConfig, SynthSpec
from .synth import generate_db

logger = logging.getLogger(__name__)

DEFAULT_SHARDS_PER_WORKER = 8  # enough shards for balanced blocks at small P


@dataclass(frozen=True)
class RunConfig:
    """Resolved flags for the distributed stages."""

    db: Path | None
    out: Path
    num_shards: int
    interval_ns: int
    top_k: int
    variability_fraction: Fraction
    workers: int
    backend: str
    timeout_s: float
    num_shards_explicit: bool

    @property
    def aggregation(self) -> AggregationConfig:
        return AggregationConfig(
            interval_ns=self.interval_ns,
            top_k_shards=self.top_k,
            variability_fraction=self.variability_fraction,
        )


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    explicit = args.num_shards is not None
    return RunConfig(
        db=Path(args.db) if getattr(args, "db", None) else None,
        out=Path(args.out),
        num_shards=args.num_shards
        if explicit
        else DEFAULT_SHARDS_PER_WORKER * args.workers,
        interval_ns=int(Fraction(str(args.interval_s)) * 1_000_000_000),
        top_k=args.top_k,
        variability_fraction=Fraction(str(args.variability_frac)),
        workers=args.workers,
        backend=args.backend,
        timeout_s=args.timeout_s,
        num_shards_explicit=explicit,
    )


def _stage_generate(cfg: RunConfig, ctx: comm.WorkerCtx) -> None:
    db = TraceDatabaseRef(path=cfg.db)
    t0, t1 = scan_kernel_time_range(db)
    partition = PartitionConfig(
        num_shards=cfg.num_shards,
        num_workers=ctx.world_size,
        range_start=t0,
        range_end=t1,
    )
    run_generation(db, partition, ctx, cfg.out)


def _stage_aggregate(cfg: RunConfig, ctx: comm.WorkerCtx) -> None:
    expect = cfg.num_shards if cfg.num_shards_explicit else None
    aggregation.run_aggregation(
        cfg.out, cfg.aggregation, ctx, expect_num_shards=expect
    )


def _emit_run_reports(out_dir: Path, label: str | None = None) -> None:
    """Write the deterministic per-run CSV and SVG artifacts for one result
    directory. Overhead is only reported by the multi-run report command
    because wall times vary run to run."""
    rows = aggregation.read_interval_stats(out_dir / aggregation.INTERVAL_STATS_NAME)
    anomalies = aggregation.read_anomaly_report(out_dir / aggregation.ANOMALIES_NAME)
    label = label or (out_dir.name or "trace")
    ts_csv = report.emit_stall_timeseries([(label, rows)], out_dir / report.TIMESERIES_CSV)
    report.render_svg(ts_csv, report.ChartKind.TIMESERIES, ts_csv.with_suffix(".svg"))
    if anomalies.top_intervals:
        pc_csv = report.emit_parallel_coordinates(
            rows, anomalies.top_intervals, out_dir / report.PARCOORDS_CSV
        )
        report.render_svg(pc_csv, report.ChartKind.PARCOORDS, pc_csv.with_suffix(".svg"))
    else:
        logger.info("no non-empty intervals; skipping parallel coordinates")


def _pipeline_worker(cfg: RunConfig, ctx: comm.WorkerCtx) -> None:
    _stage_generate(cfg, ctx)
    _stage_aggregate(cfg, ctx)
    if ctx.rank == 0:
        _emit_run_reports(cfg.out)


def _spawn_process_workers(cfg: RunConfig, argv: list[str]) -> None:
    """Re-exec this CLI once per rank; the children rendezvous on a shared
    temporary directory and the slowest child's exit code wins."""
    rendezvous = tempfile.mkdtemp(prefix="shardprof-rdv-")
    procs: list[subprocess.Popen] = []
    try:
        for rank in range(cfg.workers):
            env = dict(os.environ)
            env[ENV_RANK] = str(rank)
            env[ENV_WORLD_SIZE] = str(cfg.workers)
            env[ENV_RENDEZVOUS] = rendezvous
            procs.append(
                subprocess.Popen(
                    [sys.executable, "-m", "shardprof", *argv], env=env
                )
            )
        codes = [p.wait() for p in procs]
    finally:
        for p in procs:
            if p.poll() is None:
                p.kill()
        shutil.rmtree(rendezvous, ignore_errors=True)
    if any(codes):
        raise ShardprofError(f"worker processes exited with codes {codes}")


def _run_distributed(args: argparse.Namespace, argv: list[str], worker) -> None:
    cfg = _resolve_config(args)
    if ENV_RANK in os.environ:
        # Spawned (or externally launched) rank: the environment decides.
        ctx = FileRendezvousCtx.from_env(timeout_s=cfg.timeout_s)
        worker(cfg, ctx)
        return
    if cfg.workers == 1:
        worker(cfg, comm.InProcessGroup(1, timeout_s=cfg.timeout_s).worker_ctx(0))
    elif cfg.backend == "inprocess":
        run_workers(cfg.workers, lambda ctx: worker(cfg, ctx), timeout_s=cfg.timeout_s)
    else:
        _spawn_process_workers(cfg, argv)


def _cmd_synth(args: argparse.Namespace) -> None:
    out = Path(args.out)
    if out.suffix == ".sqlite":
        db_path = out
    else:
        out.mkdir(parents=True, exist_ok=True)
        db_path = out / "trace.sqlite"
    ratio = tuple(float(w) for w in args.direction_ratio.split(":"))
    if len(ratio) != 3:
        raise ShardprofError("--direction-ratio must look like HtoD:DtoH:DtoD")
    bursts = []
    for burst in args.burst or []:
        parts = burst.split(":")
        if len(parts) != 3:
            raise ShardprofError("--burst must look like time_s:width_s:amplitude")
        bursts.append((float(parts[0]), float(parts[1]), float(parts[2])))
    spec = SynthSpec(
        seed=args.seed,
        duration_s=args.duration_s,
        kernels_per_s=args.kernels_per_s,
        memcpys_per_s=args.memcpys_per_s,
        devices=args.devices,
        streams_per_device=args.streams,
        direction_ratio=ratio,
        stall_bursts=tuple(bursts),
    )
    ref, truth = generate_db(spec, db_path)
    print(f"wrote {ref.path} ({truth.kernel_count} kernels, "
          f"{truth.memcpy_count} memcpys, {truth.join_row_count} joined rows)")


def _cmd_report(args: argparse.Namespace) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_dirs = [Path(d) for d in args.results]
    labels = args.labels.split(",") if args.labels else [d.name for d in run_dirs]
    if len(labels) != len(run_dirs):
        raise ShardprofError("--labels must name every results directory")

    traces = []
    manifests = []
    for label, run_dir in zip(labels, run_dirs):
        rows = aggregation.read_interval_stats(run_dir / aggregation.INTERVAL_STATS_NAME)
        traces.append((label, rows))
        manifests.append(load_manifest(run_dir))
        anomalies = aggregation.read_anomaly_report(run_dir / aggregation.ANOMALIES_NAME)
        if anomalies.top_intervals:
            pc_csv = report.emit_parallel_coordinates(
                rows,
                anomalies.top_intervals,
                out / f"parallel_coordinates_{label}.csv",
            )
            report.render_svg(
                pc_csv, report.ChartKind.PARCOORDS, pc_csv.with_suffix(".svg")
            )
    ts_csv = report.emit_stall_timeseries(traces, out / report.TIMESERIES_CSV)
    report.render_svg(ts_csv, report.ChartKind.TIMESERIES, ts_csv.with_suffix(".svg"))
    oh_csv = report.emit_overhead_report(manifests, out / report.OVERHEAD_CSV)
    report.render_svg(oh_csv, report.ChartKind.OVERHEAD_BARS, oh_csv.with_suffix(".svg"))


def _add_distributed_flags(parser: argparse.ArgumentParser, *, with_db: bool) -> None:
    if with_db:
        parser.add_argument("--db", required=True, help="trace database (SQLite)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument(
        "--num-shards", type=int, default=None,
        help="time shards N (default: 8 x workers)",
    )
    parser.add_argument(
        "--interval-s", type=float, default=1.0,
        help="aggregation interval in seconds (default: 1.0)",
    )
    parser.add_argument(
        "--top-k", type=int, default=5,
        help="anomalous shards to report (default: 5)",
    )
    parser.add_argument(
        "--variability-frac", type=str, default="0.05",
        help="fraction of highest-variability intervals to keep (default: 0.05)",
    )
    parser.add_argument(
        "--workers", type=int, default=1, help="worker count P (default: 1)"
    )
    parser.add_argument(
        "--backend", choices=("inprocess", "process"), default="inprocess",
        help="worker backend (default: inprocess)",
    )
    parser.add_argument(
        "--timeout-s", type=float, default=comm.DEFAULT_TIMEOUT_S,
        help="collective timeout in seconds (default: 300)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shardprof",
        description="Shard, analyze and report on GPU profiler trace databases.",
    )
    parser.add_argument("--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic trace database")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True, help="output directory or .sqlite path")
    p_synth.add_argument("--duration-s", type=float, default=10.0)
    p_synth.add_argument("--kernels-per-s", type=float, default=100.0)
    p_synth.add_argument("--memcpys-per-s", type=float, default=20.0)
    p_synth.add_argument("--devices", type=int, default=1)
    p_synth.add_argument("--streams", type=int, default=2)
    p_synth.add_argument("--direction-ratio", type=str, default="50:50:1")
    p_synth.add_argument(
        "--burst", action="append", metavar="T:W:A",
        help="inject a stall burst at T s, W s wide, amplitude A (repeatable)",
    )
    p_synth.set_defaults(handler=_cmd_synth, distributed=None)

    p_gen = sub.add_parser("generate", help="shard the trace into parquet files")
    _add_distributed_flags(p_gen, with_db=True)
    p_gen.set_defaults(distributed=_stage_generate)

    p_agg = sub.add_parser("aggregate", help="aggregate generated shard files")
    _add_distributed_flags(p_agg, with_db=False)
    p_agg.set_defaults(distributed=_stage_aggregate)

    p_pipe = sub.add_parser("pipeline", help="generate, aggregate and report")
    _add_distributed_flags(p_pipe, with_db=True)
    p_pipe.set_defaults(distributed=_pipeline_worker)

    p_rep = sub.add_parser("report", help="emit CSV/SVG artifacts for finished runs")
    p_rep.add_argument("results", nargs="+", help="result directories to report on")
    p_rep.add_argument("--out", required=True, help="directory for report artifacts")
    p_rep.add_argument("--labels", type=str, default=None, help="comma-separated labels")
    p_rep.set_defaults(handler=_cmd_report, distributed=None)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.distributed is not None:
            _run_distributed(args, argv, args.distributed)
        else:
            args.handler(args)
    except ShardprofError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
