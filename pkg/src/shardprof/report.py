"""Analysis artifacts: stall time series, parallel coordinates, overhead CSVs,
and self-contained SVG renderings of each.

CSV output is byte-deterministic: floats are printed with 9 significant
digits, lines end with a bare newline, and row order is a pure function of
the input. The SVGs are a convenience layer over the CSVs and are never the
source of truth.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .aggregation import IntervalRow
from .errors import EmptyInputError, MalformedCsvError, TraceIoError
from .generation import Manifest
from .model import IntervalKey

TIMESERIES_HEADER = ["trace_label", "elapsed_s", "stall_total_ns", "stall_std_ns"]
PARCOORDS_HEADER = [
    "interval_start_s",
    "stall_total_ns",
    "kernel_count",
    "htod_count",
    "dtoh_count",
    "dtod_count",
    "htod_bytes",
    "dtoh_bytes",
    "dtod_bytes",
    "stall_std_ns",
]

TIMESERIES_CSV = "stall_timeseries.csv"
PARCOORDS_CSV = "parallel_coordinates.csv"
OVERHEAD_CSV = "overhead_report.csv"


def _fmt(value) -> str:
    if isinstance(value, bool):
        raise TypeError("no boolean cells in report CSVs")
    if isinstance(value, int):
        return str(value)
    return format(value, ".9g")


def _write_csv(path: str | Path, header: list[str], rows: list[list]) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([cell if isinstance(cell, str) else _fmt(cell) for cell in row])
    try:
        Path(path).write_text(buffer.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise TraceIoError(f"cannot write {path}: {exc}") from exc


def _origin(rows: Sequence[IntervalRow]) -> int:
    # The statistics grid always materializes interval 0, whose start is the
    # trace's own time origin.
    return min(rows, key=lambda r: r.index).start


def emit_stall_timeseries(
    traces: Sequence[tuple[str, Sequence[IntervalRow]]], out: str | Path
) -> Path:
    """One row per (trace, interval): elapsed seconds from the trace's own
    origin plus the interval's stall total and std. Empty intervals stay in,
    zeroed, so rendered gaps are honest."""
    if not traces or all(not rows for _, rows in traces):
        raise EmptyInputError("no interval statistics to report")
    out_rows: list[list] = []
    for label, rows in traces:
        ordered = sorted(rows, key=lambda r: r.index)
        t0 = _origin(ordered)
        for r in ordered:
            out_rows.append(
                [label, (r.start - t0) / 1e9, r.stall_total_ns, r.stall_std_ns]
            )
    _write_csv(out, TIMESERIES_HEADER, out_rows)
    return Path(out)


def emit_parallel_coordinates(
    rows: Sequence[IntervalRow],
    top: Sequence[IntervalKey],
    out: str | Path,
) -> Path:
    """Root-cause table restricted to the top-variability intervals, ordered
    by stall std descending (ties toward the earlier interval)."""
    if not top:
        raise EmptyInputError("no top intervals selected")
    by_index = {r.index: r for r in rows}
    try:
        selected = [by_index[k.index] for k in top]
    except KeyError as exc:
        raise EmptyInputError(f"top interval {exc} missing from statistics") from None
    selected.sort(key=lambda r: (-r.stall_std_ns, r.index))
    t0 = _origin(sorted(rows, key=lambda r: r.index))
    out_rows = [
        [
            (r.start - t0) / 1e9,
            r.stall_total_ns,
            r.kernel_count,
            r.htod_count,
            r.dtoh_count,
            r.dtod_count,
            r.htod_bytes,
            r.dtoh_bytes,
            r.dtod_bytes,
            r.stall_std_ns,
        ]
        for r in selected
    ]
    _write_csv(out, PARCOORDS_HEADER, out_rows)
    return Path(out)


class Phase(enum.Enum):
    GENERATION = "generation"
    AGGREGATION = "aggregation"


_PHASE_KEYS = {Phase.GENERATION: "generation_ns", Phase.AGGREGATION: "aggregation_ns"}


@dataclass(frozen=True)
class OverheadRecord:
    """Wall time of one phase at one world size, per rank."""

    phase: Phase
    world_size: int
    wall_time_ns: tuple[int, ...]

    @property
    def max_wall_time_ns(self) -> int:
        return max(self.wall_time_ns)


def overhead_records(manifests: Sequence[Manifest]) -> list[OverheadRecord]:
    """Extract per-phase overhead records; the first manifest wins when two
    runs share a world size."""
    records: list[OverheadRecord] = []
    seen: set[tuple[Phase, int]] = set()
    for manifest in manifests:
        world = manifest.config.num_workers
        for phase, key in _PHASE_KEYS.items():
            if (phase, world) in seen:
                continue
            if any(key not in manifest.timings.get(r, {}) for r in range(world)):
                continue
            records.append(
                OverheadRecord(
                    phase=phase,
                    world_size=world,
                    wall_time_ns=tuple(
                        manifest.timings[r][key] for r in range(world)
                    ),
                )
            )
            seen.add((phase, world))
    records.sort(key=lambda r: (r.phase.value, r.world_size))
    return records


def emit_overhead_report(manifests: Sequence[Manifest], out: str | Path) -> Path:
    """One row per (phase, world size) with the slowest rank first and the
    per-rank wall seconds after it."""
    records = overhead_records(manifests)
    if not records:
        raise EmptyInputError("no manifests with phase timings")
    widest = max(r.world_size for r in records)
    header = ["phase", "world_size", "max_wall_s"] + [
        f"rank{i}_wall_s" for i in range(widest)
    ]
    rows: list[list] = []
    for r in records:
        padded: list = [w / 1e9 for w in r.wall_time_ns]
        padded += [""] * (widest - r.world_size)
        rows.append([r.phase.value, r.world_size, r.max_wall_time_ns / 1e9, *padded])
    _write_csv(out, header, rows)
    return Path(out)


class ChartKind(enum.Enum):
    TIMESERIES = "timeseries"
    PARCOORDS = "parcoords"
    OVERHEAD_BARS = "overhead_bars"


_WIDTH, _HEIGHT = 960, 540
_MARGIN = 70
_PALETTE = ("#1f6fb2", "#d1495b", "#3a9d5d", "#8d5fd3", "#c98a1c", "#4ea6a6")


def _read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise TraceIoError(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    table = [row for row in reader if row]
    if not table:
        raise MalformedCsvError(f"{path} has no header row")
    header, rows = table[0], table[1:]
    for row in rows:
        if len(row) != len(header):
            raise MalformedCsvError(
                f"{path}: row with {len(row)} cells under a {len(header)}-column header"
            )
    return header, rows


def _floats(row: list[str], indices: Sequence[int], path) -> list[float]:
    try:
        return [float(row[i]) for i in indices]
    except ValueError as exc:
        raise MalformedCsvError(f"{path}: non-numeric cell ({exc})") from None


def _scaler(lo: float, hi: float, px_lo: float, px_hi: float):
    if hi <= lo:  # degenerate range: park everything mid-band
        mid = (px_lo + px_hi) / 2
        return lambda _v: mid
    scale = (px_hi - px_lo) / (hi - lo)
    return lambda v: px_lo + (v - lo) * scale


def _svg_document(body: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" '
        f'height="{_HEIGHT}" viewBox="0 0 {_WIDTH} {_HEIGHT}">\n'
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>\n'
    )
    return head + "\n".join(body) + "\n</svg>\n"


def _axes(x_label: str, y_label: str) -> list[str]:
    x0, y0 = _MARGIN, _HEIGHT - _MARGIN
    x1, y1 = _WIDTH - _MARGIN, _MARGIN
    return [
        f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
        f'<text x="{(x0 + x1) / 2:.2f}" y="{_HEIGHT - 20}" text-anchor="middle" '
        f'font-size="14">{escape(x_label)}</text>',
        f'<text x="20" y="{(y0 + y1) / 2:.2f}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 20 {(y0 + y1) / 2:.2f})">{escape(y_label)}</text>',
    ]


def _no_data(body: list[str]) -> list[str]:
    body.append(
        f'<text x="{_WIDTH / 2:.2f}" y="{_HEIGHT / 2:.2f}" text-anchor="middle" '
        f'font-size="18" fill="#666">no data</text>'
    )
    return body


def _render_timeseries(header: list[str], rows: list[list[str]], path) -> str:
    if header != TIMESERIES_HEADER:
        raise MalformedCsvError(f"{path}: header {header} is not a stall time series")
    body = _axes("elapsed_s", "stall_total_ns")
    if not rows:
        return _svg_document(_no_data(body))
    groups: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        x, y = _floats(row, (1, 2), path)
        groups.setdefault(row[0], []).append((x, y))
    xs = [p[0] for pts in groups.values() for p in pts]
    ys = [p[1] for pts in groups.values() for p in pts]
    sx = _scaler(min(xs), max(xs), _MARGIN, _WIDTH - _MARGIN)
    sy = _scaler(min(ys), max(ys), _HEIGHT - _MARGIN, _MARGIN)
    for slot, (label, pts) in enumerate(groups.items()):
        color = _PALETTE[slot % len(_PALETTE)]
        points = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        body.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{points}"/>'
        )
        body.append(
            f'<text x="{_WIDTH - _MARGIN + 5}" y="{_MARGIN + 16 * slot}" '
            f'font-size="12" fill="{color}">{escape(label)}</text>'
        )
    return _svg_document(body)


def _render_parcoords(header: list[str], rows: list[list[str]], path) -> str:
    if header != PARCOORDS_HEADER:
        raise MalformedCsvError(f"{path}: header {header} is not parallel coordinates")
    body: list[str] = []
    axes = header[1:]  # the leading column identifies the interval
    step = (_WIDTH - 2 * _MARGIN) / (len(axes) - 1)
    for i, name in enumerate(axes):
        x = _MARGIN + i * step
        body.append(
            f'<line class="axis" x1="{x:.2f}" y1="{_MARGIN}" x2="{x:.2f}" '
            f'y2="{_HEIGHT - _MARGIN}" stroke="black"/>'
        )
        body.append(
            f'<text x="{x:.2f}" y="{_HEIGHT - _MARGIN + 20}" text-anchor="middle" '
            f'font-size="10">{escape(name)}</text>'
        )
    if not rows:
        return _svg_document(_no_data(body))
    data = [_floats(row, range(1, len(header)), path) for row in rows]
    scalers = []
    for axis in range(len(axes)):
        values = [d[axis] for d in data]
        scalers.append(_scaler(min(values), max(values), _HEIGHT - _MARGIN, _MARGIN))
    for slot, d in enumerate(data):
        color = _PALETTE[slot % len(_PALETTE)]
        points = " ".join(
            f"{_MARGIN + i * step:.2f},{scalers[i](v):.2f}" for i, v in enumerate(d)
        )
        body.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.2" '
            f'opacity="0.85" points="{points}"/>'
        )
    return _svg_document(body)


def _render_overhead(header: list[str], rows: list[list[str]], path) -> str:
    if header[:3] != ["phase", "world_size", "max_wall_s"]:
        raise MalformedCsvError(f"{path}: header {header} is not an overhead report")
    body = _axes("phase / world size", "max_wall_s")
    if not rows:
        return _svg_document(_no_data(body))
    heights = [_floats(row, (2,), path)[0] for row in rows]
    sy = _scaler(0.0, max(heights), _HEIGHT - _MARGIN, _MARGIN)
    span = _WIDTH - 2 * _MARGIN
    slot_width = span / len(rows)
    bar_width = slot_width * 0.6
    for i, (row, h) in enumerate(zip(rows, heights)):
        x = _MARGIN + i * slot_width + (slot_width - bar_width) / 2
        top = sy(h)
        color = _PALETTE[0] if row[0] == "generation" else _PALETTE[1]
        body.append(
            f'<rect x="{x:.2f}" y="{top:.2f}" width="{bar_width:.2f}" '
            f'height="{_HEIGHT - _MARGIN - top:.2f}" fill="{color}"/>'
        )
        body.append(
            f'<text x="{x + bar_width / 2:.2f}" y="{_HEIGHT - _MARGIN + 20}" '
            f'text-anchor="middle" font-size="10">'
            f"{escape(row[0])} P={escape(row[1])}</text>"
        )
    return _svg_document(body)


def render_svg(
    csv_path: str | Path, kind: ChartKind | str, out: str | Path
) -> Path:
    """Render one CSV artifact as a self-contained SVG.

    The chart kind must match the CSV's producer; a header from a different
    emitter is rejected rather than guessed at.
    """
    kind = ChartKind(kind) if isinstance(kind, str) else kind
    header, rows = _read_csv(csv_path)
    if kind is ChartKind.TIMESERIES:
        doc = _render_timeseries(header, rows, csv_path)
    elif kind is ChartKind.PARCOORDS:
        doc = _render_parcoords(header, rows, csv_path)
    else:
        doc = _render_overhead(header, rows, csv_path)
    try:
        Path(out).write_text(doc, encoding="utf-8")
    except OSError as exc:
        raise TraceIoError(f"cannot write {out}: {exc}") from exc
    return Path(out)
