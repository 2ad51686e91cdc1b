"""On-disk formats: traffic / feature / segment CSVs, run manifests and SVG charts.

Floats are written with ``repr`` so every CSV round-trips bit-exactly, and
nothing time-dependent enters any output except the run manifest's
``wall_clock_seconds``.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import STEP_SECONDS, AlignmentError, TrafficTensor

TRAFFIC_HEADER = ("segment_id", "bin_start_iso8601", "tps", "volume", "speed")
FEATURE_HEADER = ("segment_id", "bin_start_iso8601", "term_freq", "accident_count", "culture_count", "tweet_count")
SEGMENT_HEADER = ("segment_id", "lat", "lon")


def iso(ts: int) -> str:
    return dt.datetime.fromtimestamp(int(ts), dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_iso(text: str) -> int:
    return int(dt.datetime.fromisoformat(text.replace("Z", "+00:00")).timestamp())


def fmt(x) -> str:
    x = float(x)
    return repr(0.0 if x == 0 else x)


def sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- grids ----------------------------------------------------------------------


@dataclass
class Grid:
    """Values on a (segment, bin) grid read from a CSV."""

    segment_ids: list[str]
    start_ts: int
    values: np.ndarray  # (segments, bins, columns)
    columns: tuple[str, ...]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


def write_grid(path: str | Path, header: Sequence[str], segment_ids: Sequence, start_ts: int,
               values: np.ndarray) -> None:
    """Segment-major rows; ``values`` has shape (segments, bins, len(header) - 2)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        stamps = [iso(start_ts + b * STEP_SECONDS) for b in range(values.shape[1])]
        for s, sid in enumerate(segment_ids):
            for b, stamp in enumerate(stamps):
                w.writerow([sid, stamp, *(fmt(v) for v in values[s, b])])


def read_grid(path: str | Path, required: Sequence[str]) -> Grid:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["segment_id", "bin_start_iso8601"]:
            raise AlignmentError(f"{path}: expected a segment_id,bin_start_iso8601,... header")
        missing = [c for c in required if c not in header]
        if missing:
            raise AlignmentError(f"{path}: missing columns {missing}")
        cols = [header.index(c) for c in required]
        rows: dict[str, dict[int, list[float]]] = {}
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                ts = parse_iso(row[1])
                vals = [float(row[c]) for c in cols]
            except (ValueError, IndexError) as exc:
                raise AlignmentError(f"{path}:{lineno}: malformed row ({exc})") from exc
            rows.setdefault(row[0], {})[ts] = vals
    if not rows:
        raise AlignmentError(f"{path}: no data rows")
    seg_ids = list(rows)
    stamps = sorted(set().union(*(r.keys() for r in rows.values())))
    start = stamps[0]
    n = (stamps[-1] - start) // STEP_SECONDS + 1
    out = np.empty((len(seg_ids), n, len(cols)))
    for s, sid in enumerate(seg_ids):
        series = rows[sid]
        if len(series) != n:
            raise AlignmentError(f"{path}: segment {sid} has {len(series)} bins, expected {n}")
        for ts, vals in series.items():
            b, rem = divmod(ts - start, STEP_SECONDS)
            if rem:
                raise AlignmentError(f"{path}: timestamp {iso(ts)} is not on the 15-minute grid")
            out[s, b] = vals
    return Grid(seg_ids, start, out, tuple(required))


def write_traffic_csv(path, traffic: TrafficTensor, segment_ids: Sequence | None = None) -> None:
    ids = segment_ids if segment_ids is not None else traffic.segment_ids
    write_grid(path, TRAFFIC_HEADER, ids, traffic.start_ts, traffic.values.transpose(1, 0, 2))


def read_traffic_csv(path) -> tuple[TrafficTensor, list[str]]:
    g = read_grid(path, TRAFFIC_HEADER[2:])
    return TrafficTensor(g.start_ts, g.values.transpose(1, 0, 2).copy(), list(g.segment_ids)), g.segment_ids


def read_feature_csv(path) -> Grid:
    g = read_grid(path, FEATURE_HEADER[2:5])
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if "tweet_count" in header:
        counts = read_grid(path, ("tweet_count",))
        return Grid(g.segment_ids, g.start_ts, np.concatenate([g.values, counts.values], axis=-1),
                    FEATURE_HEADER[2:])
    return g


def check_aligned(a: Grid | TrafficTensor, a_ids: Sequence, b: Grid, what: str = "grids") -> None:
    a_start = a.start_ts
    a_bins = a.steps if isinstance(a, TrafficTensor) else a.n_bins
    if list(map(str, a_ids)) != list(map(str, b.segment_ids)):
        raise AlignmentError(f"{what}: segment ids differ")
    if a_start != b.start_ts or a_bins != b.n_bins:
        raise AlignmentError(f"{what}: time grids differ ({iso(a_start)}+{a_bins} vs {iso(b.start_ts)}+{b.n_bins})")


def write_segments_csv(path, segment_ids: Sequence, centers: Sequence[tuple[float, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SEGMENT_HEADER)
        for sid, (lat, lon) in zip(segment_ids, centers):
            w.writerow([sid, fmt(lat), fmt(lon)])


def read_segments_csv(path) -> tuple[list[str], list[tuple[float, float]]]:
    ids, centers = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), 2):
            try:
                ids.append(row["segment_id"])
                centers.append((float(row["lat"]), float(row["lon"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed segment row ({exc})") from exc
    if not ids:
        raise ValueError(f"{path}: no segments")
    return ids, centers


# -- run manifest ---------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__
    wall_clock_seconds: float = 0.0

    def record_inputs(self, paths: dict[str, str | Path]) -> None:
        for k, p in paths.items():
            self.inputs[k] = str(p)

    def to_dict(self, out_dir: Path) -> dict:
        outs = {}
        for name, p in sorted(self.outputs.items()):
            outs[name] = {"path": str(p), "sha256": sha256(Path(p))}
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": outs,
            "tool_version": self.tool_version,
            "wall_clock_seconds": self.wall_clock_seconds,
        }

    def write(self, path: str | Path) -> None:
        write_json(path, self.to_dict(Path(path).parent))


# -- SVG ------------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def svg_lines(path: str | Path, series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
              width: int = 720, height: int = 360, xlabel: str = "", ylabel: str = "") -> None:
    """Minimal multi-polyline chart with a frame, zero line, min/max labels and a legend."""
    pad = 50
    xs = np.concatenate([np.asarray(x, dtype=float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, dtype=float) for _, y in series.values()])
    ok = np.isfinite(ys)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = (float(ys[ok].min()), float(ys[ok].max())) if ok.any() else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
             f'fill="none" stroke="#444"/>',
             f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<text x="{width / 2:.1f}" y="{height - 10}" text-anchor="middle">{xlabel}</text>',
             f'<text x="12" y="{height / 2:.1f}" transform="rotate(-90 12 {height / 2:.1f})" '
             f'text-anchor="middle">{ylabel}</text>',
             f'<text x="{pad - 4}" y="{py(y1) + 4:.1f}" text-anchor="end">{y1:.3g}</text>',
             f'<text x="{pad - 4}" y="{py(y0) + 4:.1f}" text-anchor="end">{y0:.3g}</text>',
             f'<text x="{px(x0):.1f}" y="{height - pad + 14}" text-anchor="middle">{x0:.3g}</text>',
             f'<text x="{px(x1):.1f}" y="{height - pad + 14}" text-anchor="middle">{x1:.3g}</text>']
    if y0 < 0 < y1:
        parts.append(f'<line x1="{pad}" y1="{py(0):.2f}" x2="{width - pad}" y2="{py(0):.2f}" '
                     f'stroke="#999" stroke-dasharray="4 3"/>')
    for i, (name, (x, y)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y) if np.isfinite(b))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 4}" y="{pad + 14 + 14 * i}" text-anchor="end" '
                     f'fill="{color}">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
