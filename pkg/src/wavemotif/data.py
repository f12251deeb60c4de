"""Speed matrices: ingestion of per-segment speed records, gap filling, road splitting
and a synthetic benchmark generator.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .roadgraph import DirectedRoadGraph

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class SpeedMatrix:
    """``values[i, t]``: mean speed (km/h) on segment ``i`` in interval ``t``."""

    values: np.ndarray
    interval_minutes: int = 15
    start_timestamp: datetime = datetime(2016, 11, 1)
    segment_ids: list = None
    missing_mask: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise DataError("speed matrix must be 2-D (segments x intervals)")
        n, t = self.values.shape
        if self.segment_ids is None:
            self.segment_ids = [str(i) for i in range(n)]
        if len(self.segment_ids) != n:
            raise DataError(f"{len(self.segment_ids)} segment ids for {n} rows")
        if self.missing_mask is None:
            self.missing_mask = ~np.isfinite(self.values)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if 1440 % self.interval_minutes:
            raise DataError(f"interval_minutes={self.interval_minutes} does not divide a day")
        observed = self.values[~self.missing_mask]
        if not np.isfinite(observed).all() or (observed < 0).any():
            raise DataError("observed speeds must be finite and non-negative")

    @property
    def shape(self):
        return self.values.shape

    @property
    def intervals_per_day(self) -> int:
        return 1440 // self.interval_minutes

    @property
    def days(self) -> int:
        return self.values.shape[1] // self.intervals_per_day

    def with_values(self, values) -> "SpeedMatrix":
        return SpeedMatrix(values, self.interval_minutes, self.start_timestamp,
                           list(self.segment_ids), self.missing_mask.copy())

    def to_csv(self, path) -> None:
        """Header of segment ids, one row per interval, empty field for missing.

        Metadata goes to ``<path>.meta.json``.
        """
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.segment_ids)
            for t in range(self.values.shape[1]):
                w.writerow(["" if self.missing_mask[i, t] else repr(float(self.values[i, t]))
                            for i in range(self.values.shape[0])])
        meta = {"start_timestamp": self.start_timestamp.isoformat(),
                "interval_minutes": self.interval_minutes}
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def read_csv(cls, path) -> "SpeedMatrix":
        path = Path(path)
        meta_path = Path(str(path) + ".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise DataError(f"{path}: empty matrix file")
        ids, body = rows[0], rows[1:]
        vals = np.full((len(ids), len(body)), np.nan)
        for t, row in enumerate(body, start=2):
            if len(row) != len(ids):
                raise DataError(f"{path}:{t}: expected {len(ids)} fields, got {len(row)}")
            for i, cell in enumerate(row):
                if cell.strip():
                    try:
                        vals[i, t - 2] = float(cell)
                    except ValueError:
                        raise DataError(f"{path}:{t}: bad speed {cell!r}") from None
        start = datetime.fromisoformat(meta.get("start_timestamp", "2016-11-01T00:00:00"))
        return cls(vals, int(meta.get("interval_minutes", 15)), start, ids, np.isnan(vals))


# ---------------------------------------------------------------------------
# Ingestion


@dataclass(frozen=True)
class GpsSpeedRecord:
    timestamp: datetime
    segment_id: str
    speed: float


@dataclass
class Aggregation:
    matrix: SpeedMatrix
    record_count: int
    unknown_segments: Counter = field(default_factory=Counter)

    @property
    def unknown_count(self) -> int:
        return sum(self.unknown_segments.values())


def read_records(path) -> list[GpsSpeedRecord]:
    """Parse ``timestamp_iso8601,segment_id,speed_kmh`` rows; an optional header is skipped."""
    records = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if lineno == 1 and row[0].strip().lower().startswith("timestamp"):
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                ts = datetime.fromisoformat(row[0].strip())
                speed = float(row[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not np.isfinite(speed) or speed < 0:
                raise DataError(f"{path}:{lineno}: speed must be finite and >= 0, got {speed}")
            records.append(GpsSpeedRecord(ts, row[1].strip(), speed))
    if not records:
        raise DataError(f"{path}: no records")
    return records


def aggregate(records, interval_minutes: int = 15, segment_ids=None,
              start: datetime | None = None, days: int | None = None) -> Aggregation:
    """Average speed records into ``interval_minutes`` cells.

    The time axis starts at midnight of the earliest record (or ``start``) and
    covers whole days. Cells without records are masked, not zero-filled.
    Records for segments outside ``segment_ids`` are counted in
    ``unknown_segments``.
    """
    if 1440 % interval_minutes:
        raise DataError(f"interval_minutes={interval_minutes} does not divide 1440")
    records = list(records)
    if not records:
        raise DataError("no records")
    if segment_ids is None:
        segment_ids = sorted({r.segment_id for r in records})
    segment_ids = [str(s) for s in segment_ids]
    index = {s: i for i, s in enumerate(segment_ids)}
    if start is None:
        first = min(r.timestamp for r in records)
        start = datetime(first.year, first.month, first.day)
    per_day = 1440 // interval_minutes
    if days is None:
        last = max(r.timestamp for r in records)
        days = (last - start) // timedelta(days=1) + 1
    n_t = days * per_day
    sums = np.zeros((len(segment_ids), n_t))
    counts = np.zeros((len(segment_ids), n_t), dtype=np.int64)
    unknown = Counter()
    width = timedelta(minutes=interval_minutes)
    for r in records:
        i = index.get(str(r.segment_id))
        if i is None:
            unknown[str(r.segment_id)] += 1
            continue
        t = (r.timestamp - start) // width
        if not 0 <= t < n_t:
            raise DataError(f"record at {r.timestamp.isoformat()} outside the dataset range")
        sums[i, t] += r.speed
        counts[i, t] += 1
    if unknown:
        log.warning("%d records reference %d unknown segments", sum(unknown.values()), len(unknown))
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    matrix = SpeedMatrix(vals, interval_minutes, start, segment_ids, counts == 0)
    return Aggregation(matrix, len(records) - sum(unknown.values()), unknown)


def impute(speeds: SpeedMatrix) -> SpeedMatrix:
    """Fill masked cells by linear interpolation in time; edges take the nearest observation.

    The original ``missing_mask`` is kept so evaluation can skip filled cells.
    """
    vals = speeds.values.copy()
    mask = speeds.missing_mask
    t = np.arange(vals.shape[1])
    for i in range(vals.shape[0]):
        obs = ~mask[i]
        if not obs.any():
            raise DataError(f"segment {speeds.segment_ids[i]!r} has no observations")
        if obs.all():
            continue
        vals[i, ~obs] = np.interp(t[~obs], t[obs], vals[i, obs])
    return SpeedMatrix(vals, speeds.interval_minutes, speeds.start_timestamp,
                       list(speeds.segment_ids), mask.copy())


# ---------------------------------------------------------------------------
# Road network


@dataclass(frozen=True)
class Segment:
    index: int
    road_id: str
    direction: str  # "forward" (tail -> head) or "backward"
    tail: object
    head: object


def _parse_flag(value) -> bool:
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)) and value in (0, 1):
        return bool(value)
    if isinstance(value, str) and value.strip().lower() in ("0", "1", "true", "false", "yes", "no"):
        return value.strip().lower() in ("1", "true", "yes")
    raise DataError(f"malformed direction flag {value!r}")


def split_bidirectional(roads) -> tuple[DirectedRoadGraph, list[Segment]]:
    """Turn roads ``(road_id, tail_junction, head_junction, two_way)`` into directed segments.

    Each two-way road becomes two segments. Segment ``u`` feeds segment ``v``
    when ``u`` ends at the junction where ``v`` starts, except for the U-turn
    onto the opposite direction of the same road.
    """
    segments: list[Segment] = []
    for road in roads:
        if len(road) != 4:
            raise DataError(f"road entry {road!r} must be (road_id, tail, head, two_way)")
        rid, tail, head, flag = road
        if tail == head:
            raise DataError(f"road {rid!r} starts and ends at the same junction")
        two_way = _parse_flag(flag)
        segments.append(Segment(len(segments), str(rid), "forward", tail, head))
        if two_way:
            segments.append(Segment(len(segments), str(rid), "backward", head, tail))
    by_tail: dict[object, list[Segment]] = {}
    for s in segments:
        by_tail.setdefault(s.tail, []).append(s)
    edges = set()
    for u in segments:
        for v in by_tail.get(u.head, []):
            if v.road_id == u.road_id:
                continue
            edges.add((u.index, v.index))
    return DirectedRoadGraph(len(segments), frozenset(edges)), segments


def read_roads(path) -> list[tuple]:
    """``road_id,tail,head,two_way`` rows with an optional header."""
    roads = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if lineno == 1 and row[0].strip().lower() == "road_id":
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields")
            try:
                roads.append((row[0].strip(), row[1].strip(), row[2].strip(), _parse_flag(row[3])))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return roads


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass
class CongestionEvent:
    segments: tuple[int, ...]
    start: int
    duration: int
    depth: float


@dataclass
class SyntheticSpec:
    segment_count: int
    days: int
    intervals_per_day: int
    daily_profile: np.ndarray  # (intervals_per_day,) or (segment_count, intervals_per_day)
    spatial_coupling: float = 0.0
    noise_phi: float | np.ndarray = 0.0
    noise_sigma: float | np.ndarray = 0.0
    congestion_events: list[CongestionEvent] = field(default_factory=list)
    seed: int = 0

    def validate(self) -> None:
        if self.segment_count < 1 or self.days < 1 or self.intervals_per_day < 1:
            raise DataError("segment_count, days and intervals_per_day must be positive")
        prof = np.atleast_2d(np.asarray(self.daily_profile, dtype=float))
        if prof.shape[-1] != self.intervals_per_day or prof.shape[0] not in (1, self.segment_count):
            raise DataError(f"daily_profile has shape {prof.shape}")
        phi = np.broadcast_to(np.asarray(self.noise_phi, dtype=float), (self.segment_count,))
        if (np.abs(phi) >= 1).any():
            raise DataError("noise_phi must satisfy |phi| < 1")
        if (np.asarray(self.noise_sigma) < 0).any():
            raise DataError("noise_sigma must be >= 0")
        if not abs(self.spatial_coupling) < 1:
            raise DataError("spatial_coupling must satisfy |coupling| < 1")
        depth = max((e.depth for e in self.congestion_events), default=0.0)
        if prof.min() <= depth:
            raise DataError(f"congestion depth {depth} is not below the minimum base speed {prof.min():.3g}")
        total = self.days * self.intervals_per_day
        for e in self.congestion_events:
            if e.duration < 1 or not 0 <= e.start < total:
                raise DataError(f"congestion event {e} outside the series")
            if any(not 0 <= s < self.segment_count for s in e.segments):
                raise DataError(f"congestion event {e} references unknown segments")


@dataclass
class SyntheticResult:
    matrix: SpeedMatrix
    clipping_rate: float


def generate_synthetic(spec: SyntheticSpec, graph: DirectedRoadGraph,
                       start: datetime = datetime(2016, 11, 1)) -> SyntheticResult:
    """Daily profile + upstream coupling + AR(1) noise + congestion dips, clipped at 0.

    ``speed[i, t] = profile[i, t % I] + coupling * mean_{j -> i}(speed[j, t-1] - profile[j, t-1])
    + noise[i, t] + events[i, t]``.
    """
    spec.validate()
    n = spec.segment_count
    if graph.node_count != n:
        raise DataError(f"graph has {graph.node_count} nodes, spec has {n} segments")
    per_day = spec.intervals_per_day
    total = spec.days * per_day
    if 1440 % per_day:
        raise DataError("intervals_per_day must divide 1440 minutes")
    prof = np.broadcast_to(np.atleast_2d(np.asarray(spec.daily_profile, dtype=float)), (n, per_day))
    phi = np.broadcast_to(np.asarray(spec.noise_phi, dtype=float), (n,))
    sigma = np.broadcast_to(np.asarray(spec.noise_sigma, dtype=float), (n,))
    rng = np.random.default_rng(spec.seed)
    shocks = rng.standard_normal((total, n)) * sigma
    events = np.zeros((n, total))
    for e in spec.congestion_events:
        events[list(e.segments), e.start:e.start + e.duration] -= e.depth
    inflow = graph.adjacency.T.astype(float)  # inflow[i, j] = 1 if j -> i
    indeg = inflow.sum(axis=1)
    inflow_mean = np.divide(inflow, indeg[:, None], out=np.zeros_like(inflow), where=indeg[:, None] > 0)

    speeds = np.zeros((n, total))
    noise = np.zeros(n)
    dev_prev = np.zeros(n)
    for t in range(total):
        noise = phi * noise + shocks[t]
        base = prof[:, t % per_day]
        v = base + spec.spatial_coupling * (inflow_mean @ dev_prev) + noise + events[:, t]
        speeds[:, t] = v
        dev_prev = v - base
    clipped = speeds < 0
    rate = float(clipped.mean())
    if rate > 0.01:
        raise DataError(f"{100 * rate:.2f}% of cells would be clipped at 0; reduce noise or event depth")
    speeds[clipped] = 0.0
    minutes = 1440 // per_day
    return SyntheticResult(SpeedMatrix(speeds, minutes, start), rate)


def rush_hour_profile(intervals_per_day: int, free_flow: float, dips) -> np.ndarray:
    """``free_flow`` minus Gaussian dips given as ``(centre_hour, depth, width_hours)``."""
    hours = (np.arange(intervals_per_day) + 0.5) * 24.0 / intervals_per_day
    prof = np.full(intervals_per_day, float(free_flow))
    for centre, depth, width in dips:
        prof -= depth * np.exp(-0.5 * ((hours - centre) / width) ** 2)
    return prof
