"""Expansion of a synthetic benchmark description into a graph and generator spec."""

from __future__ import annotations

import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .data import CongestionEvent, DataError, SyntheticSpec, rush_hour_profile, split_bidirectional
from .roadgraph import DirectedRoadGraph, grid_road_network

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

_KEYS = {"version", "seed", "days", "intervals_per_day", "spatial_coupling", "noise_phi",
         "noise_sigma", "graph", "profile", "events"}


def default_benchmark_path() -> Path:
    return Path(str(resources.files("wavemotif") / "configs" / "benchmark_synthetic.toml"))


def load_benchmark(path=None, days: int | None = None):
    """Return ``(graph, roads, segments, spec)`` for a benchmark TOML file.

    Per-segment profiles and congestion events are drawn from a generator
    seeded with the file's ``seed``, so the expansion is deterministic.
    """
    path = Path(path) if path else default_benchmark_path()
    try:
        doc = tomllib.loads(path.read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from None
    unknown = set(doc) - _KEYS
    if unknown:
        raise DataError(f"{path}: unknown keys {sorted(unknown)}")
    if doc.get("version") != 1:
        raise DataError(f"{path}: unsupported version {doc.get('version')!r}")
    try:
        g = doc["graph"]
        roads = grid_road_network(int(g["grid_rows"]), int(g["grid_cols"]), set(g.get("one_way_roads", [])))
        graph, segments = split_bidirectional(roads)
        n = graph.node_count
        seed = int(doc["seed"])
        per_day = int(doc["intervals_per_day"])
        n_days = int(days if days is not None else doc["days"])
        rng = np.random.default_rng(seed)
        prof_doc = doc["profile"]
        profiles = []
        for _ in range(n):
            dips = []
            for name in ("morning", "evening"):
                d = prof_doc[name]
                dips.append((float(d["hour"]), rng.uniform(*d["depth"]), rng.uniform(*d["width"])))
            profiles.append(rush_hour_profile(per_day, rng.uniform(*prof_doc["free_flow"]), dips))
        ev = doc.get("events", {})
        events = []
        n_events = rng.poisson(float(ev.get("per_day", 0.0)) * n_days) if ev else 0
        for _ in range(n_events):
            seg = int(rng.integers(n))
            nxt = graph.successors(seg)
            segs = (seg,) if not nxt else (seg, int(rng.choice(nxt)))
            events.append(CongestionEvent(segs, int(rng.integers(n_days * per_day)),
                                          int(rng.integers(ev["duration"][0], ev["duration"][1] + 1)),
                                          float(rng.uniform(*ev["depth"]))))
        spec = SyntheticSpec(
            segment_count=n, days=n_days, intervals_per_day=per_day,
            daily_profile=np.array(profiles), spatial_coupling=float(doc["spatial_coupling"]),
            noise_phi=float(doc["noise_phi"]), noise_sigma=float(doc["noise_sigma"]),
            congestion_events=events, seed=seed + 1,
        )
    except KeyError as exc:
        raise DataError(f"{path}: missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None
    spec.validate()
    return graph, roads, segments, spec
