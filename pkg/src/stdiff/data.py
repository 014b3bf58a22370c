"""Dataset ingestion, sliding-window samples, and a synthetic generator.

The canonical speed format is CSV: a `timestamp` column of epoch seconds at
a fixed interval (300 s for the public datasets) followed by one column per
sensor, in the vertex order of the adjacency sidecar.  A stored value of 0
means missing and is propagated to metric masks.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, FormatError, IdentifierError
from .graph import DistanceRecord, SensorGraph, build_gaussian_adjacency
from .sparse import add_self_loops, transition_matrix

DEFAULT_INTERVAL = 300  # 5-minute snapshots


@dataclass(frozen=True)
class SpeedSeries:
    timestamps: np.ndarray  # epoch seconds, fixed interval
    values: np.ndarray      # (time, vertices)
    ids: tuple

    def __post_init__(self):
        ts, vals = self.timestamps, self.values
        if ts.ndim != 1 or vals.ndim != 2 or ts.shape[0] != vals.shape[0]:
            raise FormatError("timestamps and values disagree on length")
        if vals.shape[1] != len(self.ids):
            raise FormatError("column count does not match sensor ids")
        if ts.shape[0] >= 2:
            steps = np.diff(ts)
            if steps.min() != steps.max() or steps[0] <= 0:
                raise FormatError("timestamps must increase at a fixed interval")
        if not np.all(np.isfinite(vals)):
            raise FormatError("non-finite speed value")

    @property
    def interval(self) -> int:
        if self.timestamps.shape[0] < 2:
            return DEFAULT_INTERVAL
        return int(self.timestamps[1] - self.timestamps[0])

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class WindowSample:
    history: np.ndarray            # (T, n, 1)
    target: np.ndarray             # (H, n, 1)
    start_index: int
    target_timestamps: np.ndarray | None = None


def load_speed_csv(path, *, graph: SensorGraph | None = None) -> SpeedSeries:
    """Read a speed CSV; with a graph given, column ids must match its order."""
    ts, rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "timestamp" or len(header) < 2:
            raise FormatError(f"{path}: expected header 'timestamp,<id>,...'")
        ids = tuple(header[1:])
        for line in reader:
            if not line:
                continue
            if len(line) != len(header):
                raise FormatError(f"{path}: ragged row {line!r}")
            try:
                ts.append(int(line[0]))
                rows.append([float(v) for v in line[1:]])
            except ValueError:
                raise FormatError(f"{path}: non-numeric entry in {line!r}") from None
    if graph is not None and ids != tuple(graph.vertex_ids):
        raise IdentifierError(f"{path}: sensor columns do not match the adjacency ids")
    return SpeedSeries(np.asarray(ts, dtype=np.int64), np.asarray(rows), ids)


def save_speed_csv(series: SpeedSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp"] + list(series.ids))
        for t, row in zip(series.timestamps, series.values):
            writer.writerow([int(t)] + [repr(float(v)) for v in row])


def make_windows(series: SpeedSeries, t_hist: int = 12, horizon: int = 12,
                 stride: int = 1) -> list[WindowSample]:
    """Chronological sliding windows; count = floor((len-T-H)/stride) + 1."""
    if t_hist < 1 or horizon < 1 or stride < 1:
        raise ArgumentError("T, H and stride must be >= 1")
    total = len(series)
    if total < t_hist + horizon:
        raise ArgumentError(
            f"series length {total} shorter than one window ({t_hist}+{horizon})")
    out = []
    for start in range(0, total - t_hist - horizon + 1, stride):
        hist = series.values[start:start + t_hist]
        targ = series.values[start + t_hist:start + t_hist + horizon]
        out.append(WindowSample(
            history=hist[..., None],
            target=targ[..., None],
            start_index=start,
            target_timestamps=series.timestamps[start + t_hist:start + t_hist + horizon],
        ))
    return out


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 10
    steps: int = 2000
    seed: int = 0
    alpha: float = 0.6
    period: int = 24
    noise_std: float = 0.5
    dynamics: str = "seasonal+diffusion"

    @staticmethod
    def from_json(text: str) -> "SyntheticSpec":
        data = json.loads(text)
        unknown = set(data) - set(SyntheticSpec.__dataclass_fields__)
        if unknown:
            raise ArgumentError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return SyntheticSpec(**data)


def generate_synthetic(spec: SyntheticSpec) -> tuple[SensorGraph, SpeedSeries]:
    """Random geometric graph plus a diffusion-driven speed signal.

    The signal follows x_{t+1} = alpha * P x_t + (1 - alpha) * seasonal(t)
    + noise, with P the self-looped random-walk transition matrix, so a
    diffusion-aware forecaster has an edge over static averages.  Fully
    deterministic for a fixed seed.
    """
    if spec.n < 2:
        raise ArgumentError("need at least 2 vertices")
    if spec.steps < 2:
        raise ArgumentError("need at least 2 steps")
    if spec.dynamics not in ("diffusion", "seasonal+diffusion"):
        raise ArgumentError(f"unknown dynamics {spec.dynamics!r}")
    rng = np.random.default_rng(spec.seed)
    pts = rng.uniform(0.0, 10.0, size=(spec.n, 2))
    ids = [f"s{i:03d}" for i in range(spec.n)]
    records = []
    for i in range(spec.n):
        for j in range(spec.n):
            if i != j:
                d = float(np.hypot(*(pts[i] - pts[j])))
                records.append(DistanceRecord(ids[i], ids[j], d))
    graph = build_gaussian_adjacency(records, ids, weight_quantile=0.3)
    p = transition_matrix(add_self_loops(graph.adjacency))

    base = 50.0
    amp = 15.0
    phase = rng.uniform(0.0, 2.0 * math.pi, size=spec.n)
    vertex_level = base + rng.uniform(-5.0, 5.0, size=spec.n)

    def seasonal(t: int) -> np.ndarray:
        if spec.dynamics == "diffusion":
            return vertex_level
        return vertex_level + amp * np.sin(2.0 * math.pi * t / spec.period + phase)

    x = seasonal(0) + rng.normal(0.0, spec.noise_std, size=spec.n)
    values = np.empty((spec.steps, spec.n))
    values[0] = x
    for t in range(1, spec.steps):
        x = (spec.alpha * p.matmul_dense(x[:, None])[:, 0]
             + (1.0 - spec.alpha) * seasonal(t)
             + rng.normal(0.0, spec.noise_std, size=spec.n))
        values[t] = x
    # keep speeds strictly positive: 0 is the missing-data marker
    values = np.maximum(values, 1.0)
    ts = np.arange(spec.steps, dtype=np.int64) * DEFAULT_INTERVAL
    return graph, SpeedSeries(ts, values, tuple(ids))
