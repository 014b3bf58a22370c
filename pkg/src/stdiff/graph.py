"""Static sensor graph and Gaussian-kernel adjacency construction.

The adjacency weight between two sensors at geographic distance d is
exp(-d^2 / sigma^2), with sigma the population standard deviation of all
provided distances.  Sparsification is either an explicit distance
threshold (keep edges with d <= epsilon) or a quantile cut on the computed
weights (zero everything below the q-quantile; q = 0 keeps all edges).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, IdentifierError
from .sparse import SparseMatrix


@dataclass(frozen=True)
class DistanceRecord:
    from_id: str
    to_id: str
    distance: float

    def __post_init__(self):
        if not (math.isfinite(self.distance) and self.distance >= 0):
            raise DomainError(f"invalid distance {self.distance!r}")


@dataclass(frozen=True)
class SensorGraph:
    n: int
    vertex_ids: tuple
    adjacency: SparseMatrix

    def __post_init__(self):
        if len(self.vertex_ids) != self.n:
            raise IdentifierError("vertex_ids length must equal n")
        if len(set(self.vertex_ids)) != self.n:
            raise IdentifierError("duplicate sensor id")
        if self.adjacency.rows != self.n or self.adjacency.cols != self.n:
            raise IdentifierError("adjacency shape must be n x n")


def build_gaussian_adjacency(
    records: list[DistanceRecord],
    ids: list[str],
    *,
    epsilon: float | None = None,
    weight_quantile: float = 0.1,
) -> SensorGraph:
    """Build the proximity graph from pairwise sensor distances.

    Records are directed: each (from, to, d) produces one entry.  Passing a
    symmetric record set yields a symmetric adjacency.
    """
    if not records:
        raise IdentifierError("at least one distance record required")
    index = {s: i for i, s in enumerate(ids)}
    if len(index) != len(ids):
        raise IdentifierError("duplicate sensor id")
    rows = np.empty(len(records), dtype=np.int64)
    cols = np.empty(len(records), dtype=np.int64)
    for k, rec in enumerate(records):
        try:
            rows[k] = index[rec.from_id]
            cols[k] = index[rec.to_id]
        except KeyError as exc:
            raise IdentifierError(f"unknown sensor id {exc.args[0]!r}") from None
    dists = np.array([rec.distance for rec in records])
    sigma = float(dists.std())  # population std
    if sigma == 0.0:
        raise DomainError("all distances identical: Gaussian kernel sigma is zero")
    weights = np.exp(-(dists ** 2) / sigma ** 2)
    if epsilon is not None:
        keep = dists <= epsilon
    elif weight_quantile > 0.0:
        keep = weights >= np.quantile(weights, weight_quantile)
    else:
        keep = np.ones(len(records), dtype=bool)
    adj = SparseMatrix.from_coo(len(ids), len(ids), rows[keep], cols[keep], weights[keep])
    return SensorGraph(len(ids), tuple(ids), adj)


# -- CSV round trips ---------------------------------------------------


def load_distance_csv(path) -> list[DistanceRecord]:
    """Read `from,to,distance` records."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["from", "to", "distance"]:
            raise FormatError(f"{path}: expected header 'from,to,distance'")
        for line in reader:
            if not line:
                continue
            if len(line) != 3:
                raise FormatError(f"{path}: bad record {line!r}")
            try:
                records.append(DistanceRecord(line[0], line[1], float(line[2])))
            except ValueError:
                raise FormatError(f"{path}: non-numeric distance {line[2]!r}") from None
    return records


def save_adjacency(graph: SensorGraph, prefix) -> None:
    """Write edge-list CSV `<prefix>.csv` and JSON sidecar `<prefix>.json`."""
    prefix = Path(prefix)
    adj = graph.adjacency
    rows = np.repeat(np.arange(adj.rows), np.diff(adj.row_offsets))
    with open(prefix.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "weight"])
        for r, c, v in zip(rows, adj.col_indices, adj.values):
            writer.writerow([int(r), int(c), repr(float(v))])
    sidecar = {"n": graph.n, "ids": list(graph.vertex_ids)}
    prefix.with_suffix(".json").write_text(json.dumps(sidecar) + "\n", encoding="utf-8")


def load_adjacency(prefix) -> SensorGraph:
    prefix = Path(prefix)
    try:
        sidecar = json.loads(prefix.with_suffix(".json").read_text(encoding="utf-8"))
        n, ids = int(sidecar["n"]), [str(s) for s in sidecar["ids"]]
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"bad adjacency sidecar {prefix}.json: {exc}") from None
    rows, cols, vals = [], [], []
    with open(prefix.with_suffix(".csv"), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["row", "col", "weight"]:
            raise FormatError(f"{prefix}.csv: expected header 'row,col,weight'")
        for line in reader:
            if not line:
                continue
            rows.append(int(line[0]))
            cols.append(int(line[1]))
            vals.append(float(line[2]))
    return SensorGraph(n, tuple(ids), SparseMatrix.from_coo(n, n, rows, cols, vals))
