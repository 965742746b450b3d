"""Sparse hypergraph built from binary patient x feature matrices.

Nodes are diagnostic features, hyperedges are patients.  Node and edge ids
are dense 0-based integers in input order; string labels are carried
alongside.  Incidence is stored twice in CSR form (edge -> nodes and
node -> edges) so both directions of message passing are O(1) lookups.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class EmptyHyperedgeError(ValueError):
    """A patient row has no positive feature."""

    def __init__(self, patient_ids: Sequence[str]):
        self.patient_ids = list(patient_ids)
        shown = ", ".join(self.patient_ids[:10])
        more = "" if len(self.patient_ids) <= 10 else f" (+{len(self.patient_ids) - 10} more)"
        super().__init__(f"patients with no positive diagnostic feature: {shown}{more}")


def _csr(n_rows: int, rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((cols, rows))
    ptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.add.at(ptr, rows + 1, 1)
    return np.cumsum(ptr), cols[order].astype(np.int64)


class Hypergraph:
    """Immutable bidirectional incidence structure.

    Parameters
    ----------
    node_count : int
        Number of nodes (features), including isolated ones.
    edge_rows, node_cols : array of int
        Coordinate list of incidences ``(edge, node)``.  Duplicates are
        collapsed.
    node_labels, edge_labels : sequence of str, optional
        Default to ``"v<i>"`` / ``"e<j>"``.
    edge_count : int, optional
        Inferred from ``edge_rows`` when omitted.
    """

    def __init__(self, node_count, edge_rows, node_cols, node_labels=None,
                 edge_labels=None, edge_count=None):
        edge_rows = np.asarray(edge_rows, dtype=np.int64).reshape(-1)
        node_cols = np.asarray(node_cols, dtype=np.int64).reshape(-1)
        if edge_rows.shape != node_cols.shape:
            raise ValueError("edge_rows and node_cols must have equal length")
        if edge_count is None:
            edge_count = int(edge_rows.max()) + 1 if edge_rows.size else 0
        if node_cols.size and (node_cols.min() < 0 or node_cols.max() >= node_count):
            raise ValueError("node id out of range")
        if edge_rows.size and (edge_rows.min() < 0 or edge_rows.max() >= edge_count):
            raise ValueError("edge id out of range")
        if edge_rows.size:
            key = np.unique(edge_rows * node_count + node_cols)
            edge_rows, node_cols = key // node_count, key % node_count
        self.node_count = int(node_count)
        self.edge_count = int(edge_count)
        self.dropped_patients: list[str] = []
        self._edge_ptr, self._edge_nodes = _csr(self.edge_count, edge_rows, node_cols)
        self._node_ptr, self._node_edges = _csr(self.node_count, node_cols, edge_rows)
        empty = np.flatnonzero(np.diff(self._edge_ptr) == 0)
        self.node_labels = list(node_labels) if node_labels is not None else [f"v{i}" for i in range(self.node_count)]
        self.edge_labels = list(edge_labels) if edge_labels is not None else [f"e{j}" for j in range(self.edge_count)]
        if len(self.node_labels) != self.node_count or len(self.edge_labels) != self.edge_count:
            raise ValueError("label lengths must match node_count / edge_count")
        if empty.size:
            raise EmptyHyperedgeError([self.edge_labels[j] for j in empty])

    # queries

    def nodes_of_edge(self, e: int) -> np.ndarray:
        return self._edge_nodes[self._edge_ptr[e]:self._edge_ptr[e + 1]]

    def edges_of_node(self, v: int) -> np.ndarray:
        return self._node_edges[self._node_ptr[v]:self._node_ptr[v + 1]]

    @property
    def edge_sizes(self) -> np.ndarray:
        return np.diff(self._edge_ptr)

    @property
    def node_degrees(self) -> np.ndarray:
        return np.diff(self._node_ptr)

    @property
    def nnz(self) -> int:
        return int(self._edge_nodes.size)

    def coo(self) -> tuple[np.ndarray, np.ndarray]:
        """``(edge_ids, node_ids)`` of every incidence, edge-major order."""
        return np.repeat(np.arange(self.edge_count), self.edge_sizes), self._edge_nodes.copy()

    @cached_property
    def incidence(self) -> sp.csr_matrix:
        """Node x edge 0/1 matrix ``A``."""
        e, v = self.coo()
        data = np.ones(e.size, dtype=np.float64)
        return sp.csr_matrix((data, (v, e)), shape=(self.node_count, self.edge_count))

    def to_binary_matrix(self) -> np.ndarray:
        """Patient x feature 0/1 matrix, the inverse of :func:`build_from_binary_matrix`."""
        out = np.zeros((self.edge_count, self.node_count), dtype=np.int8)
        e, v = self.coo()
        out[e, v] = 1
        return out

    def edge_index(self, label: str) -> int:
        try:
            return self._edge_lookup[label]
        except KeyError:
            raise KeyError(f"unknown patient id {label!r}") from None

    @cached_property
    def _edge_lookup(self) -> dict[str, int]:
        return {lab: j for j, lab in enumerate(self.edge_labels)}

    def subgraph_edges(self, edge_ids) -> "Hypergraph":
        """Keep only ``edge_ids`` (renumbered in the given order); all nodes retained."""
        edge_ids = np.asarray(edge_ids, dtype=np.int64)
        sizes = self.edge_sizes[edge_ids]
        rows = np.repeat(np.arange(edge_ids.size), sizes)
        cols = np.concatenate([self.nodes_of_edge(e) for e in edge_ids]) if edge_ids.size else np.zeros(0, np.int64)
        return Hypergraph(self.node_count, rows, cols, self.node_labels,
                          [self.edge_labels[e] for e in edge_ids], edge_count=edge_ids.size)

    @cached_property
    def plan(self) -> "AttentionPlan":
        return AttentionPlan.from_hypergraph(self)

    def exact_plan(self) -> "AttentionPlan":
        """Plan without padding (one bucket per distinct set size)."""
        return AttentionPlan.from_hypergraph(self, pad_ratio=1.0)

    def write_incidence(self, path) -> None:
        """Debug dump as ``edge_id,node_id`` lines."""
        e, v = self.coo()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["edge_id", "node_id"])
            w.writerows(zip(e.tolist(), v.tolist()))

    def __repr__(self):
        return f"Hypergraph(nodes={self.node_count}, edges={self.edge_count}, nnz={self.nnz})"


@dataclass(frozen=True)
class Bucket:
    """Sets padded to a common size.

    ``owners[i]`` is the set id; ``members[i, :k]`` its member ids where
    ``valid[i, :k]`` is True.  Padding slots hold id 0 and are masked out.
    """

    owners: np.ndarray
    members: np.ndarray
    valid: np.ndarray


@dataclass(frozen=True)
class AttentionPlan:
    """Sets grouped into padded size classes so attention runs as batched matmuls."""

    edge_buckets: list[Bucket]
    node_buckets: list[Bucket]
    isolated_nodes: np.ndarray
    edge_order: np.ndarray = field(repr=False)
    node_order: np.ndarray = field(repr=False)

    @classmethod
    def from_hypergraph(cls, hg: Hypergraph, pad_ratio: float = 1.25) -> "AttentionPlan":
        edge_buckets = _group(hg.edge_sizes, hg._edge_ptr, hg._edge_nodes, pad_ratio, extra=0)
        degrees = hg.node_degrees
        # node-side sets carry the node itself as one extra row
        node_buckets = _group(degrees, hg._node_ptr, hg._node_edges, pad_ratio, extra=1)
        isolated = np.flatnonzero(degrees == 0)
        edge_order = np.concatenate([b.owners for b in edge_buckets]) if edge_buckets else np.zeros(0, np.int64)
        node_order = np.concatenate([b.owners for b in node_buckets] + [isolated])
        return cls(edge_buckets, node_buckets, isolated,
                   np.argsort(edge_order, kind="stable"), np.argsort(node_order, kind="stable"))


def _group(sizes, ptr, flat, pad_ratio, extra) -> list[Bucket]:
    active = np.flatnonzero(sizes > 0)
    if active.size == 0:
        return []
    distinct = np.unique(sizes[active])[::-1]
    buckets = []
    i = 0
    while i < distinct.size:
        top = distinct[i]
        j = i
        while j + 1 < distinct.size and (top + extra) <= pad_ratio * (distinct[j + 1] + extra):
            j += 1
        lo = distinct[j]
        owners = active[(sizes[active] >= lo) & (sizes[active] <= top)]
        cols = np.arange(top)
        valid = cols[None, :] < sizes[owners][:, None]
        idx = np.where(valid, ptr[owners][:, None] + cols[None, :], 0)
        members = np.where(valid, flat[idx] if flat.size else 0, 0)
        buckets.append(Bucket(owners, members, valid))
        i = j + 1
    return buckets[::-1]


def build_from_binary_matrix(rows: Iterable[tuple[str, Sequence[int]]], feature_names: Sequence[str],
                             on_empty: str = "reject") -> Hypergraph:
    """One hyperedge per ``(patient_id, 0/1 vector)`` row.

    ``on_empty="drop"`` skips all-zero rows instead of raising; the dropped
    ids are available as ``hg.dropped_patients``.
    """
    ids, vectors = [], []
    for pid, vec in rows:
        ids.append(str(pid))
        vectors.append(np.asarray(vec))
    matrix = np.vstack(vectors) if vectors else np.zeros((0, len(feature_names)))
    return from_matrix(matrix, ids, feature_names, on_empty=on_empty)


def from_matrix(matrix, patient_ids: Sequence[str], feature_names: Sequence[str],
                on_empty: str = "reject") -> Hypergraph:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[1] != len(feature_names):
        raise ValueError(f"matrix shape {matrix.shape} does not match {len(feature_names)} features")
    if matrix.shape[0] != len(patient_ids):
        raise ValueError("one patient id per row required")
    if not np.isin(matrix, (0, 1)).all():
        raise ValueError("entries must be 0/1")
    if on_empty not in ("reject", "drop"):
        raise ValueError(f"on_empty must be 'reject' or 'drop', got {on_empty!r}")
    empty = ~matrix.any(axis=1)
    dropped = [str(patient_ids[i]) for i in np.flatnonzero(empty)]
    if dropped and on_empty == "reject":
        raise EmptyHyperedgeError(dropped)
    keep = np.flatnonzero(~empty)
    rows, cols = np.nonzero(matrix[keep])
    hg = Hypergraph(len(feature_names), rows, cols, [str(f) for f in feature_names],
                    [str(patient_ids[i]) for i in keep], edge_count=keep.size)
    hg.dropped_patients = dropped
    return hg


def read_matrix_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    """Read ``patient_id,<features...>`` with 0/1 cells."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "patient_id":
            raise ValueError(f"{path}: first column must be 'patient_id'")
        ids, rows = [], []
        for line in reader:
            if not line:
                continue
            ids.append(line[0])
            rows.append([int(c) for c in line[1:]])
    matrix = np.asarray(rows, dtype=np.int8).reshape(len(ids), len(header) - 1)
    return ids, header[1:], matrix


def load_hypergraph_csv(path, on_empty: str = "reject") -> Hypergraph:
    ids, names, matrix = read_matrix_csv(path)
    return from_matrix(matrix, ids, names, on_empty=on_empty)


# duplication statistics


def duplication_score(hg: Hypergraph, v: int) -> float:
    """Total size of v's hyperedges over the number of distinct vertices they cover.

    The covered set includes ``v`` itself.
    """
    edges = hg.edges_of_node(v)
    if edges.size == 0:
        raise ValueError(f"undefined duplication: node {v} has no incident hyperedge")
    total = int(hg.edge_sizes[edges].sum())
    union = np.unique(np.concatenate([hg.nodes_of_edge(e) for e in edges])).size
    return total / union


def duplication_scores(hg: Hypergraph) -> np.ndarray:
    """Vectorised ``duplication_score`` for every node; NaN for isolated nodes."""
    A = hg.incidence
    total = A @ hg.edge_sizes.astype(np.float64)
    co = (A @ A.T).tocsr()
    union = np.diff(co.indptr).astype(np.float64)
    out = np.full(hg.node_count, np.nan)
    active = hg.node_degrees > 0
    out[active] = total[active] / union[active]
    return out


@dataclass(frozen=True)
class IncidenceStats:
    duplication: np.ndarray
    log_weight: np.ndarray
    w_max: float
    w_avg: float
    w_min: float
    active: np.ndarray


def incidence_stats(hg: Hypergraph) -> IncidenceStats:
    """Log-duplication weights and their max / mean over non-isolated nodes."""
    dup = duplication_scores(hg)
    active = ~np.isnan(dup)
    if not active.any():
        raise ValueError("every node is isolated; duplication statistics undefined")
    w = np.full(hg.node_count, np.nan)
    w[active] = np.log(dup[active])
    wa = w[active]
    w_max = float(wa.max())
    # summation rounding must not push the mean above the max
    w_avg = min(float(wa.mean()), w_max)
    return IncidenceStats(dup, w, w_max, w_avg, float(wa.min()), active)
