"""Graph storage, adjacency normalization, CSV dataset I/O and synthetic generators."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class GraphFormatError(ValueError):
    """Raised when a dataset directory cannot be parsed into a valid Graph."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph in CSR form; every undirected edge is stored twice.

    ``labels`` has one entry per node for node tasks or one per graph when
    ``graph_ids`` is set and the graph is a batch.
    """

    row_ptr: np.ndarray
    col_idx: np.ndarray
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    graph_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("row_ptr", "col_idx", "features", "labels", "graph_ids"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return len(self.row_ptr) - 1

    @property
    def num_edges(self) -> int:
        return len(self.col_idx) // 2

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_graphs(self) -> int:
        if self.graph_ids is None:
            return 1
        return int(self.graph_ids.max()) + 1 if len(self.graph_ids) else 0

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def edge_rows(self) -> np.ndarray:
        """Row (target) node of every stored directed entry, in CSR order."""
        return np.repeat(np.arange(self.num_nodes), self.degrees())

    def mirror_index(self) -> np.ndarray:
        """For entry k = (u, v), the index of entry (v, u)."""
        rows = self.edge_rows()
        n = self.num_nodes
        keys = rows * n + self.col_idx
        rev = self.col_idx * n + rows
        # keys are sorted because rows are sorted and columns sorted within a row
        return np.searchsorted(keys, rev)

    def validate(self) -> None:
        n = self.num_nodes
        if n < 1:
            raise GraphFormatError("graph has no nodes")
        if self.row_ptr[0] != 0 or np.any(np.diff(self.row_ptr) < 0):
            raise GraphFormatError("row_ptr must start at 0 and be nondecreasing")
        if self.row_ptr[-1] != len(self.col_idx):
            raise GraphFormatError("row_ptr[N] must equal the number of stored entries")
        if len(self.col_idx) and (self.col_idx.min() < 0 or self.col_idx.max() >= n):
            raise GraphFormatError("column index out of range")
        rows = self.edge_rows()
        if np.any(rows == self.col_idx):
            raise GraphFormatError("self-loops must not be stored")
        for v in range(n):
            seg = self.col_idx[self.row_ptr[v]:self.row_ptr[v + 1]]
            if np.any(np.diff(seg) <= 0):
                raise GraphFormatError(f"row {v} is unsorted or has duplicate entries")
        keys = set(zip(rows.tolist(), self.col_idx.tolist()))
        if any((c, r) not in keys for r, c in keys):
            raise GraphFormatError("adjacency is not symmetric")
        if self.features.shape[0] != n:
            raise GraphFormatError("features row count does not match num_nodes")


def from_edge_list(
    num_nodes: int,
    edges: Sequence[tuple[int, int]] | np.ndarray,
    features: np.ndarray,
    labels: Optional[np.ndarray] = None,
    graph_ids: Optional[np.ndarray] = None,
) -> Graph:
    """Build a Graph from (u, v) pairs: symmetrize, dedupe and drop self-loops."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(e) and (e.min() < 0 or e.max() >= num_nodes):
        raise GraphFormatError("node id out of range")
    e = e[e[:, 0] != e[:, 1]]
    both = np.concatenate([e, e[:, ::-1]])
    keys = np.unique(both[:, 0] * num_nodes + both[:, 1])
    rows, cols = keys // num_nodes, keys % num_nodes
    row_ptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(row_ptr, rows + 1, 1)
    row_ptr = np.cumsum(row_ptr)
    feats = np.array(features, dtype=np.float64, copy=True)
    if feats.ndim != 2 or feats.shape[0] != num_nodes:
        raise GraphFormatError(
            f"features must be {num_nodes} x F, got shape {feats.shape}")
    return Graph(
        row_ptr=row_ptr,
        col_idx=cols.astype(np.int64),
        features=feats,
        labels=None if labels is None else np.array(labels, dtype=np.int64),
        graph_ids=None if graph_ids is None else np.array(graph_ids, dtype=np.int64),
    )


def edge_list(g: Graph) -> np.ndarray:
    """Undirected edges as an (M, 2) array with u < v."""
    rows = g.edge_rows()
    mask = rows < g.col_idx
    return np.stack([rows[mask], g.col_idx[mask]], axis=1)


# ---------------------------------------------------------------------------
# Sparse propagation operators


@dataclass(frozen=True, eq=False)
class Adjacency:
    """Sparse propagation operator with per-entry coefficients.

    ``edge_slot[k]`` is the index into the graph's directed-edge order that
    supplies the learnable weight of entry k, or -1 for self-loop entries
    whose weight is fixed at 1.
    """

    row_ptr: np.ndarray
    col_idx: np.ndarray
    coeffs: np.ndarray
    edge_slot: np.ndarray
    num_edge_slots: int
    _rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rows = np.repeat(np.arange(len(self.row_ptr) - 1), np.diff(self.row_ptr))
        object.__setattr__(self, "_rows", rows)
        for arr in (self.row_ptr, self.col_idx, self.coeffs, self.edge_slot, rows):
            arr.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return len(self.row_ptr) - 1

    @property
    def rows(self) -> np.ndarray:
        return self._rows

    @property
    def nnz(self) -> int:
        return len(self.col_idx)

    def to_dense(self, edge_w: Optional[np.ndarray] = None) -> np.ndarray:
        vals = self.entry_values(edge_w)
        out = np.zeros((self.num_nodes, self.num_nodes))
        np.add.at(out, (self.rows, self.col_idx), vals)
        return out

    def entry_values(self, edge_w: Optional[np.ndarray] = None) -> np.ndarray:
        """coeff * weight per stored entry; self-loop weight is 1."""
        if edge_w is None:
            return self.coeffs.copy()
        w = np.ones(self.nnz)
        has = self.edge_slot >= 0
        w[has] = np.asarray(edge_w).reshape(-1)[self.edge_slot[has]]
        return self.coeffs * w

    def neighbor_sum(self) -> "Adjacency":
        """Same neighbor structure with self-loops removed and unit coefficients."""
        keep = self.edge_slot >= 0
        counts = np.bincount(self.rows[keep], minlength=self.num_nodes)
        row_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return Adjacency(
            row_ptr=row_ptr,
            col_idx=self.col_idx[keep].copy(),
            coeffs=np.ones(int(keep.sum())),
            edge_slot=self.edge_slot[keep].copy(),
            num_edge_slots=self.num_edge_slots,
        )


# NormalizedAdjacency is the Adjacency produced by normalize()/identity_view().
NormalizedAdjacency = Adjacency


def normalize(g: Graph) -> Adjacency:
    """Symmetric renormalization D^-1/2 (A + I) D^-1/2 with explicit self-loop entries."""
    n = g.num_nodes
    deg_hat = g.degrees().astype(np.float64) + 1.0
    rows = g.edge_rows()
    all_rows = np.concatenate([rows, np.arange(n)])
    all_cols = np.concatenate([g.col_idx, np.arange(n)])
    slots = np.concatenate([np.arange(len(rows)), np.full(n, -1)])
    order = np.lexsort((all_cols, all_rows))
    all_rows, all_cols, slots = all_rows[order], all_cols[order], slots[order]
    coeffs = 1.0 / np.sqrt(deg_hat[all_rows] * deg_hat[all_cols])
    row_ptr = np.concatenate([[0], np.cumsum(np.bincount(all_rows, minlength=n))])
    return Adjacency(
        row_ptr=row_ptr.astype(np.int64),
        col_idx=all_cols.astype(np.int64),
        coeffs=coeffs,
        edge_slot=slots.astype(np.int64),
        num_edge_slots=len(rows),
    )


def identity_view(g: Graph) -> Adjacency:
    """Self-loops only, each with coefficient exactly 1."""
    n = g.num_nodes
    return Adjacency(
        row_ptr=np.arange(n + 1, dtype=np.int64),
        col_idx=np.arange(n, dtype=np.int64),
        coeffs=np.ones(n),
        edge_slot=np.full(n, -1, dtype=np.int64),
        num_edge_slots=len(g.col_idx),
    )


# ---------------------------------------------------------------------------
# Dataset directories


def _read_rows(path: Path) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [[c.strip() for c in row] for row in csv.reader(fh) if row and any(c.strip() for c in row)]


def _parse(rows, conv, path) -> list:
    try:
        return [[conv(c) for c in row] for row in rows]
    except ValueError as exc:
        raise GraphFormatError(f"{path}: non-numeric field ({exc})") from None


def load_graph(dir_path: str | os.PathLike) -> Graph:
    """Read ``edges.csv``, ``features.csv`` and optional ``labels.csv``/``graph_ids.csv``."""
    d = Path(dir_path)
    for req in ("edges.csv", "features.csv"):
        if not (d / req).is_file():
            raise FileNotFoundError(f"missing {d / req}")

    feat_rows = _parse(_read_rows(d / "features.csv"), float, d / "features.csv")
    if not feat_rows:
        raise GraphFormatError("features.csv is empty")
    width = len(feat_rows[0])
    if any(len(r) != width for r in feat_rows):
        raise GraphFormatError("features.csv rows have unequal widths")
    features = np.array(feat_rows, dtype=np.float64)
    n = len(features)

    edge_rows = _parse(_read_rows(d / "edges.csv"), int, d / "edges.csv")
    if any(len(r) != 2 for r in edge_rows):
        raise GraphFormatError("edges.csv lines must be 'u,v'")
    edges = np.array(edge_rows, dtype=np.int64).reshape(-1, 2)
    if len(edges):
        if edges.min() < 0:
            raise GraphFormatError("node id out of range (negative)")
        if edges.max() >= n:
            raise GraphFormatError(
                f"node id {int(edges.max())} out of range: features.csv has {n} rows")

    def optional_vector(name):
        p = d / name
        if not p.is_file():
            return None
        rows = _parse(_read_rows(p), int, p)
        if any(len(r) != 1 for r in rows):
            raise GraphFormatError(f"{name}: expected one integer per line")
        return np.array([r[0] for r in rows], dtype=np.int64)

    labels = optional_vector("labels.csv")
    graph_ids = optional_vector("graph_ids.csv")
    if graph_ids is not None and len(graph_ids) != n:
        raise GraphFormatError("graph_ids.csv length does not match features.csv")
    if labels is not None:
        expected = n if graph_ids is None else int(graph_ids.max()) + 1
        if len(labels) != expected:
            raise GraphFormatError(
                f"labels.csv has {len(labels)} rows, expected {expected}")
    if graph_ids is not None:
        if len(edges) and np.any(graph_ids[edges[:, 0]] != graph_ids[edges[:, 1]]):
            raise GraphFormatError("edge crosses graph boundary")
    g = from_edge_list(n, edges, features, labels, graph_ids)
    return g


def save_graph(g: Graph, dir_path: str | os.PathLike) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "edges.csv", "w", encoding="utf-8") as fh:
        for u, v in edge_list(g):
            fh.write(f"{u},{v}\n")
    with open(d / "features.csv", "w", encoding="utf-8") as fh:
        for row in g.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    if g.labels is not None:
        np.savetxt(d / "labels.csv", g.labels, fmt="%d")
    if g.graph_ids is not None:
        np.savetxt(d / "graph_ids.csv", g.graph_ids, fmt="%d")


# ---------------------------------------------------------------------------
# Batching


def batch_graphs(graphs: Sequence[Graph]) -> Graph:
    """Disjoint union; ``labels`` becomes one entry per graph when every input has one."""
    if not graphs:
        raise ValueError("cannot batch an empty list of graphs")
    f = graphs[0].num_features
    if any(g.num_features != f for g in graphs):
        raise ValueError("feature dimension mismatch across graphs")
    row_ptrs, cols, feats, gids, labels = [np.zeros(1, dtype=np.int64)], [], [], [], []
    node_off = edge_off = 0
    for i, g in enumerate(graphs):
        row_ptrs.append(g.row_ptr[1:] + edge_off)
        cols.append(g.col_idx + node_off)
        feats.append(g.features)
        gids.append(np.full(g.num_nodes, i, dtype=np.int64))
        labels.append(g.labels)
        node_off += g.num_nodes
        edge_off += len(g.col_idx)
    lab = None
    if all(lb is not None for lb in labels):
        lab = np.concatenate([np.atleast_1d(lb) for lb in labels])
    return Graph(
        row_ptr=np.concatenate(row_ptrs),
        col_idx=np.concatenate(cols),
        features=np.concatenate(feats),
        labels=lab,
        graph_ids=np.concatenate(gids),
    )


def split_batch(g: Graph) -> list[Graph]:
    """Inverse of batch_graphs for a Graph carrying ``graph_ids`` (contiguous ids assumed)."""
    if g.graph_ids is None:
        return [g]
    out = []
    edges = edge_list(g)
    for gid in range(g.num_graphs):
        nodes = np.flatnonzero(g.graph_ids == gid)
        lo = nodes[0] if len(nodes) else 0
        if len(nodes) and not np.array_equal(nodes, np.arange(lo, lo + len(nodes))):
            raise GraphFormatError("graph_ids must be contiguous per graph")
        sel = edges[(edges[:, 0] >= lo) & (edges[:, 0] < lo + len(nodes))] - lo
        lab = None if g.labels is None else g.labels[gid:gid + 1]
        out.append(from_edge_list(len(nodes), sel, g.features[nodes], lab))
    return out


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SbmSpec:
    block_sizes: tuple[int, ...]
    p_in: float
    p_out: float
    feature_dim: int = 16
    feature_signal: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p_in <= 1.0 and 0.0 <= self.p_out <= 1.0):
            raise ValueError("p_in and p_out must lie in [0, 1]")
        if any(b < 1 for b in self.block_sizes):
            raise ValueError("block sizes must be >= 1")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")


def generate_sbm(spec: SbmSpec) -> Graph:
    """Stochastic block model with Gaussian features centered on per-block means.

    Block means are random unit directions scaled by ``feature_signal``;
    features are mean + N(0, 1) noise.
    """
    n = int(sum(spec.block_sizes))
    if n == 0:
        raise ValueError("SBM needs at least one node")
    rng = np.random.default_rng(spec.seed)
    labels = np.repeat(np.arange(len(spec.block_sizes)), spec.block_sizes)
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, spec.p_in, spec.p_out)
    draw = rng.random(len(iu))
    keep = draw < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    means = rng.standard_normal((len(spec.block_sizes), spec.feature_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    feats = spec.feature_signal * means[labels] + rng.standard_normal((n, spec.feature_dim))
    return from_edge_list(n, edges, feats, labels)


def generate_motif_graphs(
    num_graphs: int = 100,
    nodes_per_graph: int = 20,
    motif_size: int = 5,
    purity: float = 0.7,
    noise_edges: int = 2,
    seed: int = 0,
) -> list[Graph]:
    """Two-class dataset: cycle-rich (label 0) versus star-rich (label 1) graphs.

    Each graph is a chain of motifs; a motif is a cycle with probability
    ``purity`` in class 0 (a star in class 1), otherwise the other kind.
    Nodes carry the constant 1-dimensional unit feature.
    """
    rng = np.random.default_rng(seed)
    graphs = []
    for i in range(num_graphs):
        label = i % 2
        edges: list[tuple[int, int]] = []
        n = 0
        prev_anchor = None
        while n + motif_size <= nodes_per_graph:
            is_cycle = (rng.random() < purity) == (label == 0)
            nodes = list(range(n, n + motif_size))
            if is_cycle:
                edges += [(nodes[j], nodes[(j + 1) % motif_size]) for j in range(motif_size)]
            else:
                edges += [(nodes[0], nodes[j]) for j in range(1, motif_size)]
            attach = nodes[int(rng.integers(motif_size))]
            if prev_anchor is not None:
                edges.append((prev_anchor, attach))
            prev_anchor = nodes[int(rng.integers(motif_size))]
            n += motif_size
        for _ in range(noise_edges):
            u, v = rng.integers(n, size=2)
            edges.append((int(u), int(v)))
        graphs.append(from_edge_list(n, edges, np.ones((n, 1)), np.array([label])))
    return graphs
