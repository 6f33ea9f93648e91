"""Graph container, ingestion, synthetic generation, and normalization."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import scatter_add


class ParseError(ValueError):
    """Malformed input line; message carries the 1-based line number."""


@dataclass
class Graph:
    """Undirected graph in CSR form with node features, labels, masks.

    Both directions of every undirected edge are stored, so `indices`
    lists each neighbor of each node exactly once. Labels use -1 for
    unlabeled nodes. Masks are pairwise disjoint boolean vectors.
    """

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray = field(default=None)
    valid_mask: np.ndarray = field(default=None)
    test_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.num_nodes
        if self.train_mask is None:
            self.train_mask = np.zeros(n, dtype=bool)
        if self.valid_mask is None:
            self.valid_mask = np.zeros(n, dtype=bool)
        if self.test_mask is None:
            self.test_mask = np.zeros(n, dtype=bool)
        if self.features.shape[0] != n:
            raise ValueError(
                f"feature rows {self.features.shape[0]} != num_nodes {n}"
            )
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n):
            raise IndexError("edge endpoint out of range")
        overlap = (
            (self.train_mask & self.valid_mask)
            | (self.train_mask & self.test_mask)
            | (self.valid_mask & self.test_mask)
        )
        if overlap.any():
            raise ValueError("train/valid/test masks overlap")

    @property
    def num_edges(self) -> int:
        """Number of undirected edges (each stored twice in CSR)."""
        return self.indices.size // 2

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v] : self.indptr[v + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def edge_pairs(self) -> np.ndarray:
        """Unique undirected pairs as an [E, 2] array with u < v."""
        src = np.repeat(np.arange(self.num_nodes), self.degrees())
        keep = src < self.indices
        return np.stack([src[keep], self.indices[keep]], axis=1)


def build_csr(num_nodes: int, pairs: np.ndarray, directed: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Canonicalize edges into CSR: drop self-loops, dedupe, symmetrize.

    `pairs` is an [E, 2] integer array. With `directed`, symmetrization
    is skipped and each (u, v) is stored as given.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= num_nodes):
        raise IndexError(
            f"edge endpoint {pairs.max() if pairs.max() >= num_nodes else pairs.min()} "
            f"out of range for {num_nodes} nodes"
        )
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    if not directed and len(pairs):
        pairs = np.concatenate([pairs, pairs[:, ::-1]], axis=0)
    if len(pairs):
        pairs = np.unique(pairs, axis=0)
    src, dst = (pairs[:, 0], pairs[:, 1]) if len(pairs) else (np.zeros(0, np.int64),) * 2
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, dst.astype(np.int64)


def load_edge_list(path, feature_path, label_path=None, directed: bool = False) -> Graph:
    """Read an edge list plus row-per-node feature/label text files.

    Edge lines are whitespace-separated "u v" pairs; `#` starts a
    comment. Node count comes from the feature file's row count. Missing
    label file means all labels are -1.
    """
    features = np.loadtxt(feature_path, dtype=np.float64, ndmin=2)
    num_nodes = features.shape[0]
    pairs = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'u v', got {text!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-integer node id in {text!r}")
            pairs.append((u, v))
    pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    indptr, indices = build_csr(num_nodes, pairs, directed=directed)
    if label_path is not None:
        labels = np.loadtxt(label_path, dtype=np.int64, ndmin=1)
        if labels.shape[0] != num_nodes:
            raise ParseError(
                f"{label_path}: {labels.shape[0]} labels for {num_nodes} nodes"
            )
    else:
        labels = np.full(num_nodes, -1, dtype=np.int64)
    return Graph(num_nodes, indptr, indices, features, labels)


def save_edge_list(g: Graph, path) -> None:
    """Write unique undirected pairs, one per line, for round-tripping."""
    with open(path, "w") as f:
        for u, v in g.edge_pairs():
            f.write(f"{u} {v}\n")


def stratified_split(labels: np.ndarray, fractions: tuple[float, float, float],
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class shuffle then split by cumulative fractions."""
    n = labels.shape[0]
    train = np.zeros(n, dtype=bool)
    valid = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(fractions[0] * idx.size))
        n_valid = int(round(fractions[1] * idx.size))
        train[idx[:n_train]] = True
        valid[idx[n_train : n_train + n_valid]] = True
        test[idx[n_train + n_valid :]] = True
    return train, valid, test


def make_sbm(n: int, blocks: int, p_in: float, p_out: float, d_x: int,
             feature_shift: float, seed: int) -> Graph:
    """Stochastic block model with axis-aligned per-block feature means.

    Labels are block ids; block b's feature mean is feature_shift along
    coordinate b mod d_x. Masks are a 60/20/20 stratified split.
    """
    if blocks > n:
        raise ValueError(f"blocks {blocks} > n {n}")
    if n % blocks != 0:
        raise ValueError(f"blocks {blocks} does not divide n {n}")
    if not (0.0 <= p_out <= p_in <= 1.0):
        raise ValueError(f"need 0 <= p_out <= p_in <= 1, got p_in={p_in} p_out={p_out}")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(blocks, dtype=np.int64), n // blocks)
    prob = np.where(labels[:, None] == labels[None, :], p_in, p_out)
    draw = rng.random((n, n)) < prob
    upper = np.triu(draw, k=1)
    pairs = np.argwhere(upper)
    indptr, indices = build_csr(n, pairs)
    features = rng.standard_normal((n, d_x))
    features[np.arange(n), labels % d_x] += feature_shift
    train, valid, test = stratified_split(labels, (0.6, 0.2, 0.2), rng)
    return Graph(n, indptr, indices, features, labels,
                 train_mask=train, valid_mask=valid, test_mask=test)


class NormalizedAdjacency:
    """P = D^(-1/2) A D^(-1/2) in COO form, sorted by (row, col).

    Isolated nodes contribute no entries (their rows are empty rather
    than NaN). Products use np.add.at so the accumulation order is fixed.
    """

    def __init__(self, num_nodes: int, rows: np.ndarray, cols: np.ndarray,
                 values: np.ndarray):
        order = np.lexsort((cols, rows))
        self.num_nodes = num_nodes
        self.rows = rows[order]
        self.cols = cols[order]
        self.values = values[order]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        prod = (self.values * x[self.cols]).astype(x.dtype)
        return scatter_add(self.num_nodes, self.rows, prod)

    def matmat(self, X: np.ndarray) -> np.ndarray:
        prod = (self.values[:, None] * X[self.cols]).astype(X.dtype)
        return scatter_add(self.num_nodes, self.rows, prod)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.num_nodes, self.num_nodes))
        dense[self.rows, self.cols] = self.values
        return dense


def normalized_adjacency(g: Graph, add_self_loops: bool = False) -> NormalizedAdjacency:
    n = g.num_nodes
    rows = np.repeat(np.arange(n), g.degrees())
    cols = g.indices.copy()
    if add_self_loops:
        rows = np.concatenate([rows, np.arange(n)])
        cols = np.concatenate([cols, np.arange(n)])
    deg = np.zeros(n, dtype=np.float64)
    np.add.at(deg, rows, 1.0)
    inv_sqrt = np.zeros(n)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    values = inv_sqrt[rows] * inv_sqrt[cols]
    return NormalizedAdjacency(n, rows, cols, values)
