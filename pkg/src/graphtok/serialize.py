"""Preprocessing that turns a graph into per-node token sequences.

Features are PCA-projected, cosine KNN adds semantic edges, personalized
PageRank over the union graph ranks context nodes, and the top-k plus
the node itself form its sequence with softmax-normalized gating
weights. Everything here is pure numpy and bit-reproducible.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .binio import MAGIC_SEQUENCES, load_named_arrays, save_named_arrays
from .graphs import Graph, NormalizedAdjacency, build_csr, normalized_adjacency
from .tensor import Tensor


@dataclass
class SemanticEdgeSet:
    """Directed cosine-KNN edges src->dst with their similarity scores."""

    src: np.ndarray
    dst: np.ndarray
    scores: np.ndarray
    k_sem: int


@dataclass
class PprResult:
    """Per-node PPR context: ids[:, 0] is the node itself, -1 pads."""

    ids: np.ndarray          # [N, k+1] int32
    scores: np.ndarray       # [N, k+1] raw PPR scores (0 at padding)
    gating: np.ndarray       # [N, k+1] float32, rows sum to 1 over real slots
    alpha: float
    tol: float
    converged: np.ndarray    # [N] bool
    iterations: np.ndarray   # [N] int32


@dataclass
class SequenceSet:
    """Ordered per-node id lists with aligned gating weights."""

    ids: np.ndarray          # [N, k+1] int32, column 0 = the node itself
    gating: np.ndarray       # [N, k+1] float32

    @property
    def k(self) -> int:
        return self.ids.shape[1] - 1

    def __eq__(self, other):
        return (isinstance(other, SequenceSet)
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.gating, other.gating))


def pca_project(X, d: int) -> np.ndarray:
    """Center, project onto top-d principal axes.

    Sign convention: the largest-magnitude entry of each component is
    positive, so the projection is deterministic across SVD backends.
    """
    Xd = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    n, d_x = Xd.shape
    if not (1 <= d <= min(n, d_x)):
        raise ValueError(f"pca dimension {d} not in [1, min({n}, {d_x})]")
    centered = Xd - Xd.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:d]
    flip = comps[np.arange(d), np.argmax(np.abs(comps), axis=1)] < 0
    comps[flip] *= -1.0
    return centered @ comps.T


def semantic_edges(F, k_sem: int) -> SemanticEdgeSet:
    """Top-k_sem cosine neighbors per node, self excluded.

    Zero-norm rows have similarity 0 with everything. Ties go to the
    smaller node id. k_sem >= N clamps to N-1 with a warning.
    """
    Fd = np.asarray(F.data if isinstance(F, Tensor) else F, dtype=np.float64)
    n = Fd.shape[0]
    if n < 2:
        raise ValueError(f"semantic_edges needs >= 2 rows, got {n}")
    if k_sem == 0:
        empty = np.zeros(0, dtype=np.int64)
        return SemanticEdgeSet(empty, empty.copy(), np.zeros(0), 0)
    if k_sem >= n:
        warnings.warn(f"k_sem={k_sem} >= {n} nodes; clamping to {n - 1}")
        k_sem = n - 1
    norms = np.sqrt((Fd * Fd).sum(axis=1))
    unit = np.zeros_like(Fd)
    nz = norms > 0
    unit[nz] = Fd[nz] / norms[nz, None]
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    src = np.repeat(np.arange(n, dtype=np.int64), k_sem)
    dst = np.empty(n * k_sem, dtype=np.int64)
    scores = np.empty(n * k_sem)
    ids = np.arange(n)
    for v in range(n):
        order = np.lexsort((ids, -sims[v]))[:k_sem]
        dst[v * k_sem : (v + 1) * k_sem] = order
        scores[v * k_sem : (v + 1) * k_sem] = sims[v][order]
    return SemanticEdgeSet(src, dst, scores, k_sem)


def ppr(P: NormalizedAdjacency, v: int, alpha: float, tol: float = 1e-6,
        max_iters: int = 1000) -> tuple[np.ndarray, bool, int]:
    """Power iteration for r = alpha*P*r + (1-alpha)*q, q one-hot at v.

    Returns the raw fixed point (no renormalization), a convergence
    flag, and the iteration count.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    q = np.zeros(P.num_nodes)
    q[v] = 1.0
    r = q.copy()
    for it in range(1, max_iters + 1):
        r_new = alpha * P.matvec(r) + (1.0 - alpha) * q
        delta = np.abs(r_new - r).sum()
        r = r_new
        if delta < tol:
            return r, True, it
    return r, False, max_iters


def union_graph(g: Graph, sem: SemanticEdgeSet | None) -> Graph:
    """Structural plus semantic edges, symmetrized and binarized."""
    pairs = g.edge_pairs()
    if sem is not None and sem.src.size:
        sem_pairs = np.stack([sem.src, sem.dst], axis=1)
        pairs = np.concatenate([pairs, sem_pairs], axis=0)
    indptr, indices = build_csr(g.num_nodes, pairs)
    return Graph(g.num_nodes, indptr, indices, g.features, g.labels,
                 train_mask=g.train_mask, valid_mask=g.valid_mask,
                 test_mask=g.test_mask)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def build_sequences(g: Graph, sem: SemanticEdgeSet | None, k: int,
                    alpha: float = 0.85, tol: float = 1e-6,
                    max_iters: int = 1000) -> tuple[SequenceSet, PprResult]:
    """Top-k PPR context per node over the union graph.

    Neighbors are ranked by descending score (ties to the smaller id)
    and only strictly positive scores qualify; short rows pad ids with
    -1 and gating with 0. Gating is a softmax (temperature 1) over the
    node's own score followed by its neighbors' scores.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    n = g.num_nodes
    union = union_graph(g, sem)
    P = normalized_adjacency(union, add_self_loops=False)
    ids = np.full((n, k + 1), -1, dtype=np.int32)
    scores = np.zeros((n, k + 1))
    gating = np.zeros((n, k + 1), dtype=np.float32)
    converged = np.zeros(n, dtype=bool)
    iterations = np.zeros(n, dtype=np.int32)
    all_ids = np.arange(n)
    for v in range(n):
        r, ok, iters = ppr(P, v, alpha, tol, max_iters)
        converged[v] = ok
        iterations[v] = iters
        order = np.lexsort((all_ids, -r))
        order = order[(order != v) & (r[order] > 0)][:k]
        m = order.size
        ids[v, 0] = v
        ids[v, 1 : m + 1] = order
        scores[v, 0] = r[v]
        scores[v, 1 : m + 1] = r[order]
        gating[v, : m + 1] = _softmax(scores[v, : m + 1]).astype(np.float32)
    seq = SequenceSet(ids, gating)
    return seq, PprResult(ids.copy(), scores, gating.copy(), alpha, tol,
                          converged, iterations)


def save_sequences(path, seq: SequenceSet, num_levels: int = 0) -> None:
    save_named_arrays(path, MAGIC_SEQUENCES, {
        "ids": seq.ids.astype(np.int32),
        "gating": seq.gating.astype(np.float32),
        "num_levels": np.asarray(num_levels, dtype=np.int32),
    })


def load_sequences(path) -> SequenceSet:
    arrays = load_named_arrays(path, MAGIC_SEQUENCES)
    return SequenceSet(arrays["ids"], arrays["gating"])
