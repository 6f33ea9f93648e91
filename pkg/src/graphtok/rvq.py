"""Residual vector quantization with EMA codebook maintenance.

Codes are kept in a float64 master copy and cast to the input dtype for
assignment, so float32 training and float64 verification share one code
path. Distances use the same diff-square-sum arithmetic a per-pair scan
would, which makes assignments (including ties, broken toward smaller
indices by first-occurrence argmin) bit-for-bit reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .binio import MAGIC_CODEBOOKS, MAGIC_TOKENS, load_named_arrays, save_named_arrays
from .tensor import Tensor, record_op

DEAD_CODE_MASS = 1e-3


@dataclass
class CodebookSet:
    codes: np.ndarray          # [c, K, d_c] float64 master copy
    ema_mass: np.ndarray       # [c, K]
    ema_sum: np.ndarray        # [c, K, d_c]
    decay: float

    @property
    def num_codebooks(self) -> int:
        return self.codes.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.codes.shape[1]

    @property
    def code_dim(self) -> int:
        return self.codes.shape[2]


def _nearest(X: np.ndarray, codes: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - codes[None, :, :]
    return np.argmin((diff * diff).sum(axis=-1), axis=1)


def kmeans_init(H, K: int, iters: int = 25, seed=0) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding, deterministic per seed.

    Empty clusters are re-seeded to the point farthest from its own
    assigned centroid.
    """
    if K <= 0:
        raise ValueError(f"K must be positive, got {K}")
    X = np.asarray(H.data if isinstance(H, Tensor) else H, dtype=np.float64)
    n = X.shape[0]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for k in range(1, K):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers[k] = X[idx]
        d2 = np.minimum(d2, ((X - centers[k]) ** 2).sum(axis=1))
    for _ in range(iters):
        assign = _nearest(X, centers)
        new_centers = centers.copy()
        point_dist = ((X - centers[assign]) ** 2).sum(axis=1)
        for k in range(K):
            members = assign == k
            if members.any():
                new_centers[k] = X[members].mean(axis=0)
            else:
                new_centers[k] = X[np.argmax(point_dist)]
        if np.array_equal(new_centers, centers):
            break
        centers = new_centers
    return centers


def init_codebooks(H, c: int, K: int, decay: float = 0.99, iters: int = 25,
                   seed=0) -> CodebookSet:
    """K-means per level, each level fit on the previous levels' residuals."""
    X = np.asarray(H.data if isinstance(H, Tensor) else H, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    resid = X.copy()
    levels = []
    for _ in range(c):
        cb = kmeans_init(resid, K, iters=iters, seed=rng)
        resid = resid - cb[_nearest(resid, cb)]
        levels.append(cb)
    d = X.shape[1]
    return CodebookSet(np.stack(levels), np.zeros((c, K)), np.zeros((c, K, d)), decay)


def assign_tokens(Hd: np.ndarray, C: CodebookSet) -> tuple[np.ndarray, np.ndarray]:
    """Greedy per-level nearest-code assignment. Returns (tokens, Z_q)."""
    Hd = np.asarray(Hd)
    codes = C.codes.astype(Hd.dtype) if C.codes.dtype != Hd.dtype else C.codes
    resid = Hd.copy()
    z = np.zeros_like(Hd)
    tokens = np.empty((Hd.shape[0], C.num_codebooks), dtype=np.int32)
    for j in range(C.num_codebooks):
        t = _nearest(resid, codes[j])
        tokens[:, j] = t
        chosen = codes[j][t]
        resid -= chosen
        z += chosen
    return tokens, z


def rvq_assign(h, C: CodebookSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single-vector assignment: (tokens [c], z, final residual)."""
    hd = np.asarray(h.data if isinstance(h, Tensor) else h)
    tokens, z = assign_tokens(hd[None, :], C)
    return tokens[0], z[0], hd - z[0]


def rvq_batch(H, C: CodebookSet, commit_variant: str = "eq8"):
    """Quantize every row; Z gets a straight-through (identity) gradient.

    commit_variant "eq8" is the mean unsquared distance to the final
    reconstruction; "alg2" accumulates squared distances per level.
    """
    H = T.as_tensor(H)
    tokens, z = assign_tokens(H.data, C)
    Z = record_op(z, (H,), lambda g: (g,))
    if commit_variant == "eq8":
        commit = T.mean(T.l2_norm(T.sub(H, Tensor(z)), axis=-1))
    elif commit_variant == "alg2":
        codes = C.codes.astype(H.data.dtype)
        cum = np.zeros_like(H.data)
        per_node = None
        for j in range(C.num_codebooks):
            cum = cum + codes[j][tokens[:, j]]
            diff = T.sub(H, Tensor(cum.copy()))
            level = T.sum_(T.mul(diff, diff), axis=1)
            per_node = level if per_node is None else T.add(per_node, level)
        commit = T.mean(per_node)
    else:
        raise ValueError(f"unknown commit_variant {commit_variant!r}")
    return tokens, Z, commit


def ema_update(C: CodebookSet, H, tokens: np.ndarray) -> CodebookSet:
    """c_k <- decay*c_k + (1-decay)*mean(assigned residuals); empty codes stay.

    Residuals at each level are recomputed with the codes that produced
    `tokens`, i.e. the pre-update codes, in float64.
    """
    Hd = np.asarray(H.data if isinstance(H, Tensor) else H, dtype=np.float64)
    tau = C.decay
    resid = Hd.copy()
    for j in range(C.num_codebooks):
        t = tokens[:, j]
        K, d = C.codebook_size, C.code_dim
        counts = np.bincount(t, minlength=K).astype(np.float64)
        sums = T.scatter_add(K, t, resid)
        old = C.codes[j].copy()
        filled = counts > 0
        means = np.zeros((K, d))
        means[filled] = sums[filled] / counts[filled, None]
        C.codes[j][filled] = tau * old[filled] + (1.0 - tau) * means[filled]
        C.ema_mass[j] = tau * C.ema_mass[j] + (1.0 - tau) * counts
        C.ema_sum[j] = tau * C.ema_sum[j] + (1.0 - tau) * sums
        resid -= old[t]
    return C


def reseed_dead_codes(C: CodebookSet, H, rng: np.random.Generator,
                      threshold: float = DEAD_CODE_MASS) -> int:
    """Replace codes whose EMA mass fell below threshold with residual samples."""
    Hd = np.asarray(H.data if isinstance(H, Tensor) else H, dtype=np.float64)
    resid = Hd.copy()
    replaced = 0
    for j in range(C.num_codebooks):
        dead = C.ema_mass[j] < threshold
        if dead.any():
            idx = rng.integers(0, Hd.shape[0], size=int(dead.sum()))
            C.codes[j][dead] = resid[idx]
            C.ema_mass[j][dead] = 1.0
            C.ema_sum[j][dead] = resid[idx]
            replaced += int(dead.sum())
        resid -= C.codes[j][_nearest(resid, C.codes[j])]
    return replaced


def codebook_aggregate(tokens, C: CodebookSet) -> np.ndarray:
    """Sum of the assigned code vectors; accepts [c] or [N, c] tokens."""
    t = np.asarray(tokens)
    if t.min(initial=0) < 0 or t.max(initial=0) >= C.codebook_size:
        raise IndexError(f"token index out of range for K={C.codebook_size}")
    levels = np.arange(C.num_codebooks)
    if t.ndim == 1:
        return C.codes[levels, t].sum(axis=0)
    return C.codes[levels[None, :], t].sum(axis=1)


def memory_report(N: int, d_x: int, c: int, K: int, d_c: int,
                  bytes_per_float: int = 4, bytes_per_index: int = 4,
                  include_codebooks: bool = True) -> float:
    """Dense-feature bytes divided by token(+codebook) bytes."""
    if min(N, d_x, c, K, d_c, bytes_per_float, bytes_per_index) <= 0:
        raise ValueError("memory_report arguments must be positive")
    dense = float(N) * d_x * bytes_per_float
    compact = float(N) * c * bytes_per_index
    if include_codebooks:
        compact += float(c) * K * d_c * bytes_per_float
    return dense / compact


def save_codebooks(path, C: CodebookSet) -> None:
    save_named_arrays(path, MAGIC_CODEBOOKS, {
        "codes": C.codes,
        "ema_mass": C.ema_mass,
        "ema_sum": C.ema_sum,
        "decay": np.asarray(C.decay, dtype=np.float64),
    })


def load_codebooks(path) -> CodebookSet:
    arrays = load_named_arrays(path, MAGIC_CODEBOOKS)
    return CodebookSet(arrays["codes"], arrays["ema_mass"], arrays["ema_sum"],
                       float(arrays["decay"]))


def save_tokens(path, tokens: np.ndarray) -> None:
    save_named_arrays(path, MAGIC_TOKENS, {"tokens": tokens.astype(np.int32)})


def load_tokens(path) -> np.ndarray:
    return load_named_arrays(path, MAGIC_TOKENS)["tokens"]
