"""Self-supervised tokenizer objectives and teacher maintenance.

Three losses are combined: a contrastive graph/node discriminator, a
masked-reconstruction + distillation term, and a commitment term tying
encoder outputs to their quantized reconstructions. Sums over node sets
are normalized to means so loss weights stay comparable across graph
sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class SslConfig:
    beta: float = 0.25
    gamma: float = 2.0
    lam: float = 1.0
    mask_rate: float = 0.5
    teacher_decay: float = 0.99
    losses_on: str = "quantized"

    def __post_init__(self):
        if self.gamma < 1.0:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")
        if not (0.0 < self.mask_rate < 1.0):
            raise ValueError(f"mask_rate must be in (0, 1), got {self.mask_rate}")
        if not (0.0 <= self.teacher_decay < 1.0):
            raise ValueError(f"teacher_decay must be in [0, 1), got {self.teacher_decay}")
        if self.losses_on not in ("quantized", "pre_quantized"):
            raise ValueError(f"unknown losses_on {self.losses_on!r}")


def corrupt_features(X, rng: np.random.Generator):
    """Row-permuted copy of X; the original is untouched."""
    data = X.data if isinstance(X, Tensor) else np.asarray(X)
    out = data[rng.permutation(data.shape[0])].copy()
    return Tensor(out) if isinstance(X, Tensor) else out


def dgi_loss(H: Tensor, H_tilde: Tensor, W_disc: Tensor) -> Tensor:
    """Binary cross-entropy of a bilinear graph/node discriminator.

    The graph summary is the mean node representation of the clean
    graph; clean rows are positives, corrupted rows negatives. Returned
    as a mean per side, to be minimized.
    """
    d = H.shape[1]
    h_g = T.reshape(T.mean(H, axis=0), (d, 1))
    w = T.matmul(W_disc, h_g)
    pos = T.sigmoid(T.matmul(H, w))
    neg = T.sigmoid(T.matmul(H_tilde, w))
    loss_pos = T.mean(T.log(pos))
    loss_neg = T.mean(T.log(T.sub(1.0, neg)))
    return T.mul(T.add(loss_pos, loss_neg), -0.5)


def mask_nodes(X, mask_rate: float, rng: np.random.Generator,
               mask_token: Tensor) -> tuple[Tensor, np.ndarray]:
    """Replace ceil(mask_rate*N) feature rows by the learned mask token.

    Returns the masked matrix (differentiable w.r.t. the token) and the
    sorted masked-node index set.
    """
    data = X.data if isinstance(X, Tensor) else np.asarray(X)
    n = data.shape[0]
    count = math.ceil(mask_rate * n)
    idx = np.sort(rng.choice(n, size=count, replace=False))
    kept = data.copy()
    kept[idx] = 0.0
    indicator = np.zeros((n, 1), dtype=data.dtype)
    indicator[idx] = 1.0
    token_row = T.reshape(mask_token, (1, data.shape[1]))
    masked = T.add(Tensor(kept), T.mul(Tensor(indicator), token_row))
    return masked, idx


def _scaled_cosine_error(A: Tensor, B: Tensor, gamma: float) -> Tensor:
    """Mean of (1 - cos(a_i, b_i))^gamma over rows."""
    return T.mean(T.power(T.sub(1.0, T.cosine_similarity(A, B, axis=-1)), gamma))


def gmae2_loss(X, H_decoded: Tensor, H_latent: Tensor, H_teacher,
               mask_idx: np.ndarray, gamma: float, lam: float) -> Tensor:
    """Masked-node reconstruction plus teacher-student distillation.

    Term 1 compares decoder outputs to raw features on masked nodes;
    term 2 compares the (detached) teacher representation of the clean
    graph to the student latent on all nodes, weighted by lam. Both are
    means over their index sets.
    """
    X = X.data if isinstance(X, Tensor) else np.asarray(X)
    teacher = H_teacher.data if isinstance(H_teacher, Tensor) else np.asarray(H_teacher)
    term1 = _scaled_cosine_error(
        T.embedding_lookup(H_decoded, mask_idx), Tensor(X[mask_idx]), gamma
    )
    if lam == 0.0:
        return term1
    term2 = _scaled_cosine_error(H_latent, Tensor(teacher), gamma)
    return T.add(term1, T.mul(term2, lam))


def commitment_loss(H: Tensor, Z: Tensor) -> Tensor:
    """Mean Euclidean distance to the (stop-gradient) quantization."""
    Z_detached = Z.detach() if isinstance(Z, Tensor) else Tensor(np.asarray(Z))
    return T.mean(T.l2_norm(T.sub(H, Z_detached), axis=-1))


def tokenizer_total_loss(l_dgi, l_gmae2, l_commit, beta: float) -> Tensor:
    """L = L_contrastive + L_reconstruction + beta * L_commit; None terms drop."""
    total = Tensor(np.zeros(()))
    if l_dgi is not None:
        total = T.add(total, l_dgi)
    if l_gmae2 is not None:
        total = T.add(total, l_gmae2)
    if l_commit is not None:
        total = T.add(total, T.mul(l_commit, beta))
    return total


def init_teacher(student: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in student.items()}


def update_teacher(teacher: dict[str, np.ndarray], student: dict[str, Tensor],
                   decay: float) -> dict[str, np.ndarray]:
    """theta_t <- decay*theta_t + (1-decay)*theta_s, elementwise, in place."""
    for name, s in student.items():
        t = teacher[name]
        if t.shape != s.data.shape:
            raise ValueError(
                f"teacher/student shape mismatch for {name}: {t.shape} vs {s.data.shape}"
            )
        teacher[name] = decay * t + (1.0 - decay) * s.data
    return teacher
