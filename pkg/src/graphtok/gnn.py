"""Message-passing encoders: stacked GCN or GAT layers.

Layers return pre-activation outputs; `encode` applies the configured
activation (and dropout) between layers and leaves the final layer
linear. GAT attention neighborhoods always include the node itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graphs import Graph, NormalizedAdjacency, normalized_adjacency
from .tensor import Tensor, record_op

# Incremented by every encode() call; lets tests assert that evaluation
# paths never re-run the encoder.
ENCODE_CALLS = 0

_ACTIVATIONS = {"elu": T.elu, "relu": T.relu}


@dataclass
class GnnConfig:
    layer_kind: str = "gat"
    num_layers: int = 2
    hidden_dim: int = 64
    heads: int = 4
    activation: str = "elu"
    dropout_rate: float = 0.0
    decoder_kind: str = "gcn"
    decoder_layers: int = 1

    def __post_init__(self):
        if self.layer_kind not in ("gcn", "gat"):
            raise ValueError(f"unknown layer_kind {self.layer_kind!r}")
        if self.num_layers < 1 or self.hidden_dim < 1 or self.heads < 1:
            raise ValueError("num_layers, hidden_dim, heads must all be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.layer_kind == "gat" and self.hidden_dim % self.heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )


def spmm(P: NormalizedAdjacency, H: Tensor) -> Tensor:
    """Sparse-dense product P @ H; P must be symmetric (it is here)."""
    H = T.as_tensor(H)
    return record_op(P.matmat(H.data), (H,), lambda g: (P.matmat(g),))


def gcn_layer(P: NormalizedAdjacency, H: Tensor, W: Tensor, activation=None) -> Tensor:
    out = spmm(P, T.matmul(H, W))
    return activation(out) if activation is not None else out


def _attention_edges(g: Graph, self_loops: bool) -> tuple[np.ndarray, np.ndarray]:
    """(dst, src) arrays with dst sorted; dst is the collecting node.

    Sorted dst keeps every downstream segment reduction on its fast
    path. Each node's self-loop sits at the end of its own block.
    """
    nodes = np.arange(g.num_nodes)
    if self_loops:
        dst = np.repeat(nodes, g.degrees() + 1)
        src = np.insert(g.indices, g.indptr[1:], nodes)
    else:
        if (g.degrees() == 0).any():
            raise ValueError("node with empty attention neighborhood and self-loops disabled")
        dst = np.repeat(nodes, g.degrees())
        src = g.indices
    return dst, src


def gat_layer(g: Graph, H: Tensor, head_params: list[dict], average: bool = False,
              dropout_rate: float = 0.0, rng=None, self_loops: bool = True,
              return_attention: bool = False, slope: float = 0.2):
    """Attention aggregation; heads concatenated or (final layer) averaged.

    Each head's params: W (value transform), W1 (attention projection),
    a1/a2 (score vectors for the collecting node and the neighbor). All
    heads are evaluated in one batch of edge ops; the feature axis is
    head-major, so results equal the per-head computation concatenated.
    """
    H = T.as_tensor(H)
    n = g.num_nodes
    dst, src = _attention_edges(g, self_loops)
    nh = len(head_params)
    W_all = T.concat([p["W"] for p in head_params], axis=1)      # [in, nh*dh]
    W1_all = T.concat([p["W1"] for p in head_params], axis=1)
    a1 = T.reshape(T.concat([p["a1"] for p in head_params], axis=0), (1, -1))
    a2 = T.reshape(T.concat([p["a2"] for p in head_params], axis=0), (1, -1))
    Hp = T.matmul(H, W1_all)
    dh = Hp.shape[1] // nh
    s_dst = T.sum_(T.reshape(T.mul(Hp, a1), (n, nh, dh)), axis=2)  # [N, nh]
    s_src = T.sum_(T.reshape(T.mul(Hp, a2), (n, nh, dh)), axis=2)
    e = T.leaky_relu(
        T.add(T.embedding_lookup(s_dst, dst), T.embedding_lookup(s_src, src)), slope
    )
    # Constant per-segment shift keeps exp in range without touching grads.
    shift = np.full((n, nh), -np.inf)
    np.maximum.at(shift, dst, e.data)
    z = T.exp(T.sub(e, Tensor(shift[dst])))
    denom = T.segment_sum(z, dst, n)
    alpha = T.div(z, T.embedding_lookup(denom, dst))             # [E, nh]
    raw_alpha = alpha.data
    alpha = T.dropout(alpha, dropout_rate, rng)
    values = T.matmul(H, W_all)
    msg = T.mul(T.reshape(alpha, (-1, nh, 1)),
                T.reshape(T.embedding_lookup(values, src), (-1, nh, dh)))
    if average:
        # Averaging heads commutes with the segment sum; doing it per
        # edge keeps the scatter width at dh instead of nh*dh.
        out = T.segment_sum(T.mean(msg, axis=1), dst, n)
    else:
        out = T.segment_sum(T.reshape(msg, (-1, nh * dh)), dst, n)
    if return_attention:
        return out, (dst, src, [raw_alpha[:, h].copy() for h in range(nh)])
    return out


def _layer_dims(cfg: GnnConfig, in_dim: int, out_dim: int) -> list[tuple[int, int]]:
    dims = []
    for i in range(cfg.num_layers):
        d_in = in_dim if i == 0 else cfg.hidden_dim
        d_out = out_dim if i == cfg.num_layers - 1 else cfg.hidden_dim
        dims.append((d_in, d_out))
    return dims


def _glorot(rng, fan_in: int, fan_out: int, shape=None) -> Tensor:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return T.parameter(rng.uniform(-s, s, size=shape if shape is not None else (fan_in, fan_out)))


def init_gnn_params(cfg: GnnConfig, in_dim: int, out_dim: int, rng,
                    prefix: str = "gnn") -> dict[str, Tensor]:
    """Glorot weights, zero biases, names "{prefix}.layer{i}.*"."""
    params: dict[str, Tensor] = {}
    for i, (d_in, d_out) in enumerate(_layer_dims(cfg, in_dim, out_dim)):
        name = f"{prefix}.layer{i}"
        if cfg.layer_kind == "gcn":
            params[f"{name}.W"] = _glorot(rng, d_in, d_out)
        else:
            final = i == cfg.num_layers - 1
            head_dim = d_out if final else d_out // cfg.heads
            for h in range(cfg.heads):
                params[f"{name}.head{h}.W"] = _glorot(rng, d_in, head_dim)
                params[f"{name}.head{h}.W1"] = _glorot(rng, d_in, head_dim)
                params[f"{name}.head{h}.a1"] = _glorot(rng, head_dim, 1, shape=(head_dim, 1))
                params[f"{name}.head{h}.a2"] = _glorot(rng, head_dim, 1, shape=(head_dim, 1))
        params[f"{name}.b"] = T.parameter(np.zeros(d_out))
    return params


def _layer_heads(params: dict, name: str, num_heads: int) -> list[dict]:
    return [
        {k: params[f"{name}.head{h}.{k}"] for k in ("W", "W1", "a1", "a2")}
        for h in range(num_heads)
    ]


def encode(g: Graph, cfg: GnnConfig, params: dict[str, Tensor], X,
           rng=None, prefix: str = "gnn") -> Tensor:
    """Run the stacked encoder; training mode iff `rng` is given."""
    global ENCODE_CALLS
    ENCODE_CALLS += 1
    act = _ACTIVATIONS[cfg.activation]
    H = T.as_tensor(X)
    P = normalized_adjacency(g, add_self_loops=True) if cfg.layer_kind == "gcn" else None
    for i in range(cfg.num_layers):
        name = f"{prefix}.layer{i}"
        final = i == cfg.num_layers - 1
        if cfg.layer_kind == "gcn":
            H = gcn_layer(P, H, params[f"{name}.W"])
        else:
            H = gat_layer(g, H, _layer_heads(params, name, cfg.heads),
                          average=final, dropout_rate=cfg.dropout_rate, rng=rng)
        H = T.add(H, params[f"{name}.b"])
        if not final:
            H = act(H)
            H = T.dropout(H, cfg.dropout_rate, rng)
    return H


def decoder_config(cfg: GnnConfig) -> GnnConfig:
    """Reconstruction decoder: same family knobs, no dropout."""
    return GnnConfig(layer_kind=cfg.decoder_kind, num_layers=cfg.decoder_layers,
                     hidden_dim=cfg.hidden_dim, heads=1, activation=cfg.activation,
                     dropout_rate=0.0)
