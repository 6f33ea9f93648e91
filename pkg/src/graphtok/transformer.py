"""Token-sequence Transformer: embedding, gating, encoding, readout.

A node's input is its PPR sequence of k+1 nodes; each position expands
into that node's c discrete-token embeddings plus an aggregate vector
summed from the frozen codebooks, laid out node-major, level-minor.
Positional and hierarchy encodings are additive; gating scales whole
positions after that composition. Alternative input modes feed one
continuous vector per position instead of tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rvq import CodebookSet, codebook_aggregate
from .tensor import Tensor

NEG_MASK = -1e9


@dataclass
class TransformerConfig:
    num_layers: int = 2
    num_heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 128
    dropout: float = 0.1
    k: int = 5
    c: int = 3
    num_classes: int = 2

    def __post_init__(self):
        if min(self.num_layers, self.num_heads, self.model_dim, self.ffn_dim,
               self.c, self.num_classes) < 1 or self.k < 0:
            raise ValueError("all transformer counts must be >= 1 (k >= 0)")
        if self.model_dim % self.num_heads:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )


@dataclass
class ModelFlags:
    """Input mode and ablation toggles for the forward pass."""

    mode: str = "tokens"          # tokens | continuous | features
    use_gating: bool = True
    use_positional: bool = True
    use_aggregate: bool = True


def _glorot(rng, fan_in, fan_out, shape=None) -> Tensor:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return T.parameter(rng.uniform(-s, s, size=shape if shape is not None else (fan_in, fan_out)))


def init_transformer_params(cfg: TransformerConfig, K: int, source_dim: int,
                            rng, flags: ModelFlags = None) -> dict[str, Tensor]:
    """Embedding tables plus encoder/readout/classifier weights.

    `source_dim` is the codebook dim in tokens/continuous mode or the
    raw feature dim in features mode. The hierarchy table has c+1 rows
    so the aggregate token gets its own slot.
    """
    flags = flags or ModelFlags()
    d = cfg.model_dim
    params: dict[str, Tensor] = {}
    if flags.mode == "tokens":
        params["xt"] = T.parameter(rng.normal(0.0, 0.02, size=(cfg.c * K, d)))
        params["he"] = T.parameter(rng.normal(0.0, 0.02, size=(cfg.c + 1, d)))
        if source_dim != d:
            params["proj.W"] = _glorot(rng, source_dim, d)
            params["proj.b"] = T.parameter(np.zeros(d))
    else:
        params["embed.W"] = _glorot(rng, source_dim, d)
        params["embed.b"] = T.parameter(np.zeros(d))
    params["pe"] = T.parameter(rng.normal(0.0, 0.02, size=(cfg.k + 1, d)))
    for i in range(cfg.num_layers):
        p = f"encoder.layer{i}"
        params[f"{p}.ln1.g"] = T.parameter(np.ones(d))
        params[f"{p}.ln1.b"] = T.parameter(np.zeros(d))
        params[f"{p}.ln2.g"] = T.parameter(np.ones(d))
        params[f"{p}.ln2.b"] = T.parameter(np.zeros(d))
        for w in ("Wq", "Wk", "Wv", "Wo"):
            params[f"{p}.attn.{w}"] = _glorot(rng, d, d)
        params[f"{p}.ffn.W1"] = _glorot(rng, d, cfg.ffn_dim)
        params[f"{p}.ffn.b1"] = T.parameter(np.zeros(cfg.ffn_dim))
        params[f"{p}.ffn.W2"] = _glorot(rng, cfg.ffn_dim, d)
        params[f"{p}.ffn.b2"] = T.parameter(np.zeros(d))
    params["readout.W"] = _glorot(rng, d, 1)
    params["classifier.W"] = _glorot(rng, d, cfg.num_classes)
    params["classifier.b"] = T.parameter(np.zeros(cfg.num_classes))
    return params


def _param_dtype(params: dict[str, Tensor]) -> np.dtype:
    return next(iter(params.values())).data.dtype


def tokens_per_position(cfg: TransformerConfig, flags: ModelFlags) -> int:
    if flags.mode != "tokens":
        return 1
    return cfg.c + 1 if flags.use_aggregate else cfg.c


def embed_positions(params: dict, cfg: TransformerConfig, seq_ids: np.ndarray,
                    source, C: CodebookSet | None,
                    flags: ModelFlags) -> Tensor:
    """Assemble [B, k+1, m, d] embeddings for a batch of sequences.

    `seq_ids` is [B, k+1] with -1 padding; padded slots come out as zero
    rows. `source` is the [N, c] token table in tokens mode, otherwise
    an [N, source_dim] matrix of per-node vectors.
    """
    dt = _param_dtype(params)
    valid = seq_ids >= 0
    safe = np.where(valid, seq_ids, 0)
    b, kp1 = safe.shape
    if flags.mode == "tokens":
        tok = np.asarray(source)[safe]                       # [B, k+1, c]
        flat = tok.astype(np.int64) + np.arange(cfg.c, dtype=np.int64) * C.codebook_size
        parts = [T.embedding_lookup(params["xt"], flat)]     # [B, k+1, c, d]
        if flags.use_aggregate:
            agg = codebook_aggregate(tok.reshape(-1, cfg.c), C)
            agg = Tensor(agg.reshape(b, kp1, 1, -1).astype(dt))
            if "proj.W" in params:
                agg = T.add(T.matmul(agg, params["proj.W"]), params["proj.b"])
            parts.append(agg)
        E = T.concat(parts, axis=2) if len(parts) > 1 else parts[0]
    else:
        rows = Tensor(np.asarray(source)[safe].astype(dt))   # [B, k+1, d_s]
        E = T.add(T.matmul(rows, params["embed.W"]), params["embed.b"])
        E = T.reshape(E, (b, kp1, 1, cfg.model_dim))
    m = tokens_per_position(cfg, flags)
    if flags.use_positional:
        pe = T.embedding_lookup(params["pe"], np.arange(kp1))
        E = T.add(E, T.reshape(pe, (1, kp1, 1, cfg.model_dim)))
        if flags.mode == "tokens":
            he = T.embedding_lookup(params["he"], np.arange(m))
            E = T.add(E, T.reshape(he, (1, 1, m, cfg.model_dim)))
    if not valid.all():
        E = T.mul(E, Tensor(valid.astype(dt).reshape(b, kp1, 1, 1)))
    return E


def embed_sequence(seq_ids_row: np.ndarray, token_table: np.ndarray,
                   C: CodebookSet, params: dict, cfg: TransformerConfig,
                   flags: ModelFlags = None) -> Tensor:
    """Single-node view: [(k+1)*m, d], node-major, level-minor."""
    flags = flags or ModelFlags()
    E = embed_positions(params, cfg, np.asarray(seq_ids_row)[None, :],
                        token_table, C, flags)
    m = tokens_per_position(cfg, flags)
    kp1 = len(seq_ids_row)
    return T.reshape(E, (kp1 * m, cfg.model_dim))


def apply_gating(embeds: Tensor, gating: np.ndarray) -> Tensor:
    """Scale each position's block of token rows by its gating weight."""
    gating = np.asarray(gating, dtype=embeds.data.dtype)
    rows = embeds.shape[0]
    if rows % gating.shape[0]:
        raise T.ShapeError(
            f"apply_gating: {rows} rows not divisible by {gating.shape[0]} positions"
        )
    m = rows // gating.shape[0]
    return T.mul(embeds, Tensor(np.repeat(gating, m)[:, None]))


def encoder_layer(H: Tensor, params: dict, prefix: str, cfg: TransformerConfig,
                  rng=None, key_mask: np.ndarray | None = None) -> Tensor:
    """One block: h <- LN2(MHA(LN1(h)) + h); h <- h + FFN(h)."""
    squeeze = H.ndim == 2
    if squeeze:
        H = T.reshape(H, (1,) + tuple(H.shape))
    b, L, d = H.shape
    nh = cfg.num_heads
    dh = d // nh
    a = T.layer_norm(H, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])

    def heads(x):
        return T.transpose(T.reshape(x, (b, L, nh, dh)), (0, 2, 1, 3))

    q = heads(T.matmul(a, params[f"{prefix}.attn.Wq"]))
    k = heads(T.matmul(a, params[f"{prefix}.attn.Wk"]))
    v = heads(T.matmul(a, params[f"{prefix}.attn.Wv"]))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if key_mask is not None:
        scores = T.add(scores, Tensor(key_mask.astype(scores.data.dtype)))
    probs = T.softmax(scores, axis=-1)
    probs = T.dropout(probs, cfg.dropout, rng)
    mixed = T.transpose(T.matmul(probs, v), (0, 2, 1, 3))
    mha = T.matmul(T.reshape(mixed, (b, L, d)), params[f"{prefix}.attn.Wo"])
    H = T.layer_norm(T.add(mha, H), params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    inner = T.relu(T.add(T.matmul(H, params[f"{prefix}.ffn.W1"]), params[f"{prefix}.ffn.b1"]))
    inner = T.dropout(inner, cfg.dropout, rng)
    ffn = T.add(T.matmul(inner, params[f"{prefix}.ffn.W2"]), params[f"{prefix}.ffn.b2"])
    H = T.add(H, ffn)
    return T.reshape(H, (L, d)) if squeeze else H


def pool_tokens(H: Tensor, m: int) -> Tensor:
    """Sum each position's m token rows: [..., (k+1)*m, d] -> [..., k+1, d]."""
    shape = H.shape
    if shape[-2] % m:
        raise T.ShapeError(f"pool_tokens: {shape[-2]} rows not divisible by m={m}")
    kp1 = shape[-2] // m
    return T.sum_(T.reshape(H, shape[:-2] + (kp1, m, shape[-1])), axis=-2)


def attention_readout(Hv: Tensor, W: Tensor) -> Tensor:
    """alpha_i = softmax_i(W . h_i); returns sum_i alpha_i h_i."""
    squeeze = Hv.ndim == 2
    if squeeze:
        Hv = T.reshape(Hv, (1,) + tuple(Hv.shape))
    scores = T.matmul(Hv, W)                      # [B, k+1, 1]
    alpha = T.softmax(scores, axis=1)
    out = T.sum_(T.mul(alpha, Hv), axis=1)        # [B, d]
    return T.reshape(out, (out.shape[-1],)) if squeeze else out


def classify(h: Tensor, params: dict) -> Tensor:
    return T.add(T.matmul(h, params["classifier.W"]), params["classifier.b"])


def model_forward(params: dict, cfg: TransformerConfig, seq_ids: np.ndarray,
                  gating: np.ndarray, source, C: CodebookSet | None = None,
                  flags: ModelFlags = None, rng=None) -> Tensor:
    """Full forward for a batch: embeddings -> encoder stack -> logits."""
    flags = flags or ModelFlags()
    seq_ids = np.asarray(seq_ids)
    E = embed_positions(params, cfg, seq_ids, source, C, flags)
    b, kp1, m, d = E.shape
    dt = E.data.dtype
    if flags.use_gating:
        g = np.asarray(gating, dtype=dt).reshape(b, kp1, 1, 1)
        E = T.mul(E, Tensor(g))
    H = T.reshape(E, (b, kp1 * m, d))
    valid = seq_ids >= 0
    key_mask = None
    if not valid.all():
        key_mask = np.where(np.repeat(valid, m, axis=1), 0.0, NEG_MASK)
        key_mask = key_mask.reshape(b, 1, 1, kp1 * m)
    for i in range(cfg.num_layers):
        H = encoder_layer(H, params, f"encoder.layer{i}", cfg, rng=rng,
                          key_mask=key_mask)
    pooled = pool_tokens(H, m)
    rep = attention_readout(pooled, params["readout.W"])
    return classify(rep, params)


def init_linear_params(d_in: int, num_classes: int, rng) -> dict[str, Tensor]:
    return {
        "linear.W": _glorot(rng, d_in, num_classes),
        "linear.b": T.parameter(np.zeros(num_classes)),
    }


def linear_forward(params: dict, Z: np.ndarray) -> Tensor:
    """Probe head over fixed per-node vectors (no sequence context)."""
    rows = Tensor(np.asarray(Z).astype(_param_dtype(params)))
    return T.add(T.matmul(rows, params["linear.W"]), params["linear.b"])
