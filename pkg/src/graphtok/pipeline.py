"""End-to-end stages: data, tokenizer training, serialization, classifier.

Every stage is a function of (config, out_dir, optional pre-built graph)
so tests can inject modified graphs (e.g. permuted labels). All
randomness flows from the single config seed through named sub-streams,
and artifacts are written in deterministic binary formats, so a repeated
run is byte-identical.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gnn as gnn_mod
from . import rvq as rvq_mod
from . import selfsup
from . import serialize as ser_mod
from . import tensor as T
from . import transformer as tfm
from .binio import MAGIC_CHECKPOINT, load_named_arrays, save_named_arrays
from .gnn import GnnConfig, decoder_config, encode, init_gnn_params
from .graphs import Graph, load_edge_list, make_sbm, stratified_split
from .optim import Adam
from .selfsup import SslConfig
from .serialize import SequenceSet, build_sequences, load_sequences, pca_project, save_sequences, semantic_edges
from .tensor import Tape, Tensor, precision, zero_grads
from .transformer import ModelFlags, TransformerConfig


class ConfigError(ValueError):
    """Bad config file or unknown key."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; message names the term."""


@dataclass
class DatasetConfig:
    source: str = "sbm"            # sbm | edgelist
    n: int = 400
    blocks: int = 4
    p_in: float = 0.2
    p_out: float = 0.01
    d_x: int = 16
    feature_shift: float = 2.0
    edge_path: str = ""
    feature_path: str = ""
    label_path: str = ""

    def __post_init__(self):
        if self.source not in ("sbm", "edgelist"):
            raise ConfigError(f"unknown dataset source {self.source!r}")


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    ssl: SslConfig = field(default_factory=SslConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    # quantizer
    num_codebooks: int = 3
    codebook_size: int = 16
    codebook_decay: float = 0.99
    commit_variant: str = "eq8"
    kmeans_iters: int = 25
    # serialization
    k_sem: int = 5
    k: int = 5
    alpha: float = 0.85
    ppr_tol: float = 1e-6
    ppr_max_iters: int = 1000
    pca_dim: int = 0               # 0 -> min(64, d_x)
    # optimization
    tokenizer_epochs: int = 200
    tokenizer_lr: float = 5e-3
    transformer_epochs: int = 200
    transformer_lr: float = 3e-3
    batch_size: int = 128
    patience: int = 50
    # component toggles
    use_tokenizer: bool = True
    use_rvq: bool = True
    use_dgi: bool = True
    use_gmae2: bool = True
    use_gating: bool = True
    use_semantic_edges: bool = True
    use_codebook_aggregate: bool = True
    use_positional_encoding: bool = True
    no_rvq_mode: str = "continuous"    # continuous | kmeans_post
    model_kind: str = "transformer"    # transformer | linear
    seed: int = 0


_GROUPS = {"dataset": DatasetConfig, "gnn": GnnConfig, "ssl": SslConfig,
           "transformer": TransformerConfig}


def _coerce(raw: str):
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw.strip("\"'")


def parse_config(text: str) -> RunConfig:
    """Flat `key = value` lines; dotted prefixes address sub-configs."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        values[key.strip()] = _coerce(raw.strip())
    return config_from_dict(values)


def config_from_dict(values: dict) -> RunConfig:
    groups: dict[str, dict] = {name: {} for name in _GROUPS}
    top = {}
    top_fields = {f.name for f in dataclasses.fields(RunConfig)} - set(_GROUPS)
    for key, value in values.items():
        if "." in key:
            group, _, fieldname = key.partition(".")
            if group not in _GROUPS:
                raise ConfigError(f"unknown config group {group!r} in key {key!r}")
            names = {f.name for f in dataclasses.fields(_GROUPS[group])}
            if fieldname not in names:
                raise ConfigError(f"unknown config key {key!r}")
            groups[group][fieldname] = value
        else:
            if key not in top_fields:
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = value
    return RunConfig(
        dataset=DatasetConfig(**groups["dataset"]),
        gnn=GnnConfig(**groups["gnn"]),
        ssl=SslConfig(**groups["ssl"]),
        transformer=TransformerConfig(**groups["transformer"]),
        **top,
    )


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def clone_config(cfg: RunConfig, **overrides) -> RunConfig:
    return replace(cfg, dataset=replace(cfg.dataset), gnn=replace(cfg.gnn),
                   ssl=replace(cfg.ssl), transformer=replace(cfg.transformer),
                   **overrides)


# Component toggles per ablation row; "full" is the complete model.
ABLATIONS: dict[str, dict] = {
    "tokens_linear": dict(model_kind="linear"),
    "features_transformer": dict(use_tokenizer=False, use_rvq=False,
                                 use_dgi=False, use_gmae2=False,
                                 use_codebook_aggregate=False, use_gating=False,
                                 use_semantic_edges=False),
    "no_quantizer": dict(use_rvq=False),
    "no_masked_autoencoder": dict(use_gmae2=False),
    "no_contrastive": dict(use_dgi=False),
    "no_codebook_aggregate": dict(use_codebook_aggregate=False),
    "no_positional": dict(use_positional_encoding=False),
    "no_gating": dict(use_gating=False),
    "no_semantic_edges": dict(use_semantic_edges=False),
    "full": dict(),
}


def apply_ablation(cfg: RunConfig, name: str) -> RunConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; options: {sorted(ABLATIONS)}")
    return clone_config(cfg, **ABLATIONS[name])


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Independent deterministic stream per (seed, stage name)."""
    return np.random.default_rng([seed, zlib.crc32(stage.encode())])


def load_dataset(cfg: RunConfig) -> Graph:
    d = cfg.dataset
    if d.source == "sbm":
        return make_sbm(d.n, d.blocks, d.p_in, d.p_out, d.d_x, d.feature_shift,
                        seed=cfg.seed)
    g = load_edge_list(d.edge_path, d.feature_path, d.label_path or None)
    labeled = np.flatnonzero(g.labels >= 0)
    if labeled.size:
        sub_train, sub_valid, sub_test = stratified_split(
            g.labels[labeled], (0.6, 0.2, 0.2), stage_rng(cfg.seed, "split"))
        g.train_mask[labeled[sub_train]] = True
        g.valid_mask[labeled[sub_valid]] = True
        g.test_mask[labeled[sub_test]] = True
    return g


def save_checkpoint(path, params: dict[str, Tensor],
                    extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = {name: p.data for name, p in params.items()}
    if extra:
        arrays.update(extra)
    save_named_arrays(path, MAGIC_CHECKPOINT, arrays)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return load_named_arrays(path, MAGIC_CHECKPOINT)


def params_from_arrays(arrays: dict[str, np.ndarray],
                       skip_prefix: str = "teacher.") -> dict[str, Tensor]:
    return {name: Tensor(arr.copy(), requires_grad=True)
            for name, arr in arrays.items() if not name.startswith(skip_prefix)}


def _check_finite(term: str, value: Tensor, epoch: int) -> None:
    if not np.isfinite(value.data).all():
        raise DivergenceError(f"{term} loss non-finite at epoch {epoch}")


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.data = snap[k].copy()


def _quantized(H, C, variant):
    _, Z, _ = rvq_mod.rvq_batch(H, C, variant)
    return Z


def train_tokenizer(cfg: RunConfig, out_dir, graph: Graph | None = None) -> dict:
    """Self-supervised encoder + codebook training; writes all artifacts.

    Returns the in-memory artifacts. With the tokenizer disabled, this
    is a no-op stage. With quantization disabled, either continuous
    embeddings are saved or a 1-level K-means codebook substitutes,
    depending on no_rvq_mode.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not cfg.use_tokenizer:
        return {}
    if graph is None:
        graph = load_dataset(cfg)
    with precision(np.float32):
        X = graph.features.astype(np.float32)
        d_x = X.shape[1]
        hid = cfg.gnn.hidden_dim
        rng_init = stage_rng(cfg.seed, "tokenizer-init")
        rng_train = stage_rng(cfg.seed, "tokenizer-train")
        params = init_gnn_params(cfg.gnn, d_x, hid, rng_init, prefix="gnn")
        dec_cfg = None
        if cfg.use_gmae2:
            dec_cfg = decoder_config(cfg.gnn)
            params.update(init_gnn_params(dec_cfg, hid, d_x, rng_init, prefix="decoder"))
            params["mask_token"] = T.parameter(np.zeros(d_x))
        if cfg.use_dgi:
            s = np.sqrt(6.0 / (2 * hid))
            params["dgi.W"] = T.parameter(rng_init.uniform(-s, s, size=(hid, hid)))
        teacher = None
        if cfg.use_gmae2:
            teacher = selfsup.init_teacher(
                {k: v for k, v in params.items() if k.startswith("gnn.")})
        opt = Adam(params, lr=cfg.tokenizer_lr)

        C = None
        if cfg.use_rvq:
            H0 = encode(graph, cfg.gnn, params, X)
            C = rvq_mod.init_codebooks(H0.data, cfg.num_codebooks, cfg.codebook_size,
                                       decay=cfg.codebook_decay, iters=cfg.kmeans_iters,
                                       seed=stage_rng(cfg.seed, "kmeans"))
        quantize = cfg.use_rvq and cfg.ssl.losses_on == "quantized"
        curve = []
        for epoch in range(cfg.tokenizer_epochs):
            with Tape() as tape:
                H = encode(graph, cfg.gnn, params, X, rng=rng_train)
                tokens = Z = commit = None
                if cfg.use_rvq:
                    tokens, Z, commit = rvq_mod.rvq_batch(H, C, cfg.commit_variant)
                rep = Z if quantize else H
                l_dgi = l_gmae = None
                if cfg.use_dgi:
                    Xc = selfsup.corrupt_features(X, rng_train)
                    Hc = encode(graph, cfg.gnn, params, Xc, rng=rng_train)
                    rep_c = _quantized(Hc, C, cfg.commit_variant) if quantize else Hc
                    l_dgi = selfsup.dgi_loss(rep, rep_c, params["dgi.W"])
                    _check_finite("dgi", l_dgi, epoch)
                if cfg.use_gmae2:
                    Xm, mask_idx = selfsup.mask_nodes(X, cfg.ssl.mask_rate, rng_train,
                                                      params["mask_token"])
                    Hm = encode(graph, cfg.gnn, params, Xm, rng=rng_train)
                    rep_m = _quantized(Hm, C, cfg.commit_variant) if quantize else Hm
                    decoded = encode(graph, dec_cfg, params, rep_m, rng=rng_train,
                                     prefix="decoder")
                    teacher_params = {k: Tensor(v) for k, v in teacher.items()}
                    Ht = encode(graph, cfg.gnn, teacher_params, X)
                    l_gmae = selfsup.gmae2_loss(X, decoded, rep_m, Ht.data, mask_idx,
                                                cfg.ssl.gamma, cfg.ssl.lam)
                    _check_finite("gmae2", l_gmae, epoch)
                if commit is not None:
                    _check_finite("commit", commit, epoch)
                total = selfsup.tokenizer_total_loss(l_dgi, l_gmae, commit, cfg.ssl.beta)
                _check_finite("total", total, epoch)
            zero_grads(params)
            tape.backward(total)
            opt.step()
            if teacher is not None:
                selfsup.update_teacher(teacher, {k: params[k] for k in teacher},
                                       cfg.ssl.teacher_decay)
            if cfg.use_rvq:
                rvq_mod.ema_update(C, H.data, tokens)
                rvq_mod.reseed_dead_codes(C, H.data, rng_train)
            curve.append(float(total.data))

        # Final deterministic eval-mode pass defines the persisted artifacts.
        H_final = encode(graph, cfg.gnn, params, X)
        artifacts: dict = {"params": params, "graph": graph, "loss_curve": curve}
        extra = {f"teacher.{k}": v for k, v in (teacher or {}).items()}
        save_checkpoint(out_dir / "tokenizer.ckpt", params, extra)
        if cfg.use_rvq:
            tokens_final, _ = rvq_mod.assign_tokens(H_final.data, C)
            rvq_mod.save_codebooks(out_dir / "codebooks.bin", C)
            rvq_mod.save_tokens(out_dir / "tokens.bin", tokens_final)
            artifacts.update(codebooks=C, tokens=tokens_final)
        elif cfg.no_rvq_mode == "kmeans_post":
            C = rvq_mod.init_codebooks(H_final.data, 1, cfg.codebook_size,
                                       decay=cfg.codebook_decay, iters=cfg.kmeans_iters,
                                       seed=stage_rng(cfg.seed, "kmeans"))
            tokens_final, _ = rvq_mod.assign_tokens(H_final.data, C)
            rvq_mod.save_codebooks(out_dir / "codebooks.bin", C)
            rvq_mod.save_tokens(out_dir / "tokens.bin", tokens_final)
            artifacts.update(codebooks=C, tokens=tokens_final)
        else:
            save_named_arrays(out_dir / "embeddings.ckpt", MAGIC_CHECKPOINT,
                              {"embeddings": H_final.data})
            artifacts.update(embeddings=H_final.data)
        _write_curve(out_dir / "losses_tokenizer.kv", curve)
    return artifacts


def tokenize(cfg: RunConfig, out_dir, graph: Graph | None = None) -> np.ndarray:
    """Eval-mode forward plus assignment using saved artifacts only."""
    out_dir = Path(out_dir)
    if graph is None:
        graph = load_dataset(cfg)
    arrays = load_checkpoint(out_dir / "tokenizer.ckpt")
    params = params_from_arrays(arrays)
    C = rvq_mod.load_codebooks(out_dir / "codebooks.bin")
    X = graph.features.astype(np.float32)
    if params["gnn.layer0.b"].data.dtype == np.float64:
        X = graph.features.astype(np.float64)
    H = encode(graph, cfg.gnn, params, X)
    if H.shape[1] != C.code_dim:
        raise ValueError(
            f"encoder output dim {H.shape[1]} != codebook dim {C.code_dim}")
    tokens, _ = rvq_mod.assign_tokens(H.data, C)
    rvq_mod.save_tokens(out_dir / "tokens.bin", tokens)
    return tokens


def serialize_graph(cfg: RunConfig, out_dir, graph: Graph | None = None):
    """PCA -> semantic KNN (optional) -> PPR sequences; writes the file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if graph is None:
        graph = load_dataset(cfg)
    sem = None
    if cfg.use_semantic_edges and cfg.k_sem > 0:
        d_x = graph.features.shape[1]
        pca_dim = cfg.pca_dim or min(64, d_x)
        pca_dim = min(pca_dim, graph.num_nodes, d_x)
        projected = pca_project(graph.features, pca_dim)
        sem = semantic_edges(projected, cfg.k_sem)
    seq, ppr_res = build_sequences(graph, sem, cfg.k, alpha=cfg.alpha,
                                   tol=cfg.ppr_tol, max_iters=cfg.ppr_max_iters)
    save_sequences(out_dir / "sequences.bin", seq, num_levels=cfg.num_codebooks)
    return seq, ppr_res, sem


def _model_mode(cfg: RunConfig) -> str:
    if cfg.model_kind == "linear":
        return "linear"
    if not cfg.use_tokenizer:
        return "features"
    if not cfg.use_rvq and cfg.no_rvq_mode == "continuous":
        return "continuous"
    return "tokens"


def _load_source(cfg: RunConfig, graph: Graph, out_dir: Path):
    """Returns (mode, source matrix, CodebookSet-or-None, source_dim, K)."""
    mode = _model_mode(cfg)
    if mode in ("tokens", "linear"):
        tokens = rvq_mod.load_tokens(out_dir / "tokens.bin")
        C = rvq_mod.load_codebooks(out_dir / "codebooks.bin")
        if mode == "linear":
            Z = rvq_mod.codebook_aggregate(tokens, C)
            return mode, Z, C, Z.shape[1], C.codebook_size
        return mode, tokens, C, C.code_dim, C.codebook_size
    if mode == "continuous":
        emb = load_named_arrays(out_dir / "embeddings.ckpt", MAGIC_CHECKPOINT)["embeddings"]
        return mode, emb, None, emb.shape[1], 1
    return mode, graph.features.astype(np.float32), None, graph.features.shape[1], 1


def _model_flags(cfg: RunConfig, mode: str) -> ModelFlags:
    return ModelFlags(mode=mode, use_gating=cfg.use_gating,
                      use_positional=cfg.use_positional_encoding,
                      use_aggregate=cfg.use_codebook_aggregate)


def _effective_tfm_config(cfg: RunConfig, seq: SequenceSet | None, mode: str,
                          num_classes: int, source) -> TransformerConfig:
    c = source.shape[1] if mode == "tokens" else 1
    k = seq.k if seq is not None else cfg.k
    return replace(cfg.transformer, c=c, k=k, num_classes=num_classes)


def _batched_logits(forward, indices: np.ndarray, batch_size: int) -> np.ndarray:
    outs = []
    for start in range(0, indices.size, batch_size):
        logits = forward(indices[start : start + batch_size])
        outs.append(logits.data)
    return np.concatenate(outs, axis=0)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def roc_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Rank-statistic AUC; ties get midranks."""
    labels = np.asarray(labels)
    scores = np.asarray(scores)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    ranks[order] = np.arange(1, scores.size + 1)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def train_transformer(cfg: RunConfig, out_dir, graph: Graph | None = None) -> dict:
    """Supervised stage over frozen artifacts; best-valid checkpointing."""
    out_dir = Path(out_dir)
    if graph is None:
        graph = load_dataset(cfg)
    labels = graph.labels
    num_classes = int(labels[labels >= 0].max()) + 1
    mode, source, C, source_dim, K = _load_source(cfg, graph, out_dir)
    seq = None
    if mode != "linear":
        seq = load_sequences(out_dir / "sequences.bin")
    flags = _model_flags(cfg, mode)
    eff = _effective_tfm_config(cfg, seq, mode, num_classes, source)
    with precision(np.float32):
        rng_init = stage_rng(cfg.seed, "transformer-init")
        rng_train = stage_rng(cfg.seed, "transformer-train")
        if mode == "linear":
            params = tfm.init_linear_params(source_dim, num_classes, rng_init)
        else:
            params = tfm.init_transformer_params(eff, K, source_dim, rng_init, flags)
        opt = Adam(params, lr=cfg.transformer_lr)

        def forward(idx, rng=None):
            if mode == "linear":
                return tfm.linear_forward(params, source[idx])
            return tfm.model_forward(params, eff, seq.ids[idx], seq.gating[idx],
                                     source, C, flags, rng=rng)

        train_idx = np.flatnonzero(graph.train_mask)
        valid_idx = np.flatnonzero(graph.valid_mask)
        best_acc, best_snap, best_epoch, stale = -1.0, _snapshot(params), -1, 0
        curve = []
        for epoch in range(cfg.transformer_epochs):
            perm = rng_train.permutation(train_idx.size)
            epoch_loss = 0.0
            for start in range(0, train_idx.size, cfg.batch_size):
                batch = train_idx[perm[start : start + cfg.batch_size]]
                with Tape() as tape:
                    logits = forward(batch, rng=rng_train)
                    loss = T.cross_entropy_with_logits(logits, labels[batch])
                _check_finite("cross_entropy", loss, epoch)
                zero_grads(params)
                tape.backward(loss)
                opt.step()
                epoch_loss += float(loss.data) * batch.size
            curve.append(epoch_loss / train_idx.size)
            val_logits = _batched_logits(forward, valid_idx, cfg.batch_size)
            val_acc = accuracy(val_logits, labels[valid_idx])
            if val_acc > best_acc:
                best_acc, best_snap, best_epoch, stale = val_acc, _snapshot(params), epoch, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        _restore(params, best_snap)
        save_checkpoint(out_dir / "model.ckpt", params)
        _write_curve(out_dir / "losses_transformer.kv", curve)
    return {"params": params, "best_valid_acc": best_acc, "best_epoch": best_epoch,
            "loss_curve": curve}


def evaluate(cfg: RunConfig, out_dir, split: str = "test",
             graph: Graph | None = None) -> dict:
    """Accuracy (and binary AUC) on a mask; never re-runs the encoder."""
    out_dir = Path(out_dir)
    if graph is None:
        graph = load_dataset(cfg)
    mask = {"train": graph.train_mask, "valid": graph.valid_mask,
            "test": graph.test_mask}[split]
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError(f"empty {split} mask")
    labels = graph.labels
    num_classes = int(labels[labels >= 0].max()) + 1
    mode, source, C, source_dim, K = _load_source(cfg, graph, out_dir)
    seq = None
    if mode != "linear":
        seq = load_sequences(out_dir / "sequences.bin")
    flags = _model_flags(cfg, mode)
    eff = _effective_tfm_config(cfg, seq, mode, num_classes, source)
    params = params_from_arrays(load_checkpoint(out_dir / "model.ckpt"))

    encoder_runs_before = gnn_mod.ENCODE_CALLS

    def forward(batch):
        if mode == "linear":
            return tfm.linear_forward(params, source[batch])
        return tfm.model_forward(params, eff, seq.ids[batch], seq.gating[batch],
                                 source, C, flags)

    logits = _batched_logits(forward, idx, cfg.batch_size)
    if gnn_mod.ENCODE_CALLS != encoder_runs_before:
        raise AssertionError("evaluation invoked the graph encoder")
    metrics = {"split": split, "num_eval_nodes": int(idx.size),
               "accuracy": accuracy(logits, labels[idx])}
    if num_classes == 2:
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        metrics["roc_auc"] = roc_auc(labels[idx], probs[:, 1])
    write_metrics(out_dir / "metrics.kv", metrics)
    return metrics


def run_all(cfg: RunConfig, out_dir, graph: Graph | None = None) -> dict:
    """Tokenizer -> serialization -> classifier -> test metrics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if graph is None:
        graph = load_dataset(cfg)
    train_tokenizer(cfg, out_dir, graph=graph)
    if _model_mode(cfg) != "linear":
        serialize_graph(cfg, out_dir, graph=graph)
    fit = train_transformer(cfg, out_dir, graph=graph)
    metrics = evaluate(cfg, out_dir, split="test", graph=graph)
    metrics["best_valid_acc"] = fit["best_valid_acc"]
    metrics["seed"] = cfg.seed
    write_metrics(out_dir / "metrics.kv", metrics)
    return metrics


def memory_report_stats(N: int, d_x: int, c: int, K: int, d_c: int,
                        bytes_per_float: int = 4, bytes_per_index: int = 4) -> dict:
    """Both accountings: with and without codebook storage."""
    with_books = rvq_mod.memory_report(N, d_x, c, K, d_c, bytes_per_float,
                                       bytes_per_index, include_codebooks=True)
    tokens_only = rvq_mod.memory_report(N, d_x, c, K, d_c, bytes_per_float,
                                        bytes_per_index, include_codebooks=False)
    return {"N": N, "d_x": d_x, "c": c, "K": K, "d_c": d_c,
            "ratio_with_codebooks": with_books, "ratio_tokens_only": tokens_only}


def format_metrics(metrics: dict) -> str:
    width = max(len(k) for k in metrics)
    lines = [f"{k.ljust(width)}  {_fmt(v)}" for k, v in metrics.items()]
    return "\n".join(lines)


def metrics_kv_lines(metrics: dict) -> str:
    return "\n".join(f"{k}={_fmt(v)}" for k, v in metrics.items())


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def write_metrics(path, metrics: dict) -> None:
    Path(path).write_text(metrics_kv_lines(metrics) + "\n")


def _write_curve(path, curve: list[float]) -> None:
    lines = [f"epoch={i} loss={v:.6g}" for i, v in enumerate(curve)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
