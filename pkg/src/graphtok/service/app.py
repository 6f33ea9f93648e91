"""FastAPI app exposing each pipeline stage as a POST endpoint.

Stages mutate the out_dir on the server's filesystem; a process-wide
lock serializes them since training holds substantial memory and the
artifacts are directory-scoped.
"""

from __future__ import annotations

import threading

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..binio import FormatError
from ..graphs import ParseError
from ..pipeline import (
    ConfigError,
    DivergenceError,
    RunConfig,
    clone_config,
    evaluate,
    load_config,
    memory_report_stats,
    parse_config,
    run_all,
    serialize_graph,
    tokenize,
    train_tokenizer,
    train_transformer,
)
from .schemas import (
    EvalRequest,
    HealthResponse,
    MemoryReportRequest,
    MetricsResponse,
    StageRequest,
    StageResponse,
)

app = FastAPI(title="graphtok", version=__version__)

_stage_lock = threading.Lock()

_CLIENT_ERRORS = (ConfigError, ParseError, FormatError, FileNotFoundError,
                  ValueError, IndexError, KeyError)


def _config_for(req: StageRequest) -> RunConfig:
    try:
        if req.config_text is not None:
            cfg = parse_config(req.config_text)
        elif req.config_path is not None:
            cfg = load_config(req.config_path)
        else:
            cfg = RunConfig()
    except _CLIENT_ERRORS as exc:
        raise HTTPException(status_code=400, detail=f"{type(exc).__name__}: {exc}")
    if req.seed is not None:
        cfg = clone_config(cfg, seed=req.seed)
    return cfg


def _execute(fn):
    with _stage_lock:
        try:
            return fn()
        except DivergenceError as exc:
            raise HTTPException(status_code=500, detail=f"DivergenceError: {exc}")
        except _CLIENT_ERRORS as exc:
            raise HTTPException(status_code=400, detail=f"{type(exc).__name__}: {exc}")


def _plain(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if hasattr(v, "item"):
            v = v.item()
        out[k] = v
    return out


@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


@app.post("/train-tokenizer", response_model=StageResponse)
def api_train_tokenizer(req: StageRequest) -> StageResponse:
    cfg = _config_for(req)
    artifacts = _execute(lambda: train_tokenizer(cfg, req.out_dir))
    if not artifacts:
        return StageResponse(summary={"skipped": "tokenizer disabled by config"})
    curve = artifacts.get("loss_curve", [])
    summary = {"epochs": len(curve)}
    if curve:
        summary.update(loss_first=float(curve[0]), loss_last=float(curve[-1]))
    return StageResponse(summary=summary)


@app.post("/tokenize", response_model=StageResponse)
def api_tokenize(req: StageRequest) -> StageResponse:
    cfg = _config_for(req)
    tokens = _execute(lambda: tokenize(cfg, req.out_dir))
    return StageResponse(summary={"num_nodes": int(tokens.shape[0]),
                                  "num_levels": int(tokens.shape[1])})


@app.post("/serialize", response_model=StageResponse)
def api_serialize(req: StageRequest) -> StageResponse:
    cfg = _config_for(req)
    seq, ppr_res, sem = _execute(lambda: serialize_graph(cfg, req.out_dir))
    summary = {
        "num_nodes": int(seq.ids.shape[0]),
        "k": int(seq.k),
        "mean_ppr_iterations": float(ppr_res.iterations.mean()),
        "converged_fraction": float(ppr_res.converged.mean()),
        "num_semantic_edges": int(sem.src.size) if sem is not None else 0,
    }
    return StageResponse(summary=summary)


@app.post("/train-transformer", response_model=StageResponse)
def api_train_transformer(req: StageRequest) -> StageResponse:
    cfg = _config_for(req)
    fit = _execute(lambda: train_transformer(cfg, req.out_dir))
    return StageResponse(summary={
        "best_valid_acc": float(fit["best_valid_acc"]),
        "best_epoch": int(fit["best_epoch"]),
        "epochs_run": len(fit["loss_curve"]),
    })


@app.post("/eval", response_model=MetricsResponse)
def api_eval(req: EvalRequest) -> MetricsResponse:
    cfg = _config_for(req)
    metrics = _execute(lambda: evaluate(cfg, req.out_dir, split=req.split))
    return MetricsResponse(metrics=_plain(metrics))


@app.post("/run-all", response_model=MetricsResponse)
def api_run_all(req: StageRequest) -> MetricsResponse:
    cfg = _config_for(req)
    metrics = _execute(lambda: run_all(cfg, req.out_dir))
    return MetricsResponse(metrics=_plain(metrics))


@app.post("/memory-report", response_model=MetricsResponse)
def api_memory_report(req: MemoryReportRequest) -> MetricsResponse:
    stats = _execute(lambda: memory_report_stats(
        req.num_nodes, req.feature_dim, req.num_codebooks, req.codebook_size,
        req.code_dim, req.bytes_per_float, req.bytes_per_index))
    return MetricsResponse(metrics=_plain(stats))
