"""Request/response bodies for the stage-runner service.

Validation of the actual run parameters lives in the core config
dataclasses; these models only shape the HTTP envelope.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class StageRequest(BaseModel):
    """Common body for every stage endpoint.

    Either an inline config document or a server-local config path may
    be given; with neither, defaults apply. `seed` overrides the config.
    """

    config_text: str | None = None
    config_path: str | None = None
    out_dir: str
    seed: int | None = None


class EvalRequest(StageRequest):
    split: str = Field(default="test", pattern="^(train|valid|test)$")


class StageResponse(BaseModel):
    status: str = "ok"
    summary: dict[str, float | int | str] = {}


class MetricsResponse(BaseModel):
    status: str = "ok"
    metrics: dict[str, float | int | str]


class MemoryReportRequest(BaseModel):
    num_nodes: int
    feature_dim: int
    num_codebooks: int
    codebook_size: int
    code_dim: int
    bytes_per_float: int = 4
    bytes_per_index: int = 4


class HealthResponse(BaseModel):
    status: str
    version: str
