"""Request and response bodies shared by the HTTP service and the CLI."""

from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field

from .pipeline import RunConfig, build_config


class _Body(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RunRequest(_Body):
    """A config document plus flag overrides; overrides take precedence."""

    config: dict[str, Any] = Field(default_factory=dict)
    overrides: dict[str, Any] = Field(default_factory=dict)

    def run_config(self) -> RunConfig:
        return build_config(self.config, self.overrides)


class TrainRequest(RunRequest):
    pass


class ExtractRequest(RunRequest):
    pass


class QueryRequest(RunRequest):
    mode: Literal["dot", "influence", "l_relatif", "cosine"] = "l_relatif"
    k: int = Field(10, ge=0)
    test_ids: list[int] | None = None
    train_ids: list[int] | None = None
    workers: int = Field(1, ge=1)
    output: str | None = None


class EvalRequest(RunRequest):
    methods: list[str] | None = None
    output_dir: str | None = None


class TrainResponse(_Body):
    checkpoint: str
    sha256: str
    train_loss: float
    parameters: int


class ExtractResponse(_Body):
    store: str
    records: int
    dim: int
    fingerprint: str
    damping: dict[str, float]


class Hit(_Body):
    train_id: int
    score: float


class QueryResponse(_Body):
    mode: str
    k: int
    queries: list[int]
    results: list[list[Hit]]
    report: str


class EvalResponse(_Body):
    summary: dict[str, Any]


class InspectResponse(_Body):
    header: dict[str, Any]


class ErrorResponse(_Body):
    error_kind: str
    message: str
    exit_code: int
