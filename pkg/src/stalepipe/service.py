"""HTTP service exposing the four run commands.

Each endpoint accepts the same flat dotted-key configuration map the config
files use, plus per-request overrides, and returns a typed response. Runs
execute synchronously in the request (they are desk-scale); artifacts are
written under the requested output directory on the service host. The CLI is
a thin client of this app, by default over an in-process transport.
"""

from __future__ import annotations

import tempfile

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import runners
from .config import ConfigParseError, RunConfig
from .pipeline import ConfigError, DeadlockError
from .tensor import NonFiniteError, ShapeError


class CommandRequest(BaseModel):
    config: dict[str, str] = Field(default_factory=dict)
    overrides: dict[str, str] = Field(default_factory=dict)
    out_dir: str | None = None

    def build(self) -> RunConfig:
        merged = dict(self.config)
        merged.update(self.overrides)
        return RunConfig(merged)


class ValidateResponse(BaseModel):
    k: int
    p: list[int]
    m: list[int]
    q: list[int]
    staleness: list[int]
    max_staleness: int
    warmup: str


class EpochRow(BaseModel):
    epoch: int
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float
    wall_time_s: float


class TrainResponse(BaseModel):
    steps: int
    epochs: int
    records: int
    checksum: str
    final_train_loss: float | None = None
    final_train_accuracy: float | None = None
    lemma_holds_fraction: float | None = None
    epoch_rows: list[EpochRow]
    artifacts: dict[str, str]


class GradcheckResponse(BaseModel):
    cases: int
    max_rel_err_fd: float
    max_reduction_diff: float
    passed: bool


class ComparisonRow(BaseModel):
    schedule: str
    rho: float
    median_slowdown_pct: float
    clean_makespan: float
    seeds: int


class SimulateResponse(BaseModel):
    k: int
    n_steps: int
    schedule: str | None = None
    makespan: float | None = None
    steady_interval: float | None = None
    comparison: list[ComparisonRow] | None = None
    artifacts: dict[str, str]


class HealthResponse(BaseModel):
    status: str
    version: str


def _out_dir(req: CommandRequest) -> str:
    return req.out_dir or tempfile.mkdtemp(prefix="stalepipe-")


_CLIENT_ERRORS = (ConfigError, ConfigParseError, ShapeError, ValueError)


def create_app() -> FastAPI:
    from . import __version__

    app = FastAPI(title="stalepipe", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/validate", response_model=ValidateResponse)
    def validate(req: CommandRequest) -> ValidateResponse:
        try:
            return ValidateResponse(**runners.run_validate(req.build()))
        except _CLIENT_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.post("/train", response_model=TrainResponse)
    def train(req: CommandRequest) -> TrainResponse:
        try:
            result = runners.run_train(req.build(), _out_dir(req))
        except _CLIENT_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        except (NonFiniteError, DeadlockError) as exc:
            raise HTTPException(status_code=500, detail=str(exc)) from exc
        rows = [EpochRow(**row) for row in result.pop("epoch_rows")]
        return TrainResponse(epoch_rows=rows, **result)

    @app.post("/gradcheck", response_model=GradcheckResponse)
    def gradcheck(req: CommandRequest) -> GradcheckResponse:
        try:
            return GradcheckResponse(**runners.run_gradcheck(req.build()))
        except _CLIENT_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.post("/simulate", response_model=SimulateResponse)
    def simulate(req: CommandRequest) -> SimulateResponse:
        try:
            result = runners.run_simulate(req.build(), _out_dir(req))
        except _CLIENT_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        comparison = result.pop("comparison", None)
        if comparison is not None:
            result["comparison"] = [ComparisonRow(**row) for row in comparison]
        return SimulateResponse(**result)

    return app


app = create_app()
