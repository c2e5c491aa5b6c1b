"""FastAPI application: thin HTTP handlers over the pipeline commands."""

from __future__ import annotations

import os

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..errors import Bankrupt, BlagentError, DivergenceDetected, InputError
from ..runconfig import RunConfig
from . import schemas


def exit_code_for(exc: BlagentError) -> int:
    """Process exit code and severity class for a domain error."""
    if isinstance(exc, DivergenceDetected):
        return 3
    if isinstance(exc, Bankrupt):
        return 4
    return 2  # bad inputs, bad shapes, bad files


def _config(model: schemas.ConfigModel) -> RunConfig:
    return RunConfig.from_mapping(model.model_dump())


def create_app() -> FastAPI:
    app = FastAPI(title="blagent", version=__version__)

    @app.exception_handler(BlagentError)
    def domain_error(_request, exc: BlagentError):
        code = exit_code_for(exc)
        status = 422 if code == 2 else 500
        body = schemas.ErrorBody(error=type(exc).__name__, message=str(exc),
                                 exit_code=code)
        return JSONResponse(status_code=status, content=body.model_dump())

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/ingest", response_model=schemas.IngestResponse)
    def ingest(req: schemas.IngestRequest):
        return pipeline.ingest(_config(req.config))

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        return pipeline.train_run(_config(req.config))

    @app.post("/backtest", response_model=schemas.BacktestResponse)
    def backtest(req: schemas.BacktestRequest):
        reports = pipeline.backtest_run(_config(req.config),
                                        checkpoint=req.checkpoint,
                                        baselines_only=req.baselines_only)
        return schemas.BacktestResponse(
            reports=[schemas.StrategyReport(**r) for r in reports])

    @app.post("/report", response_model=schemas.ReportResponse)
    def report(req: schemas.ReportRequest):
        cfg = _config(req.config)
        rows = pipeline.report_run(cfg)
        return schemas.ReportResponse(
            rows=[schemas.StrategyReport(**r) for r in rows],
            csv=os.path.join(cfg.run.output_dir, "report.csv"))

    return app
