"""Request/response bodies for the HTTP service.

The config models mirror the INI sections field for field (a parity test
keeps them honest), so a client can send exactly what it would have put
in the file.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class DataModel(BaseModel):
    source: str = "prices.csv"
    cache: str = "panel.npz"
    universe: list[str] = Field(default_factory=list)


class GridModel(BaseModel):
    periods_window: int = 50
    days_per_period: int = 5


class CostsModel(BaseModel):
    commission_rate: float = 0.0005
    cash_lending_rate_annual: float = 0.03
    stock_lending_rate_annual: float = 0.03
    days_per_year: int = 252


class TrainModel(BaseModel):
    lambda1: float = 0.2
    lambda2: float = 0.002
    lambda3: float = 1.0
    learning_rate: float = 1e-05
    minibatch: int = 128
    target_step: int = 1080
    total_steps: int = 300000
    clip_norm: float | None = 1000.0


class PolicyModel(BaseModel):
    depth: int = 6
    head_hidden: int = 3712
    tau: float = 1.0
    attn_scale: float = 1.0
    mlp_hidden: int | None = None


class AblationModel(BaseModel):
    positional_encoding: bool = False
    maximize_rho: bool = False
    softmax_head: bool = False
    one_day_period: bool = False


class WindowsModel(BaseModel):
    train_start: str = "2018-01-01"
    train_end: str = "2020-12-31"
    backtest_start: str = "2021-01-01"
    backtest_days: int = 120


class RunModel(BaseModel):
    seed: int = 0
    output_dir: str = "runs"
    initial_amount: float = 100000000.0


class ConfigModel(BaseModel):
    data: DataModel = Field(default_factory=DataModel)
    grid: GridModel = Field(default_factory=GridModel)
    costs: CostsModel = Field(default_factory=CostsModel)
    train: TrainModel = Field(default_factory=TrainModel)
    policy: PolicyModel = Field(default_factory=PolicyModel)
    ablation: AblationModel = Field(default_factory=AblationModel)
    windows: WindowsModel = Field(default_factory=WindowsModel)
    run: RunModel = Field(default_factory=RunModel)


class IngestRequest(BaseModel):
    config: ConfigModel = Field(default_factory=ConfigModel)


class IngestResponse(BaseModel):
    tickers: int
    days: int
    start: str
    end: str
    data_hash: str
    cache: str


class TrainRequest(BaseModel):
    config: ConfigModel = Field(default_factory=ConfigModel)


class TrainResponse(BaseModel):
    variant: str
    stages: int
    steps: int
    OP: float | None
    EF: float | None
    AR_tr: float | None
    ARD_tr: float | None
    trace: str
    checkpoint: str


class BacktestRequest(BaseModel):
    config: ConfigModel = Field(default_factory=ConfigModel)
    checkpoint: str | None = None
    baselines_only: bool = False


class StrategyReport(BaseModel):
    name: str
    AR: float
    DR: float
    Std: float
    SR: float
    LStd: float
    STR: float
    flags: list[str] = Field(default_factory=list)


class BacktestResponse(BaseModel):
    reports: list[StrategyReport]


class ReportRequest(BaseModel):
    config: ConfigModel = Field(default_factory=ConfigModel)


class ReportResponse(BaseModel):
    rows: list[StrategyReport]
    csv: str


class HealthResponse(BaseModel):
    status: str
    version: str


class ErrorBody(BaseModel):
    error: str
    message: str
    exit_code: int
