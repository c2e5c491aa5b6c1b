"""Price ingestion, universe alignment, period partitioning, and agent states.

The timeline convention used everywhere downstream: a price panel with D
trading days yields D-1 daily log-return rows; return row r compares day
r+1 against day r. Trading periods tile the return rows in blocks of K,
so period t covers return rows [t*K, (t+1)*K). The execution price for
period t is the close of day t*K (the last day of period t-1) and the
period's daily marks are the closes of days t*K+1 .. t*K+K.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import (
    EmptySeries,
    InputError,
    InsufficientHistory,
    MissingTicker,
    NonPositivePrice,
)


@dataclass
class PricePanel:
    """Aligned adjusted-close prices: one row per trading day, one column per asset."""

    tickers: list
    dates: list
    prices: np.ndarray  # D x n, strictly positive

    def __post_init__(self):
        self.prices = np.asarray(self.prices, dtype=np.float64)
        if self.prices.ndim != 2 or self.prices.shape != (len(self.dates), len(self.tickers)):
            raise InputError(
                f"price matrix {self.prices.shape} does not match "
                f"{len(self.dates)} dates x {len(self.tickers)} tickers"
            )
        if len(self.tickers) < 2:
            raise InputError("need at least two assets")
        if not np.isfinite(self.prices).all():
            raise NonPositivePrice("prices contain missing or non-finite cells")
        if (self.prices <= 0).any():
            d, i = np.argwhere(self.prices <= 0)[0]
            raise NonPositivePrice(f"{self.tickers[i]} on {self.dates[d]}: {self.prices[d, i]}")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise InputError("dates must be strictly increasing")

    @property
    def n_assets(self) -> int:
        return len(self.tickers)

    @property
    def n_days(self) -> int:
        return len(self.dates)


@dataclass
class ReturnPanel:
    """Daily base-2 log returns; row r is day r+1 versus day r of the source panel."""

    tickers: list
    values: np.ndarray  # (D-1) x n

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(self.values).all():
            raise InputError("returns must be finite")

    @property
    def n_days(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class PeriodGrid:
    """Partition of the return rows into complete trading periods of K days."""

    n_return_rows: int
    periods_window: int  # m: how many trailing periods a state covers
    days_per_period: int = 5

    def __post_init__(self):
        if self.days_per_period < 1 or self.periods_window < 1:
            raise InputError("grid dimensions must be positive")

    @property
    def n_periods(self) -> int:
        return self.n_return_rows // self.days_per_period

    def return_rows(self, t: int) -> slice:
        """Return-row slice covered by period t."""
        if not 0 <= t < self.n_periods:
            raise InputError(f"period {t} outside 0..{self.n_periods - 1}")
        k = self.days_per_period
        return slice(t * k, (t + 1) * k)

    def exec_price_row(self, t: int) -> int:
        """Price-panel row holding the execution price for period t."""
        return t * self.days_per_period

    def daily_price_rows(self, t: int) -> slice:
        """Price-panel rows marked to market during period t (K rows)."""
        k = self.days_per_period
        return slice(t * k + 1, (t + 1) * k + 1)

    def first_tradable(self) -> int:
        """Earliest period index with a full lookback window behind it."""
        return self.periods_window


@dataclass
class AgentState:
    """What the policy sees: previous target weights plus m periods of raw returns."""

    prev_weights: np.ndarray  # n
    history: np.ndarray  # (m*K) x n, chronological

    def __post_init__(self):
        self.prev_weights = np.asarray(self.prev_weights, dtype=np.float64)
        self.history = np.asarray(self.history, dtype=np.float64)
        if self.history.ndim != 2 or self.prev_weights.ndim != 1:
            raise InputError("bad state shapes")
        if self.history.shape[1] != self.prev_weights.size:
            raise InputError("state history and weights disagree on asset count")


def align_long_frame(df: pd.DataFrame, tickers: list) -> pd.DataFrame:
    """Pivot a long date/ticker/adj_close frame to wide, keeping only
    dates present for every requested ticker. Idempotent."""
    present = set(df["ticker"].unique())
    for tk in tickers:
        if tk not in present:
            raise MissingTicker(tk)
    sub = df[df["ticker"].isin(tickers)]
    wide = sub.pivot_table(index="date", columns="ticker", values="adj_close", aggfunc="last")
    wide = wide.reindex(columns=tickers).dropna(axis=0, how="any").sort_index()
    return wide


def load_price_panel(path: str, tickers: list, min_days: int = 0) -> PricePanel:
    """Read a long-format CSV (`date,ticker,adj_close`) into an aligned panel."""
    df = pd.read_csv(path, dtype={"ticker": str}, float_precision="round_trip")
    expected = {"date", "ticker", "adj_close"}
    if not expected.issubset(df.columns):
        raise InputError(f"CSV needs columns {sorted(expected)}, found {list(df.columns)}")
    if df.empty:
        raise EmptySeries(path)
    wide = align_long_frame(df, tickers)
    if wide.empty:
        raise InsufficientHistory("no dates shared by all tickers")
    panel = PricePanel(
        tickers=list(tickers),
        dates=[str(d) for d in wide.index],
        prices=wide.to_numpy(dtype=np.float64),
    )
    if panel.n_days < max(min_days, 2):
        raise InsufficientHistory(f"{panel.n_days} aligned days, need at least {max(min_days, 2)}")
    return panel


def convert_per_ticker_dir(directory: str, out_path: str, tickers: list | None = None) -> int:
    """Merge per-ticker CSV files (`date,adj_close`, file name = ticker) into
    one long-format CSV. Returns the number of rows written."""
    frames = []
    names = tickers if tickers is not None else sorted(
        os.path.splitext(f)[0] for f in os.listdir(directory) if f.endswith(".csv")
    )
    for name in names:
        fp = os.path.join(directory, f"{name}.csv")
        if not os.path.exists(fp):
            raise MissingTicker(name)
        one = pd.read_csv(fp)
        if not {"date", "adj_close"}.issubset(one.columns):
            raise InputError(f"{fp}: needs columns date,adj_close")
        one = one[["date", "adj_close"]].copy()
        one.insert(1, "ticker", name)
        frames.append(one)
    if not frames:
        raise EmptySeries(directory)
    merged = pd.concat(frames, ignore_index=True).sort_values(["date", "ticker"])
    merged.to_csv(out_path, index=False)
    return len(merged)


def daily_log_returns(panel: PricePanel) -> ReturnPanel:
    """Base-2 daily log returns, one fewer row than the price panel."""
    values = np.log2(panel.prices[1:] / panel.prices[:-1])
    return ReturnPanel(tickers=list(panel.tickers), values=values)


def build_state(returns: ReturnPanel, grid: PeriodGrid, t: int, prev_weights) -> AgentState:
    """History for deciding period t: return rows of periods t-m .. t-1."""
    m, k = grid.periods_window, grid.days_per_period
    if t < m:
        raise InsufficientHistory(f"period {t} has only {t} complete periods behind it, need {m}")
    lo, hi = (t - m) * k, t * k
    if hi > returns.n_days:
        raise InsufficientHistory(f"period {t} needs return rows up to {hi}, have {returns.n_days}")
    return AgentState(
        prev_weights=np.array(prev_weights, dtype=np.float64, copy=True),
        history=returns.values[lo:hi].copy(),
    )


def synthetic_price_panel(tickers: list, days: int, seed: int,
                          drift: float = 0.0002, vol: float = 0.015,
                          start_price: float = 100.0) -> PricePanel:
    """Geometric-random-walk panel for demos and tests."""
    rng = np.random.default_rng(seed)
    n = len(tickers)
    steps = rng.normal(drift, vol, size=(days - 1, n))
    logp = np.vstack([np.zeros(n), np.cumsum(steps, axis=0)])
    spread = rng.uniform(0.5, 1.5, size=n)
    prices = start_price * spread * np.exp(logp)
    dates = [f"{2000 + d // 252:04d}-{(d % 252) // 21 + 1:02d}-{d % 21 + 1:02d}" for d in range(days)]
    return PricePanel(tickers=list(tickers), dates=dates, prices=prices)


def panel_to_long_csv(panel: PricePanel, path: str):
    """Write a panel back out in the long ingestion format."""
    rows = {
        "date": np.repeat(panel.dates, panel.n_assets),
        "ticker": panel.tickers * panel.n_days,
        "adj_close": panel.prices.ravel(),
    }
    # repr round-trips float64 exactly; the default writer drops the last ulp
    pd.DataFrame(rows).to_csv(path, index=False,
                              float_format=lambda x: repr(float(x)))


def default_universe() -> list:
    """Ticker list shipped with the package (29 large-cap US names)."""
    here = os.path.dirname(__file__)
    with open(os.path.join(here, "data", "djia29.txt")) as fh:
        return [line.strip() for line in fh if line.strip() and not line.startswith("#")]
