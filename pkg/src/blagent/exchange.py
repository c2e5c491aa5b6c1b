"""Self-financing long/short trading simulator with integer share lots.

Reallocation happens once per period at the prior period's closing price:
the ledger pays for the position change, a commission proportional to
traded value, a borrow fee on the pre-existing short book, and interest
on negative cash carried into the period. Holdings then ride unchanged
through the period's daily closes.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import Bankrupt, InputError

#: daily marks per period and the trading-day year used for rate proration
DEFAULT_PERIOD_DAYS = 5
DEFAULT_DAYS_PER_YEAR = 252


@dataclass(frozen=True)
class CostSchedule:
    """Per-trade commission plus annualized lending rates, prorated per period."""

    commission_rate: float = 0.0005
    cash_lending_rate_annual: float = 0.03
    stock_lending_rate_annual: float = 0.03
    period_days: int = DEFAULT_PERIOD_DAYS
    days_per_year: int = DEFAULT_DAYS_PER_YEAR

    def __post_init__(self):
        for name in ("commission_rate", "cash_lending_rate_annual", "stock_lending_rate_annual"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be >= 0")

    @property
    def cash_rate_period(self) -> float:
        return self.cash_lending_rate_annual * self.period_days / self.days_per_year

    @property
    def stock_rate_period(self) -> float:
        return self.stock_lending_rate_annual * self.period_days / self.days_per_year


@dataclass
class Ledger:
    """Cash, integer holdings, and the mark-to-market total value."""

    cash: float
    holdings: np.ndarray  # int64 share counts, negative = short
    total_value: float
    invest_amount: float  # sizing budget per period: half the initial amount
    initial_amount: float

    def __post_init__(self):
        self.holdings = np.asarray(self.holdings, dtype=np.int64)

    @classmethod
    def fresh(cls, initial_amount: float, n_assets: int) -> "Ledger":
        if initial_amount <= 0:
            raise InputError("initial amount must be positive")
        return cls(
            cash=float(initial_amount),
            holdings=np.zeros(n_assets, dtype=np.int64),
            total_value=float(initial_amount),
            invest_amount=0.5 * float(initial_amount),
            initial_amount=float(initial_amount),
        )

    def snapshot(self) -> "Ledger":
        return replace(self, holdings=self.holdings.copy())


@dataclass
class PeriodOutcome:
    """Everything one simulated period produced."""

    xi: float  # period log return relative to the invested amount
    daily_returns: np.ndarray  # per-day log returns that telescope to xi
    daily_values: np.ndarray  # total asset value at each daily close
    txn_scale_ratio: float  # traded value over invested amount
    delta_shares: np.ndarray  # executed order, integer shares
    exec_prices: np.ndarray
    commissions: np.ndarray  # per-asset commission paid
    borrow_fees: np.ndarray  # per-asset short borrow fee paid
    ledger: Ledger  # end-of-period snapshot
    variance: float | None = None  # filled by callers that know w and the covariance


def target_quantity(weights, invest_amount: float, prices) -> np.ndarray:
    """Integer share targets: floor(invest * w / p), floor toward -infinity."""
    weights = np.asarray(weights, dtype=np.float64)
    prices = np.asarray(prices, dtype=np.float64)
    if weights.shape != prices.shape:
        raise InputError(f"weights {weights.shape} vs prices {prices.shape}")
    if (prices <= 0).any():
        raise InputError("prices must be positive")
    return np.floor(invest_amount * weights / prices).astype(np.int64)


def step_period(ledger: Ledger, target_q, exec_prices, daily_prices, costs: CostSchedule,
                period: int | None = None) -> PeriodOutcome:
    """Reallocate to target_q at exec_prices, then mark daily_prices day by day.

    Mutates the ledger. Raises Bankrupt as soon as a daily mark shows the
    total value (or the log-return argument) at or below zero.
    """
    target_q = np.asarray(target_q, dtype=np.int64)
    exec_prices = np.asarray(exec_prices, dtype=np.float64)
    daily_prices = np.asarray(daily_prices, dtype=np.float64)
    n = ledger.holdings.size
    if target_q.shape != (n,) or exec_prices.shape != (n,):
        raise InputError("order/price shape mismatch with ledger")
    if daily_prices.ndim != 2 or daily_prices.shape[1] != n:
        raise InputError(f"daily price matrix {daily_prices.shape} needs {n} columns")

    q_prev = ledger.holdings
    v_prev = ledger.total_value
    invest = ledger.invest_amount
    delta = target_q - q_prev

    commissions = costs.commission_rate * np.abs(delta) * exec_prices
    borrow_fees = costs.stock_rate_period * np.abs(np.minimum(q_prev, 0)) * exec_prices
    cash = ledger.cash
    if cash < 0:
        cash *= 1.0 + costs.cash_rate_period
    cash -= float(delta @ exec_prices) + float(borrow_fees.sum()) + float(commissions.sum())

    values = cash + daily_prices @ target_q
    where = f" in period {period}" if period is not None else ""
    for k, v in enumerate(values):
        if v <= 0.0:
            raise Bankrupt(f"total value {v:.2f} on day {k + 1}{where}",
                           period=period, day=k + 1, value=float(v))

    # daily log returns measured against the invested amount; their sum
    # telescopes to the period return xi
    args = values - v_prev + invest
    for k, a in enumerate(args):
        if a <= 0.0:
            raise Bankrupt(f"period loss exceeded invested amount on day {k + 1}{where}",
                           period=period, day=k + 1, value=float(values[k]))
    daily = np.empty(len(values))
    daily[0] = np.log2(args[0] / invest)
    daily[1:] = np.log2(args[1:] / args[:-1])
    xi = float(np.log2((values[-1] - v_prev) / invest + 1.0))

    ledger.cash = float(cash)
    ledger.holdings = target_q.copy()
    ledger.total_value = float(values[-1])

    return PeriodOutcome(
        xi=xi,
        daily_returns=daily,
        daily_values=values.astype(np.float64),
        txn_scale_ratio=float(np.abs(delta) @ exec_prices / invest),
        delta_shares=delta,
        exec_prices=exec_prices.copy(),
        commissions=commissions,
        borrow_fees=borrow_fees,
        ledger=ledger.snapshot(),
    )


def portfolio_variance(weights, cov) -> float:
    """Quadratic form w' C w."""
    weights = np.asarray(weights, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (weights.size, weights.size):
        raise InputError(f"covariance {cov.shape} vs weights {weights.shape}")
    if not np.allclose(cov, cov.T, rtol=1e-8, atol=1e-12):
        raise InputError("covariance must be symmetric")
    return float(weights @ cov @ weights)


ORDER_LOG_HEADER = ["period", "ticker", "delta_shares", "exec_price", "commission", "borrow_fee"]


def append_order_log(path: str, period: int, tickers: list, outcome: PeriodOutcome):
    """Append one period's executed orders to a CSV audit log."""
    fresh = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(ORDER_LOG_HEADER)
        for i, tk in enumerate(tickers):
            writer.writerow([
                period, tk,
                int(outcome.delta_shares[i]),
                repr(float(outcome.exec_prices[i])),
                repr(float(outcome.commissions[i])),
                repr(float(outcome.borrow_fees[i])),
            ])
