"""Independent reference implementations used to cross-check the package.

Everything here deliberately avoids the production code paths: gradients
come from central finite differences, optimal weights from generic
numerical minimizers, and ledger quantities from plain replay loops.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import minimize

FD_STEP = 1e-5
FD_RTOL = 1e-4


def fd_gradient(f, x0: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite-difference gradient of scalar f over a flat vector."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2.0 * step)
    return g


def rel_err(approx: np.ndarray, exact: np.ndarray, floor: float = 1e-8) -> float:
    """Worst-case elementwise relative error with an absolute floor."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = np.maximum(np.abs(exact), floor)
    return float(np.max(np.abs(approx - exact) / denom))


def min_unconstrained_quadratic(cov: np.ndarray, mean: np.ndarray, risk_aversion: float) -> np.ndarray:
    """Numerically minimize 0.5 w' C w - d w' m from a cold start."""
    n = cov.shape[0]

    def obj(w):
        return 0.5 * w @ cov @ w - risk_aversion * w @ mean

    def grad(w):
        return cov @ w - risk_aversion * mean

    res = minimize(obj, np.zeros(n), jac=grad, method="BFGS", tol=1e-14,
                   options={"maxiter": 10_000, "gtol": 1e-12})
    return res.x


def project_simplex_qp(y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex, via SLSQP."""
    n = y.size

    def obj(w):
        d = w - y
        return 0.5 * d @ d

    cons = [{"type": "eq", "fun": lambda w: w.sum() - 1.0}]
    res = minimize(obj, np.full(n, 1.0 / n), method="SLSQP", constraints=cons,
                   bounds=[(0.0, None)] * n, options={"maxiter": 1000, "ftol": 1e-16})
    return res.x


def ledger_replay(initial_cash: float, invest: float, periods,
                  commission: float, cash_rate: float, stock_rate: float):
    """Spreadsheet-style replay of the trading rules in plain Python loops.

    ``periods`` is a list of (exec_prices, daily_price_rows, target_shares)
    triples. Returns (cash_trail, value_trail) where value_trail holds every
    daily mark in order.
    """
    n = len(periods[0][2])
    cash = float(initial_cash)
    q = [0] * n
    cash_trail, value_trail = [], []
    for exec_p, daily_rows, target in periods:
        if cash < 0:
            cash = cash * (1.0 + cash_rate)
        trade_cost = sum((target[i] - q[i]) * exec_p[i] for i in range(n))
        borrow = sum(stock_rate * abs(min(q[i], 0)) * exec_p[i] for i in range(n))
        fee = sum(commission * abs(target[i] - q[i]) * exec_p[i] for i in range(n))
        cash = cash - trade_cost - borrow - fee
        q = list(target)
        cash_trail.append(cash)
        for row in daily_rows:
            value_trail.append(cash + sum(q[i] * row[i] for i in range(n)))
    return cash_trail, value_trail


def log2_growth(v1: float, v0: float) -> float:
    return math.log2(v1 / v0)


def population_std(xs) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    return float(np.sqrt(np.mean((xs - xs.mean()) ** 2)))


def downside_std(xs) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    return float(np.sqrt(np.mean(np.minimum(xs, 0.0) ** 2)))
