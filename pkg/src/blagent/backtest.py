"""Out-of-sample evaluation: strategies, the backtest engine, and metrics.

Daily returns here are log2 ratios of consecutive total-asset marks — a
simpler bookkeeping than the training reward's invest-normalized form.
Classical comparison strategies share the exact same exchange and costs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize

from .errors import Bankrupt, EmptySeries, InputError
from .exchange import CostSchedule, Ledger, step_period, target_quantity
from .gradnet.tensor import spd_factor
from .marketdata import PeriodGrid, PricePanel

LONG_ONLY_SLACK = 1e-12


def _baseline_params() -> dict:
    with resources.files("blagent.data").joinpath("baseline_params.json").open() as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricReport:
    """Headline performance scalars plus the raw series behind them."""

    name: str
    ar: float
    dr: float
    std: float
    sr: float
    lstd: float
    sortino: float
    thetas: np.ndarray
    weights: np.ndarray
    flags: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {"name": self.name, "AR": self.ar, "DR": self.dr,
                "Std": self.std, "SR": self.sr, "LStd": self.lstd,
                "STR": self.sortino, "flags": list(self.flags)}


def metric_suite(thetas) -> dict:
    """Accumulated/daily return, dispersion, and risk-adjusted ratios.

    Dispersion uses the population divisor (series length); the risk-free
    and minimum-acceptable daily returns are both fixed at zero.
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.size == 0:
        raise EmptySeries("no daily returns to score")
    flags = []
    ar = float(thetas.sum())
    dr = ar / thetas.size
    if np.all(thetas == thetas[0]):
        std = 0.0  # identical marks disperse by zero, not by rounding residue
    else:
        std = float(np.sqrt(np.mean((thetas - dr) ** 2)))
    lstd = float(np.sqrt(np.mean(np.minimum(thetas, 0.0) ** 2)))
    if std > 0.0:
        sr = dr / std
    else:
        sr, flags = 0.0, flags + ["degenerate_sr"]
    if lstd > 0.0:
        sortino = dr / lstd
    else:
        sortino, flags = 0.0, flags + ["degenerate_str"]
    return {"ar": ar, "dr": dr, "std": std, "sr": sr, "lstd": lstd,
            "sortino": sortino, "flags": flags}


# ---------------------------------------------------------------------------
# strategy abstraction


class Strategy:
    """A named per-period decision rule producing portfolio weights."""

    name: str = "?"
    long_only: bool = True
    needs_history: int = 1  # periods that must precede the first decision

    def start(self, n_assets: int):
        """Reset internal state for a fresh run."""

    def decide(self, prices: np.ndarray, t: int, grid: PeriodGrid) -> np.ndarray:
        """Weights for period t, given prices up to the decision day inclusive."""
        raise NotImplementedError

    # helpers shared by the online-update family ---------------------------

    @staticmethod
    def last_period_relatives(prices, t, grid):
        """Per-asset gross price relatives over the most recent period."""
        k = grid.days_per_period
        return prices[t * k] / prices[(t - 1) * k]


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    cumulative = np.cumsum(u)
    ranks = np.arange(1, v.size + 1)
    support = np.nonzero(u * ranks > cumulative - 1.0)[0][-1]
    shift = (cumulative[support] - 1.0) / (support + 1.0)
    return np.maximum(v - shift, 0.0)


class BuyAndHold(Strategy):
    """Equal weights bought once; emitted weights drift with prices."""

    name = "UBAH"

    def start(self, n_assets):
        self.b = np.full(n_assets, 1.0 / n_assets)
        self.started = False

    def decide(self, prices, t, grid):
        if self.started:
            x = self.last_period_relatives(prices, t, grid)
            self.b = self.b * x / float(self.b @ x)
        self.started = True
        return self.b.copy()


class ConstantRebalanced(Strategy):
    """Rebalance to equal weights at every period start."""

    name = "CRP"

    def start(self, n_assets):
        self.n = n_assets

    def decide(self, prices, t, grid):
        return np.full(self.n, 1.0 / self.n)


class ExponentiatedGradient(Strategy):
    """Multiplicative weight update toward last period's winners."""

    name = "EG"

    def __init__(self, eta=0.05):
        self.eta = float(eta)

    def start(self, n_assets):
        self.b = np.full(n_assets, 1.0 / n_assets)
        self.started = False

    def decide(self, prices, t, grid):
        if self.started:
            x = self.last_period_relatives(prices, t, grid)
            growth = float(self.b @ x)
            self.b = self.b * np.exp(self.eta * x / growth)
            self.b /= self.b.sum()
        self.started = True
        return self.b.copy()


class MovingAverageReversion(Strategy):
    """Passive-aggressive step toward a moving-average price-reversion target."""

    name = "OLMAR"

    def __init__(self, epsilon=10.0, window=5):
        self.epsilon = float(epsilon)
        self.window = int(window)
        self.needs_history = self.window

    def start(self, n_assets):
        self.b = np.full(n_assets, 1.0 / n_assets)

    def decide(self, prices, t, grid):
        k = grid.days_per_period
        closes = np.stack([prices[(t - j) * k] for j in range(self.window)])
        predicted = (closes / prices[t * k]).mean(axis=0)
        centered = predicted - predicted.mean()
        norm2 = float(centered @ centered)
        if norm2 > 0.0:
            step = max(0.0, (self.epsilon - float(self.b @ predicted)) / norm2)
            self.b = project_simplex(self.b + step * centered)
        return self.b.copy()


class PassiveAggressiveReversion(Strategy):
    """Shift against last period's relatives when growth exceeds a threshold."""

    name = "PAMR"

    def __init__(self, epsilon=0.5):
        self.epsilon = float(epsilon)

    def start(self, n_assets):
        self.b = np.full(n_assets, 1.0 / n_assets)
        self.started = False

    def decide(self, prices, t, grid):
        if self.started:
            x = self.last_period_relatives(prices, t, grid)
            centered = x - x.mean()
            norm2 = float(centered @ centered)
            if norm2 > 0.0:
                step = max(0.0, (float(self.b @ x) - self.epsilon) / norm2)
                self.b = project_simplex(self.b - step * centered)
        self.started = True
        return self.b.copy()


class OnlineNewtonStep(Strategy):
    """Second-order online update of log-wealth with a curvature-norm projection."""

    name = "ONS"

    def __init__(self, delta=0.125, beta=1.0, mix=0.0):
        self.delta = float(delta)
        self.beta = float(beta)
        self.mix = float(mix)

    def start(self, n_assets):
        self.n = n_assets
        self.b = np.full(n_assets, 1.0 / n_assets)
        self.curvature = np.eye(n_assets)
        self.started = False

    def _project(self, point):
        a = self.curvature

        def dist(b):
            d = b - point
            return float(d @ a @ d)

        def jac(b):
            return 2.0 * a @ (b - point)

        res = minimize(dist, np.full(self.n, 1.0 / self.n), jac=jac,
                       method="SLSQP", bounds=[(0.0, 1.0)] * self.n,
                       constraints=[{"type": "eq", "fun": lambda b: b.sum() - 1.0}],
                       options={"maxiter": 200, "ftol": 1e-12})
        return project_simplex(res.x)

    def decide(self, prices, t, grid):
        if self.started:
            x = self.last_period_relatives(prices, t, grid)
            grad = x / float(self.b @ x)
            self.curvature += np.outer(grad, grad)
            step = self.b + (self.delta / self.beta) * np.linalg.solve(self.curvature, grad)
            self.b = self._project(step)
            if self.mix > 0.0:
                self.b = (1.0 - self.mix) * self.b + self.mix / self.n
        self.started = True
        return self.b.copy()


def _sample_moments(prices, t, grid):
    """Arithmetic daily returns over the lookback window ending at day t*K."""
    k, m = grid.days_per_period, grid.periods_window
    window = prices[(t - m) * k : t * k + 1]
    rets = window[1:] / window[:-1] - 1.0
    mean = rets.mean(axis=0)
    centered = rets - mean
    cov = centered.T @ centered / max(rets.shape[0] - 1, 1)
    cov += 1e-10 * np.trace(cov) / cov.shape[0] * np.eye(cov.shape[0])
    return mean, cov, rets.shape[0]


class BayesSteinMeanVariance(Strategy):
    """Mean-variance weights from a shrunk mean estimate; may short."""

    name = "JB"
    long_only = False

    def __init__(self, risk_aversion=3.0):
        self.gamma = float(risk_aversion)

    def decide(self, prices, t, grid):
        mean, cov, t_obs = _sample_moments(prices, t, grid)
        n = mean.size
        factor = spd_factor(cov)
        ones = np.ones(n)
        cov_inv_ones = cho_solve(factor, ones)
        grand = float(ones @ cho_solve(factor, mean)) / float(ones @ cov_inv_ones)
        spread = mean - grand * ones
        mahal = float(spread @ cho_solve(factor, spread))
        shrink = (n + 2.0) / ((n + 2.0) + t_obs * mahal) if mahal > 0 else 1.0
        shrunk = (1.0 - shrink) * mean + shrink * grand * ones
        return cho_solve(factor, shrunk) / self.gamma


class ThreeFundCombination(Strategy):
    """Estimation-risk-weighted mix of tangency and minimum-variance funds."""

    name = "KZTF"
    long_only = False

    def __init__(self, risk_aversion=3.0):
        self.gamma = float(risk_aversion)

    def decide(self, prices, t, grid):
        mean, cov, t_obs = _sample_moments(prices, t, grid)
        n = mean.size
        factor = spd_factor(cov)
        ones = np.ones(n)
        cov_inv_mean = cho_solve(factor, mean)
        cov_inv_ones = cho_solve(factor, ones)
        grand = float(ones @ cov_inv_mean) / float(ones @ cov_inv_ones)
        psi2 = max(float(mean @ cov_inv_mean) - n / t_obs, 1e-12)
        scale = 1.0
        if t_obs > n + 4:
            scale = (t_obs - n - 1.0) * (t_obs - n - 4.0) / (t_obs * (t_obs - 2.0))
        blend = psi2 / (psi2 + n / t_obs)
        w = blend * cov_inv_mean + (1.0 - blend) * grand * cov_inv_ones
        return scale * w / self.gamma


def baselines() -> list:
    """The comparison strategy set, configured from the versioned defaults."""
    p = _baseline_params()
    return [
        BuyAndHold(),
        ConstantRebalanced(),
        ExponentiatedGradient(**p["EG"]),
        MovingAverageReversion(**p["OLMAR"]),
        PassiveAggressiveReversion(**p["PAMR"]),
        OnlineNewtonStep(**p["ONS"]),
        BayesSteinMeanVariance(**p["JB"]),
        ThreeFundCombination(**p["KZTF"]),
    ]


# ---------------------------------------------------------------------------
# engine


def run_backtest(strategy: Strategy, panel: PricePanel, grid: PeriodGrid,
                 costs: CostSchedule, initial_amount: float = 1e8) -> MetricReport:
    """Roll one strategy through every tradable period and score it."""
    prices = panel.prices
    n = prices.shape[1]
    if grid.n_periods <= grid.periods_window:
        raise InputError("panel has no tradable periods after the lookback")
    required = getattr(strategy, "needs_history", 1) or 1
    if required > grid.periods_window:
        raise InputError(
            f"{strategy.name} needs {required} periods but the grid holds "
            f"{grid.periods_window}")
    ledger = Ledger.fresh(initial_amount, n)
    strategy.start(n)
    thetas: list[float] = []
    weight_log: list[np.ndarray] = []
    flags: list[str] = []
    k = grid.days_per_period
    for t in range(grid.periods_window, grid.n_periods):
        w = np.asarray(strategy.decide(prices[: t * k + 1], t, grid),
                       dtype=np.float64)
        if w.shape != (n,) or not np.isfinite(w).all():
            raise InputError(f"{strategy.name} produced invalid weights at period {t}")
        if strategy.long_only and (w.min() < -LONG_ONLY_SLACK
                                   or w.sum() > 1.0 + LONG_ONLY_SLACK):
            raise InputError(f"{strategy.name} left the long-only simplex at period {t}")
        weight_log.append(w.copy())
        v_prev = ledger.total_value
        q = target_quantity(w, ledger.invest_amount, prices[grid.exec_price_row(t)])
        try:
            outcome = step_period(ledger, q, prices[grid.exec_price_row(t)],
                                  prices[grid.daily_price_rows(t)], costs, period=t)
        except Bankrupt:
            flags.append("bankrupt")
            break
        marks = np.concatenate([[v_prev], outcome.daily_values])
        thetas.extend(np.log2(marks[1:] / marks[:-1]))
    series = np.asarray(thetas)
    scores = metric_suite(series) if series.size else {
        "ar": 0.0, "dr": 0.0, "std": 0.0, "sr": 0.0, "lstd": 0.0,
        "sortino": 0.0, "flags": ["empty_series"]}
    return MetricReport(name=strategy.name, ar=scores["ar"], dr=scores["dr"],
                        std=scores["std"], sr=scores["sr"], lstd=scores["lstd"],
                        sortino=scores["sortino"], thetas=series,
                        weights=np.array(weight_log), flags=flags + scores["flags"])
