"""Backtest engine, metric suite, and comparison-strategy tests."""

import numpy as np
import pandas as pd
import pytest

from blagent.backtest import (
    BuyAndHold,
    ConstantRebalanced,
    ExponentiatedGradient,
    MetricReport,
    MovingAverageReversion,
    OnlineNewtonStep,
    PassiveAggressiveReversion,
    Strategy,
    baselines,
    metric_suite,
    project_simplex,
    run_backtest,
)
from blagent.errors import EmptySeries, InputError
from blagent.exchange import CostSchedule, target_quantity
from blagent.marketdata import PeriodGrid, PricePanel, synthetic_price_panel

from oracles import ledger_replay, project_simplex_qp

FREE = CostSchedule(commission_rate=0.0, cash_lending_rate_annual=0.0,
                    stock_lending_rate_annual=0.0)


def make_panel(prices):
    prices = np.asarray(prices, dtype=np.float64)
    dates = pd.date_range("2020-01-01", periods=len(prices), freq="B").values
    tickers = [f"A{i}" for i in range(prices.shape[1])]
    return PricePanel(tickers=tickers, dates=dates, prices=prices)


def grid_for(panel, m, k=5):
    return PeriodGrid(n_return_rows=len(panel.prices) - 1, periods_window=m,
                      days_per_period=k)


class CashOnly(Strategy):
    name = "CASH"

    def decide(self, prices, t, grid):
        return np.zeros(prices.shape[1])


class FixedWeights(Strategy):
    name = "FIXED"
    long_only = False

    def __init__(self, weights):
        self.w = np.asarray(weights, dtype=np.float64)

    def decide(self, prices, t, grid):
        return self.w.copy()


# ---------------------------------------------------------------------------
# metric suite


def python_metrics(series):
    """Independent pure-Python recomputation of every metric."""
    n = len(series)
    ar = sum(series)
    dr = ar / n
    var = sum((x - dr) ** 2 for x in series) / n
    std = var ** 0.5
    lstd = (sum(min(x, 0.0) ** 2 for x in series) / n) ** 0.5
    sr = dr / std if std > 0 else 0.0
    sortino = dr / lstd if lstd > 0 else 0.0
    return ar, dr, std, sr, lstd, sortino


def test_metrics_constant_series():
    m = metric_suite([0.001] * 20)
    assert m["ar"] == pytest.approx(0.02, abs=1e-15)
    assert m["dr"] == pytest.approx(0.001, abs=1e-15)
    assert m["std"] == 0.0 and m["lstd"] == 0.0
    assert m["sr"] == 0.0 and m["sortino"] == 0.0
    assert "degenerate_sr" in m["flags"] and "degenerate_str" in m["flags"]


def test_metrics_two_point_series():
    m = metric_suite([0.02, -0.02])
    assert m["dr"] == 0.0
    assert m["std"] == pytest.approx(0.02, abs=1e-15)
    assert m["lstd"] == pytest.approx(np.sqrt(0.0004 / 2), abs=1e-12)
    assert m["lstd"] == pytest.approx(0.01414, abs=1e-5)
    assert m["sr"] == 0.0 and m["sortino"] == 0.0
    assert m["flags"] == []


def test_metrics_ten_day_toy_series():
    m = metric_suite([0.01] * 5 + [-0.01] * 5)
    assert m["dr"] == 0.0
    assert m["std"] == pytest.approx(0.01, abs=1e-15)
    assert m["lstd"] == pytest.approx(np.sqrt(5e-4 / 10), abs=1e-12)
    assert m["sr"] == 0.0 and m["sortino"] == 0.0


def test_metrics_match_python_recomputation():
    rng = np.random.default_rng(5)
    for _ in range(10):
        series = rng.normal(0.0, 0.01, size=rng.integers(3, 60)).tolist()
        m = metric_suite(series)
        ar, dr, std, sr, lstd, sortino = python_metrics(series)
        assert m["ar"] == pytest.approx(ar, rel=1e-12, abs=1e-15)
        assert m["dr"] == pytest.approx(dr, rel=1e-12, abs=1e-15)
        assert m["std"] == pytest.approx(std, rel=1e-9)
        assert m["sr"] == pytest.approx(sr, rel=1e-9)
        assert m["lstd"] == pytest.approx(lstd, rel=1e-9)
        assert m["sortino"] == pytest.approx(sortino, rel=1e-9)
        # accumulated return is days times daily return, and downside
        # dispersion is bounded by raw dispersion around zero
        assert m["ar"] == pytest.approx(len(series) * m["dr"], abs=1e-12)
        assert m["lstd"] ** 2 <= np.mean(np.square(series)) + 1e-15


def test_metrics_empty_series():
    with pytest.raises(EmptySeries):
        metric_suite([])


def test_report_json_keys():
    rep = MetricReport(name="X", ar=0.1, dr=0.001, std=0.02, sr=0.05,
                       lstd=0.01, sortino=0.1, thetas=np.zeros(3),
                       weights=np.zeros((3, 2)))
    assert set(rep.to_json_dict()) == {"name", "AR", "DR", "Std", "SR",
                                       "LStd", "STR", "flags"}


# ---------------------------------------------------------------------------
# engine


def test_all_cash_is_flat():
    panel = synthetic_price_panel(["A", "B"], 21, seed=0)
    rep = run_backtest(CashOnly(), panel, grid_for(panel, m=1), FREE)
    assert rep.ar == 0.0 and rep.std == 0.0 and rep.sr == 0.0
    assert "degenerate_sr" in rep.flags
    assert np.all(rep.thetas == 0.0)


def test_single_asset_buy_and_hold_matches_hand_ledger():
    rng = np.random.default_rng(8)
    a = 100 * np.exp2(np.concatenate([[0], np.cumsum(rng.normal(0.001, 0.01, 20))]))
    b = np.full(21, 40.0)
    panel = make_panel(np.column_stack([a, b]))
    grid = grid_for(panel, m=1)
    rep = run_backtest(FixedWeights([1.0, 0.0]), panel, grid, FREE)

    invest = 0.5e8
    cash, value = 1e8, 1e8
    holdings = 0
    for t in range(1, 4):
        q = int(np.floor(invest / a[5 * t]))
        cash -= (q - holdings) * a[5 * t]
        holdings = q
        value = cash + holdings * a[5 * (t + 1)]
    assert rep.ar == pytest.approx(np.log2(value / 1e8), abs=1e-12)
    # telescoping: the sum of daily log ratios is the log of the end ratio
    assert rep.thetas.sum() == pytest.approx(rep.ar, abs=1e-12)


def test_ar_equals_days_times_dr_on_random_panels():
    for seed in range(3):
        panel = synthetic_price_panel(["A", "B", "C"], 61, seed=seed)
        grid = grid_for(panel, m=2)
        for strat in (ConstantRebalanced(), FixedWeights([0.4, -0.2, 0.5])):
            rep = run_backtest(strat, panel, grid, CostSchedule())
            assert rep.ar == pytest.approx(len(rep.thetas) * rep.dr, abs=1e-12)


def test_ubah_flat_prices_never_trades():
    panel = make_panel(np.tile([100.0, 50.0], (31, 1)))
    rep = run_backtest(BuyAndHold(), panel, grid_for(panel, m=1), FREE)
    assert rep.ar == 0.0
    assert np.all(rep.weights == 0.5)


def test_crp_harvests_mirrored_alternation():
    # two assets whose daily relatives alternate between r and 1/r: each
    # asset is flat over any two days, but daily rebalancing compounds
    # 0.5*(r + 1/r) > 1
    r = 1.01
    days = 41
    rel = np.ones((days - 1, 2))
    rel[0::2, 0], rel[1::2, 0] = r, 1 / r
    rel[0::2, 1], rel[1::2, 1] = 1 / r, r
    prices = 100 * np.vstack([np.ones(2), np.cumprod(rel, axis=0)])
    panel = make_panel(prices)
    grid = grid_for(panel, m=1, k=1)
    rep = run_backtest(ConstantRebalanced(), panel, grid, FREE)
    assert rep.ar > 0.0

    # hand-ledger oracle over the same target sequence
    periods = []
    invest = 0.5e8
    for t in range(1, grid.n_periods):
        exec_p = prices[t]
        q = target_quantity(np.full(2, 0.5), invest, exec_p)
        periods.append((exec_p, prices[t + 1 : t + 2], q))
    cash_trail, value_trail = ledger_replay(1e8, invest, periods, 0.0, 0.0, 0.0)
    assert rep.ar == pytest.approx(np.log2(value_trail[-1] / 1e8), abs=1e-9)


def test_eg_with_zero_learning_rate_is_crp():
    panel = synthetic_price_panel(["A", "B", "C"], 61, seed=4)
    grid = grid_for(panel, m=1)
    rep_eg = run_backtest(ExponentiatedGradient(eta=0.0), panel, grid,
                          CostSchedule())
    rep_crp = run_backtest(ConstantRebalanced(), panel, grid, CostSchedule())
    assert np.array_equal(rep_eg.thetas, rep_crp.thetas)
    assert np.array_equal(rep_eg.weights, rep_crp.weights)


def test_every_long_only_baseline_stays_on_simplex():
    panel = synthetic_price_panel(["A", "B", "C", "D"], 81, seed=9, vol=0.02)
    grid = grid_for(panel, m=5)
    for strat in baselines():
        rep = run_backtest(strat, panel, grid, CostSchedule())
        assert np.isfinite(rep.weights).all()
        assert np.isfinite(rep.ar)
        if strat.long_only:
            assert rep.weights.min() >= -1e-12
            assert rep.weights.sum(axis=1).max() <= 1.0 + 1e-12


def test_baseline_roster():
    names = [s.name for s in baselines()]
    assert names == ["UBAH", "CRP", "EG", "OLMAR", "PAMR", "ONS", "JB", "KZTF"]
    eg = baselines()[2]
    assert eg.eta == 0.05
    olmar = baselines()[3]
    assert olmar.epsilon == 10.0 and olmar.window == 5
    pamr = baselines()[4]
    assert pamr.epsilon == 0.5
    ons = baselines()[5]
    assert ons.delta == 0.125 and ons.beta == 1.0


def test_backtest_is_repeatable_with_reused_strategy():
    panel = synthetic_price_panel(["A", "B", "C"], 61, seed=2)
    grid = grid_for(panel, m=2)
    strat = PassiveAggressiveReversion()
    rep1 = run_backtest(strat, panel, grid, CostSchedule())
    rep2 = run_backtest(strat, panel, grid, CostSchedule())
    assert np.array_equal(rep1.thetas, rep2.thetas)
    assert np.array_equal(rep1.weights, rep2.weights)


def test_bankruptcy_truncates_with_flag():
    flat = np.tile([100.0, 80.0], (11, 1))
    crash = np.array([[100.0 * 0.5 ** i, 80.0] for i in range(1, 6)])
    panel = make_panel(np.vstack([flat, crash]))
    grid = grid_for(panel, m=1)
    rep = run_backtest(FixedWeights([3.0, 0.0]), panel, grid, FREE)
    assert "bankrupt" in rep.flags
    assert len(rep.thetas) == 5  # only the flat period completed


def test_needs_history_checked_against_grid():
    panel = synthetic_price_panel(["A", "B"], 21, seed=0)
    with pytest.raises(InputError):
        run_backtest(MovingAverageReversion(window=5), panel,
                     grid_for(panel, m=3), FREE)


def test_rejects_panel_without_tradable_periods():
    panel = synthetic_price_panel(["A", "B"], 11, seed=0)
    with pytest.raises(InputError):
        run_backtest(ConstantRebalanced(), panel, grid_for(panel, m=2), FREE)


# ---------------------------------------------------------------------------
# simplex projection and strategy internals


def test_simplex_projection_known_points():
    assert project_simplex(np.array([0.3, 0.3])) == pytest.approx([0.5, 0.5])
    assert project_simplex(np.array([2.0, 0.0])) == pytest.approx([1.0, 0.0])
    assert project_simplex(np.array([-1.0, -2.0])) == pytest.approx([1.0, 0.0])


def test_simplex_projection_matches_qp_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = rng.integers(2, 8)
        v = rng.normal(0.0, 2.0, size=n)
        fast = project_simplex(v)
        slow = project_simplex_qp(v)
        assert np.abs(fast - slow).max() < 1e-6
        assert fast.min() >= 0.0
        assert fast.sum() == pytest.approx(1.0, abs=1e-12)


def test_ons_projection_reduces_to_euclidean_under_identity_curvature():
    ons = OnlineNewtonStep()
    ons.start(4)
    rng = np.random.default_rng(6)
    for _ in range(5):
        point = rng.normal(0.0, 1.0, size=4)
        assert np.abs(ons._project(point) - project_simplex(point)).max() < 1e-6


def test_olmar_moves_toward_reverted_assets():
    # asset A spikes while B sags; the reversion forecast favors B
    base = np.tile([100.0, 100.0], (26, 1))
    base[20:, 0] *= 1.3
    base[20:, 1] *= 0.8
    panel = make_panel(base)
    grid = grid_for(panel, m=5)
    strat = MovingAverageReversion()
    strat.start(2)
    w = strat.decide(panel.prices[:26], 5, grid)
    assert w[1] > w[0]
    assert w.sum() == pytest.approx(1.0, abs=1e-9)
