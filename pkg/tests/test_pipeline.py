"""Pipeline commands on a synthetic workspace: ingest, train, backtest, report."""

import json
import os

import numpy as np
import pytest

from blagent.errors import (InputError, InsufficientHistory, MissingCheckpoint)
from blagent.marketdata import (AgentState, PeriodGrid, PricePanel,
                                panel_to_long_csv, synthetic_price_panel)
from blagent.pipeline import (PolicyStrategy, backtest_run, backtest_slice,
                              build_policy, ingest, load_cached_panel,
                              panel_hash, report_run, slice_window, train_run)
from blagent.policy import context_for_state
from blagent.runconfig import RunConfig
from blagent.trainer import TrainTrace

TICKERS = ["AAA", "BBB", "CCC"]


def make_workspace(tmp_path, days=300, seed=5):
    panel = synthetic_price_panel(TICKERS, days=days, seed=seed,
                                  drift=0.0004, vol=0.01)
    csv = tmp_path / "prices.csv"
    panel_to_long_csv(panel, csv)
    return panel, csv


def small_config(tmp_path, panel, csv, **extra):
    overrides = {
        "data.source": str(csv),
        "data.cache": str(tmp_path / "panel.npz"),
        "data.universe": ",".join(TICKERS),
        "grid.periods_window": "5",
        "policy.depth": "1",
        "policy.head_hidden": "8",
        "policy.mlp_hidden": "8",
        "train.minibatch": "8",
        "train.target_step": "16",
        "train.total_steps": "32",
        "train.learning_rate": "1e-6",
        "windows.train_start": panel.dates[0],
        "windows.train_end": panel.dates[150],
        "windows.backtest_start": panel.dates[151],
        "windows.backtest_days": "40",
        "run.output_dir": str(tmp_path / "out"),
        "run.seed": "3",
    }
    overrides.update(extra)
    return RunConfig.default(overrides)


@pytest.fixture()
def workspace(tmp_path):
    panel, csv = make_workspace(tmp_path)
    cfg = small_config(tmp_path, panel, csv)
    return tmp_path, panel, csv, cfg


def test_panel_hash_tracks_content(workspace):
    _, panel, _, _ = workspace
    twin = PricePanel(tickers=list(panel.tickers), dates=list(panel.dates),
                      prices=panel.prices.copy())
    assert panel_hash(panel) == panel_hash(twin)
    bumped = PricePanel(tickers=list(panel.tickers), dates=list(panel.dates),
                        prices=panel.prices * 1.000001)
    assert panel_hash(panel) != panel_hash(bumped)
    renamed = PricePanel(tickers=["AAA", "BBB", "CCX"], dates=list(panel.dates),
                         prices=panel.prices.copy())
    assert panel_hash(panel) != panel_hash(renamed)


def test_ingest_caches_and_writes_manifest(workspace):
    tmp_path, panel, _, cfg = workspace
    out = ingest(cfg)
    assert out["tickers"] == 3 and out["days"] == panel.n_days
    assert os.path.exists(cfg.data.cache)
    cached = load_cached_panel(cfg)
    assert cached.tickers == panel.tickers
    assert np.array_equal(cached.prices, panel.prices)
    assert panel_hash(cached) == out["data_hash"]
    with open(tmp_path / "out" / "manifest.json") as fh:
        manifest = json.load(fh)
    assert manifest["command"] == "ingest"
    assert manifest["config_hash"] == cfg.config_hash()
    assert manifest["data_hash"] == out["data_hash"]
    assert manifest["seed"] == 3
    assert manifest["versions"]["checkpoint_format"] == 1
    # re-running is idempotent on content
    assert ingest(cfg)["data_hash"] == out["data_hash"]


def test_ingest_missing_source_names_file(workspace):
    tmp_path, panel, csv, _ = workspace
    cfg = small_config(tmp_path, panel, csv,
                       **{"data.source": str(tmp_path / "gone.csv")})
    with pytest.raises(InputError, match="gone.csv"):
        ingest(cfg)


def test_cached_panel_missing_names_file(workspace):
    _, _, _, cfg = workspace
    with pytest.raises(InputError, match="panel.npz"):
        load_cached_panel(cfg)


def test_slice_window_inclusive_bounds(workspace):
    _, panel, _, _ = workspace
    sub = slice_window(panel, panel.dates[10], panel.dates[20])
    assert sub.dates[0] == panel.dates[10]
    assert sub.dates[-1] == panel.dates[20]
    assert sub.n_days == 11
    with pytest.raises(InsufficientHistory):
        slice_window(panel, "2050-01-01", "2050-12-31")


def test_backtest_slice_layout(workspace):
    _, panel, _, cfg = workspace
    sub = backtest_slice(panel, cfg)
    runway = 5 * 5 + 1
    assert sub.n_days == runway + 40
    # the first scored day is the configured start
    assert sub.dates[runway] == cfg.windows.backtest_start
    grid = PeriodGrid(n_return_rows=sub.n_days - 1, periods_window=5,
                      days_per_period=5)
    assert grid.n_periods - grid.periods_window == 8  # 40 days / 5-day periods


def test_backtest_slice_needs_runway(workspace):
    tmp_path, panel, csv, _ = workspace
    cfg = small_config(tmp_path, panel, csv,
                       **{"windows.train_start": panel.dates[0],
                          "windows.train_end": panel.dates[3],
                          "windows.backtest_start": panel.dates[4]})
    with pytest.raises(InsufficientHistory):
        backtest_slice(panel, cfg)
    late = small_config(tmp_path, panel, csv,
                        **{"windows.backtest_start": panel.dates[290]})
    with pytest.raises(InsufficientHistory):
        backtest_slice(panel, late)


def test_reference_window_gives_24_periods(tmp_path):
    panel, csv = make_workspace(tmp_path, days=380)
    cfg = small_config(tmp_path, panel, csv,
                       **{"grid.periods_window": "50",
                          "windows.train_end": panel.dates[254],
                          "windows.backtest_start": panel.dates[255],
                          "windows.backtest_days": "120"})
    sub = backtest_slice(panel, cfg)
    assert sub.n_days == 50 * 5 + 1 + 120
    grid = PeriodGrid(n_return_rows=sub.n_days - 1, periods_window=50,
                      days_per_period=5)
    assert grid.n_periods - grid.periods_window == 24


def test_train_run_artifacts(workspace):
    tmp_path, _, _, cfg = workspace
    ingest(cfg)
    out = train_run(cfg)
    assert out["variant"] == "BDA"
    assert out["stages"] == 2          # 32 total steps / 16 per stage
    assert out["steps"] == 32
    assert os.path.exists(out["checkpoint"])
    trace = TrainTrace.from_csv(out["trace"])
    assert len(trace) == 2
    assert trace.variant == "BDA"
    assert [r.steps for r in trace.records] == [16, 32]
    for name in ("policy_stage0001.ckpt", "policy_stage0002.ckpt", "policy_final.ckpt"):
        assert os.path.exists(tmp_path / "out" / "checkpoints" / name)
    with open(tmp_path / "out" / "manifest.json") as fh:
        assert json.load(fh)["command"] == "train"


def test_train_run_ablations_change_variant_and_head(workspace):
    tmp_path, panel, csv, _ = workspace
    cfg = small_config(tmp_path, panel, csv,
                       **{"ablation.softmax_head": "true"})
    ingest(cfg)
    out = train_run(cfg)
    assert out["variant"] == "BDA-V4"
    with open(out["trace"]) as fh:
        assert fh.readline().strip() == "# variant=BDA-V4"
    from blagent.policy import BlackLittermanPolicy
    assert BlackLittermanPolicy.load(out["checkpoint"]).head == "softmax"


def test_backtest_run_baselines_only(workspace):
    tmp_path, _, _, cfg = workspace
    ingest(cfg)
    reports = backtest_run(cfg, baselines_only=True)
    names = {r["name"] for r in reports}
    assert names == {"UBAH", "CRP", "EG", "OLMAR", "PAMR", "ONS", "JB", "KZTF"}
    ars = [r["AR"] for r in reports]
    assert ars == sorted(ars, reverse=True)
    out_dir = tmp_path / "out" / "backtest"
    json_files = [f for f in os.listdir(out_dir) if f.endswith(".json")]
    assert len(json_files) == 8
    with open(out_dir / "UBAH.json") as fh:
        body = json.load(fh)
    assert set(body) == {"name", "AR", "DR", "Std", "SR", "LStd", "STR", "flags"}
    thetas = (out_dir / "UBAH_thetas.csv").read_text().strip().splitlines()
    assert thetas[0] == "day,theta"
    assert len(thetas) == 1 + 40       # one row per scored day
    weights = (out_dir / "UBAH_weights.csv").read_text().strip().splitlines()
    assert weights[0] == "period,AAA,BBB,CCC"
    assert len(weights) == 1 + 8


def test_backtest_run_missing_checkpoint(workspace):
    _, _, _, cfg = workspace
    ingest(cfg)
    with pytest.raises(MissingCheckpoint, match="policy_final.ckpt"):
        backtest_run(cfg)


def test_backtest_run_with_trained_policy(workspace):
    tmp_path, _, _, cfg = workspace
    ingest(cfg)
    train_run(cfg)
    reports = backtest_run(cfg)
    assert len(reports) == 9
    agent = next(r for r in reports if r["name"] == "BDA")
    assert np.isfinite([agent["AR"], agent["SR"], agent["STR"]]).all()
    assert os.path.exists(tmp_path / "out" / "backtest" / "BDA.json")


def test_policy_strategy_matches_direct_evaluation(workspace):
    _, panel, _, cfg = workspace
    policy = build_policy(cfg, panel.n_assets)
    strat = PolicyStrategy(policy, name="X")
    strat.start(panel.n_assets)
    grid = PeriodGrid(n_return_rows=panel.n_days - 1, periods_window=5,
                      days_per_period=5)
    t = 6
    got = strat.decide(panel.prices[: t * 5 + 1], t, grid)
    seg = panel.prices[(t - 5) * 5: t * 5 + 1]
    state = AgentState(prev_weights=np.zeros(3),
                       history=np.log2(seg[1:] / seg[:-1]))
    want = policy.act_eval(state, context_for_state(state, policy.tau))
    np.testing.assert_allclose(got, want, rtol=0, atol=0)
    # the second decision must see the first one as held weights
    got2 = strat.decide(panel.prices[: 7 * 5 + 1], 7, grid)
    seg2 = panel.prices[2 * 5: 7 * 5 + 1]
    state2 = AgentState(prev_weights=want,
                        history=np.log2(seg2[1:] / seg2[:-1]))
    want2 = policy.act_eval(state2, context_for_state(state2, policy.tau))
    np.testing.assert_allclose(got2, want2, rtol=0, atol=0)


def test_report_run_merges_and_ranks(workspace):
    tmp_path, _, _, cfg = workspace
    ingest(cfg)
    backtest_run(cfg, baselines_only=True)
    rows = report_run(cfg)
    assert len(rows) == 8
    csv_path = tmp_path / "out" / "report.csv"
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "name,AR,DR,Std,SR,LStd,STR,flags"
    assert len(lines) == 9
    ars = [float(line.split(",")[1]) for line in lines[1:]]
    assert ars == sorted(ars, reverse=True)


def test_report_run_requires_backtests(workspace):
    _, _, _, cfg = workspace
    with pytest.raises(InputError, match="backtest"):
        report_run(cfg)
