"""End-to-end runs: ingest -> train -> backtest -> report.

Each command reads a RunConfig, touches only paths derived from it, and
drops a manifest recording what it ran on, so results can be traced back
to an exact configuration and data snapshot.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from . import __version__
from .backtest import MetricReport, Strategy, baselines, run_backtest
from .errors import (DivergenceDetected, InputError, InsufficientHistory,
                     MissingCheckpoint, ShapeMismatch)
from .marketdata import (AgentState, PeriodGrid, PricePanel, default_universe,
                         load_price_panel)
from .policy import BlackLittermanPolicy, context_for_state
from .runconfig import RunConfig
from .trainer import TrainingEnv, maximize_rho_train, train

CHECKPOINT_FORMAT_VERSION = 1  # binary layout understood by the param store


# ---------------------------------------------------------------------------
# data plumbing


def panel_hash(panel: PricePanel) -> str:
    """Content hash of the aligned panel (independent of file metadata)."""
    digest = hashlib.sha256()
    digest.update("\x1f".join(panel.tickers).encode())
    digest.update("\x1f".join(panel.dates).encode())
    digest.update(np.ascontiguousarray(panel.prices, dtype=np.float64).tobytes())
    return digest.hexdigest()


def save_panel(panel: PricePanel, path):
    np.savez(path, prices=panel.prices,
             dates=np.array(panel.dates), tickers=np.array(panel.tickers))


def load_cached_panel(cfg: RunConfig) -> PricePanel:
    path = cfg.data.cache
    if not os.path.exists(path):
        raise InputError(f"cached panel not found: {path} (run ingest first)")
    blob = np.load(path)
    return PricePanel(tickers=[str(t) for t in blob["tickers"]],
                      dates=[str(d) for d in blob["dates"]],
                      prices=blob["prices"])


def slice_window(panel: PricePanel, start: str, end: str) -> PricePanel:
    """Rows with start <= date <= end (ISO strings compare lexically)."""
    keep = [i for i, d in enumerate(panel.dates) if start <= d <= end]
    if len(keep) < 2:
        raise InsufficientHistory(f"only {len(keep)} trading days in [{start}, {end}]")
    lo, hi = keep[0], keep[-1] + 1
    return PricePanel(tickers=list(panel.tickers), dates=panel.dates[lo:hi],
                      prices=panel.prices[lo:hi])


def backtest_slice(panel: PricePanel, cfg: RunConfig) -> PricePanel:
    """Evaluation days plus the lookback runway immediately before them.

    The scored days are the `backtest_days` trading days starting at
    `backtest_start`; each decision sees the `periods_window` periods of
    history ending the day before the period begins.
    """
    start = cfg.windows.backtest_start
    runway = cfg.grid.periods_window * cfg.effective_days_per_period + 1
    first = next((i for i, d in enumerate(panel.dates) if d >= start), None)
    if first is None:
        raise InputError(f"no trading days on or after {start}")
    if first < runway:
        raise InsufficientHistory(
            f"need {runway} days of history before {start}, have {first}")
    last = first + cfg.windows.backtest_days
    if last > panel.n_days:
        raise InsufficientHistory(
            f"backtest needs {cfg.windows.backtest_days} days from {start}, "
            f"panel ends after {panel.n_days - first}")
    lo = first - runway
    return PricePanel(tickers=list(panel.tickers), dates=panel.dates[lo:last],
                      prices=panel.prices[lo:last])


def write_manifest(cfg: RunConfig, command: str, data_hash: str | None,
                   extra: dict | None = None) -> str:
    os.makedirs(cfg.run.output_dir, exist_ok=True)
    body = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "data_hash": data_hash,
        "seed": cfg.run.seed,
        "variant": cfg.variant_label(),
        "versions": {
            "package": __version__,
            "checkpoint_format": CHECKPOINT_FORMAT_VERSION,
        },
    }
    body.update(extra or {})
    path = os.path.join(cfg.run.output_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# commands


def ingest(cfg: RunConfig) -> dict:
    """Align the raw source CSV into a cached panel."""
    tickers = cfg.data.universe or default_universe()
    if not os.path.exists(cfg.data.source):
        raise InputError(f"price source not found: {cfg.data.source}")
    min_days = cfg.grid.periods_window * cfg.effective_days_per_period + 1
    panel = load_price_panel(cfg.data.source, tickers, min_days=min_days)
    cache_dir = os.path.dirname(cfg.data.cache)
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
    save_panel(panel, cfg.data.cache)
    data_hash = panel_hash(panel)
    write_manifest(cfg, "ingest", data_hash)
    return {"tickers": panel.n_assets, "days": panel.n_days,
            "start": panel.dates[0], "end": panel.dates[-1],
            "data_hash": data_hash, "cache": cfg.data.cache}


def build_policy(cfg: RunConfig, n_assets: int) -> BlackLittermanPolicy:
    history_rows = cfg.grid.periods_window * cfg.effective_days_per_period
    return BlackLittermanPolicy.build(
        n_assets=n_assets,
        history_rows=history_rows,
        seed=cfg.run.seed,
        depth=cfg.policy.depth,
        attn_scale=cfg.policy.attn_scale,
        head_hidden=cfg.policy.head_hidden,
        mlp_hidden=cfg.policy.mlp_hidden,
        positional_encoding=cfg.ablation.positional_encoding,
        head="softmax" if cfg.ablation.softmax_head else "bl",
        tau=cfg.policy.tau,
    )


def train_run(cfg: RunConfig) -> dict:
    """Fit the policy on the training window; write checkpoints and the trace."""
    panel = load_cached_panel(cfg)
    data_hash = panel_hash(panel)
    sub = slice_window(panel, cfg.windows.train_start, cfg.windows.train_end)
    write_manifest(cfg, "train", data_hash,
                   extra={"train_days": sub.n_days})
    env = TrainingEnv(sub.prices,
                      periods_window=cfg.grid.periods_window,
                      days_per_period=cfg.effective_days_per_period,
                      costs=cfg.build_cost_schedule(),
                      initial_amount=cfg.run.initial_amount,
                      tau=cfg.policy.tau)
    policy = build_policy(cfg, panel.n_assets)
    ckpt_dir = os.path.join(cfg.run.output_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    trace_path = os.path.join(cfg.run.output_dir, "train_trace.csv")
    variant = cfg.variant_label()
    fit = maximize_rho_train if cfg.ablation.maximize_rho else train
    try:
        _, trace = fit(env, policy, cfg.build_train_config(), checkpoint_dir=ckpt_dir)
    except DivergenceDetected as err:
        partial = getattr(err, "trace", None)
        if partial is not None:
            partial.to_csv(trace_path, variant=variant)
        raise
    trace.to_csv(trace_path, variant=variant)
    final_ckpt = os.path.join(ckpt_dir, "policy_final.ckpt")
    policy.save(final_ckpt)
    last = trace.records[-1] if len(trace) else None
    return {
        "variant": variant,
        "stages": len(trace),
        "steps": last.steps if last else 0,
        "OP": last.op if last else None,
        "EF": last.ef if last else None,
        "AR_tr": last.ar_tr if last else None,
        "ARD_tr": last.ard_tr if last else None,
        "trace": trace_path,
        "checkpoint": final_ckpt,
    }


class PolicyStrategy(Strategy):
    """Backtest adapter around a trained policy checkpoint."""

    long_only = False

    def __init__(self, policy: BlackLittermanPolicy, name: str = "BDA"):
        self.policy = policy
        self.name = name
        self._prev = None

    def start(self, n_assets: int):
        if n_assets != self.policy.n_assets:
            raise ShapeMismatch(
                f"checkpoint built for {self.policy.n_assets} assets, panel has {n_assets}")
        self._prev = np.zeros(n_assets)

    def decide(self, prices: np.ndarray, t: int, grid: PeriodGrid) -> np.ndarray:
        m, k = grid.periods_window, grid.days_per_period
        if self.policy.history_rows != m * k:
            raise ShapeMismatch(
                f"checkpoint consumes {self.policy.history_rows} history rows, "
                f"grid supplies {m * k}")
        seg = prices[(t - m) * k: t * k + 1]
        state = AgentState(prev_weights=self._prev,
                           history=np.log2(seg[1:] / seg[:-1]))
        weights = self.policy.act_eval(state, context_for_state(state, self.policy.tau))
        self._prev = weights.copy()
        return weights


def _default_checkpoint(cfg: RunConfig) -> str:
    return os.path.join(cfg.run.output_dir, "checkpoints", "policy_final.ckpt")


def load_policy_strategy(cfg: RunConfig, checkpoint: str | None) -> PolicyStrategy:
    path = checkpoint or _default_checkpoint(cfg)
    if not os.path.exists(path):
        raise MissingCheckpoint(path)
    return PolicyStrategy(BlackLittermanPolicy.load(path), name=cfg.variant_label())


def _report_dir(cfg: RunConfig) -> str:
    return os.path.join(cfg.run.output_dir, "backtest")


def _write_report_files(out_dir: str, report: MetricReport, tickers: list):
    with open(os.path.join(out_dir, f"{report.name}.json"), "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, f"{report.name}_thetas.csv"), "w") as fh:
        fh.write("day,theta\n")
        for i, th in enumerate(report.thetas):
            fh.write(f"{i},{th!r}\n")
    with open(os.path.join(out_dir, f"{report.name}_weights.csv"), "w") as fh:
        fh.write("period," + ",".join(tickers) + "\n")
        for i, row in enumerate(report.weights):
            fh.write(f"{i}," + ",".join(repr(x) for x in row) + "\n")


def backtest_run(cfg: RunConfig, checkpoint: str | None = None,
                 baselines_only: bool = False) -> list:
    """Score the baselines (and optionally the trained agent) on the
    evaluation window; one JSON + two CSVs per strategy."""
    panel = load_cached_panel(cfg)
    data_hash = panel_hash(panel)
    sub = backtest_slice(panel, cfg)
    grid = PeriodGrid(n_return_rows=sub.n_days - 1,
                      periods_window=cfg.grid.periods_window,
                      days_per_period=cfg.effective_days_per_period)
    strategies = list(baselines())
    if not baselines_only:
        strategies.append(load_policy_strategy(cfg, checkpoint))
    write_manifest(cfg, "backtest", data_hash,
                   extra={"strategies": [s.name for s in strategies],
                          "periods": grid.n_periods - grid.periods_window})
    out_dir = _report_dir(cfg)
    os.makedirs(out_dir, exist_ok=True)
    costs = cfg.build_cost_schedule()
    reports = []
    for strategy in strategies:
        report = run_backtest(strategy, sub, grid, costs,
                              initial_amount=cfg.run.initial_amount)
        _write_report_files(out_dir, report, sub.tickers)
        reports.append(report.to_json_dict())
    reports.sort(key=lambda r: -r["AR"])
    return reports


REPORT_COLUMNS = ["name", "AR", "DR", "Std", "SR", "LStd", "STR", "flags"]


def report_run(cfg: RunConfig) -> list:
    """Merge per-strategy JSON reports into one ranked comparison CSV."""
    out_dir = _report_dir(cfg)
    if not os.path.isdir(out_dir):
        raise InputError(f"no backtest reports under {out_dir} (run backtest first)")
    rows = []
    for fname in sorted(os.listdir(out_dir)):
        if fname.endswith(".json"):
            with open(os.path.join(out_dir, fname)) as fh:
                rows.append(json.load(fh))
    if not rows:
        raise InputError(f"no backtest reports under {out_dir} (run backtest first)")
    rows.sort(key=lambda r: -r["AR"])
    path = os.path.join(cfg.run.output_dir, "report.csv")
    with open(path, "w") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for r in rows:
            cells = [r["name"]] + [repr(r[c]) for c in REPORT_COLUMNS[1:-1]]
            cells.append(";".join(r["flags"]))
            fh.write(",".join(cells) + "\n")
    write_manifest(cfg, "report", None, extra={"rows": len(rows), "csv": path})
    return rows
