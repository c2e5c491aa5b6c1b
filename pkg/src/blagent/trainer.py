"""Policy-gradient training: replay buffer, targets, and the stage loop.

Each stage fills the replay buffer with rollout transitions, runs a fixed
number of minibatch ascent steps on the squared-deficit objective, then
greedily sweeps the whole environment to record progress. The supervision
target for a period uses that period's realized returns — deliberate
training-time foresight that never leaks into decision-time inputs.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve

from . import gradnet as gn
from .blmodel import historical_cov
from .errors import Bankrupt, DivergenceDetected, InputError
from .exchange import (
    CostSchedule,
    Ledger,
    PeriodOutcome,
    portfolio_variance,
    step_period,
    target_quantity,
)
from .gradnet.tensor import spd_factor
from .marketdata import AgentState, PeriodGrid
from .policy import BlContext, bl_context

BUFFER_CAPACITY = 2**14


@dataclass(frozen=True)
class TrainConfig:
    """Penalties, step sizes, and loop counts for the training algorithm."""

    lambda1: float = 0.2  # variance penalty
    lambda2: float = 0.002  # transaction/turnover penalty
    lambda3: float = 1.0  # aggressiveness of the foresight target weights
    learning_rate: float = 1e-5
    minibatch: int = 128
    target_step: int = 1080  # transitions collected per stage (M)
    total_steps: int = 300_000
    seed: int = 0
    clip_norm: float | None = 1e3
    buffer_capacity: int = BUFFER_CAPACITY

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InputError("penalty weights must be non-negative")
        if self.lambda3 <= 0:
            raise InputError("lambda3 must be positive")
        if self.minibatch < 1 or self.target_step < self.minibatch:
            raise InputError("need target_step >= minibatch >= 1")


@dataclass
class Transition:
    """One stored interaction, plus the period index that produced it."""

    state: AgentState
    action: np.ndarray
    reward: float
    next_state: AgentState
    period: int

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise InputError("reward must be finite")


class ReplayBuffer:
    """FIFO ring of transitions with uniform no-replacement sampling."""

    def __init__(self, capacity: int = BUFFER_CAPACITY):
        self._items = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    @property
    def capacity(self) -> int:
        return self._items.maxlen

    def clear(self):
        self._items.clear()

    def push(self, tr: Transition):
        self._items.append(tr)

    def sample(self, rng, n: int) -> list:
        k = min(n, len(self._items))
        idx = rng.choice(len(self._items), size=k, replace=False)
        return [self._items[i] for i in idx]

    def oldest(self) -> Transition:
        return self._items[0]


@dataclass
class StageRecord:
    stage: int
    steps: int
    op: float
    ef: float
    ar_tr: float
    ard_tr: float


@dataclass
class TrainTrace:
    """Per-stage convergence indicators."""

    records: list = field(default_factory=list)
    variant: str | None = None

    def append(self, rec: StageRecord):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path, variant: str | None = None):
        label = variant if variant is not None else self.variant
        with open(path, "w", newline="") as fh:
            if label:
                fh.write(f"# variant={label}\n")
            writer = csv.writer(fh)
            writer.writerow(["stage", "steps", "OP", "EF", "AR_tr", "ARD_tr"])
            for r in self.records:
                writer.writerow([r.stage, r.steps, repr(r.op), repr(r.ef),
                                 repr(r.ar_tr), repr(r.ard_tr)])

    @classmethod
    def from_csv(cls, path) -> "TrainTrace":
        trace = cls()
        with open(path) as fh:
            lines = []
            for line in fh:
                if line.startswith("# variant="):
                    trace.variant = line.strip().split("=", 1)[1]
                elif line.strip():
                    lines.append(line)
        for row in csv.DictReader(lines):
            trace.append(StageRecord(
                stage=int(row["stage"]), steps=int(row["steps"]),
                op=float(row["OP"]), ef=float(row["EF"]),
                ar_tr=float(row["AR_tr"]), ard_tr=float(row["ARD_tr"])))
        return trace


# ---------------------------------------------------------------------------
# scalar building blocks


def env_reward(outcome: PeriodOutcome, cfg: TrainConfig) -> float:
    """Average daily portfolio return, penalized by variance and turnover cost.

    ``outcome.variance`` must already be filled by the caller.
    """
    if outcome.variance is None:
        raise InputError("outcome.variance not set")
    days = len(outcome.daily_returns)
    return (outcome.xi / days
            - 0.5 * cfg.lambda1 * outcome.variance
            - 0.5 * cfg.lambda2 * outcome.txn_scale_ratio)


def evaluation_fn(w, w_prev, mu, cov, cfg: TrainConfig) -> float:
    """Realized-mean return of the weights minus risk and turnover penalties."""
    w = np.asarray(w, dtype=np.float64)
    w_prev = np.asarray(w_prev, dtype=np.float64)
    return (float(w @ mu)
            - 0.5 * cfg.lambda1 * float(w @ cov @ w)
            - 0.5 * cfg.lambda2 * float(np.abs(w - w_prev).sum()))


def optimal_weights(mu, cov, cfg: TrainConfig) -> np.ndarray:
    """Foresight weights: unconstrained mean-variance optimum at lambda3."""
    return cho_solve(spd_factor(np.asarray(cov)), np.asarray(mu)) / cfg.lambda3


def target_value(mu, cov, w_prev, cfg: TrainConfig) -> float:
    """Evaluation value of the foresight-optimal weights."""
    return evaluation_fn(optimal_weights(mu, cov, cfg), w_prev, mu, cov, cfg)


def objective(w, w_prev, mu, cov, cfg: TrainConfig) -> float:
    """Squared deficit to the target, negated: 0 iff the target is attained."""
    gamma = target_value(mu, cov, w_prev, cfg)
    rho = evaluation_fn(w, w_prev, mu, cov, cfg)
    return -((gamma - rho) ** 2)


# graph-side versions of the same quantities -------------------------------


def rho_graph(w, w_prev, mu, cov, cfg: TrainConfig):
    """Differentiable evaluation function; ``w`` is an (n, 1) tensor."""
    n = w.value.shape[0]
    mu_col = gn.constant(np.asarray(mu).reshape(n, 1))
    prev_col = gn.constant(np.asarray(w_prev).reshape(n, 1))
    ret = gn.matmul(gn.transpose(w), mu_col)
    quad = gn.matmul(gn.transpose(w), gn.matmul(gn.constant(np.asarray(cov)), w))
    turn = gn.sum_all(gn.abs_(gn.sub(w, prev_col)))
    return gn.sub(gn.sub(gn.sum_all(ret), gn.scale(gn.sum_all(quad), 0.5 * cfg.lambda1)),
                  gn.scale(turn, 0.5 * cfg.lambda2))


def theta_graph(w, gamma: float, w_prev, mu, cov, cfg: TrainConfig):
    """Differentiable squared-deficit objective against a fixed target."""
    deficit = gn.sub(gn.constant(np.asarray(gamma)), rho_graph(w, w_prev, mu, cov, cfg))
    return gn.neg(gn.mul(deficit, deficit))


# ---------------------------------------------------------------------------
# environment


class TrainingEnv:
    """Period-stepped market simulator over a fixed price matrix.

    Caches, per tradable period: the decision-time allocator constants,
    and the realized mean/covariance used by rewards and targets.
    """

    def __init__(self, prices, periods_window: int, days_per_period: int = 5,
                 costs: CostSchedule | None = None, initial_amount: float = 1e8,
                 tau: float = 1.0):
        self.prices = np.asarray(prices, dtype=np.float64)
        if self.prices.ndim != 2:
            raise InputError("prices must be a days x assets matrix")
        self.returns = np.log2(self.prices[1:] / self.prices[:-1])
        self.grid = PeriodGrid(n_return_rows=self.returns.shape[0],
                               periods_window=periods_window,
                               days_per_period=days_per_period)
        if self.grid.n_periods < periods_window + 1:
            raise InputError(
                f"{self.grid.n_periods} periods with lookback {periods_window}: nothing tradable")
        self.costs = costs if costs is not None else CostSchedule(period_days=days_per_period)
        self.initial_amount = float(initial_amount)
        self.tau = float(tau)
        self.n_assets = self.prices.shape[1]
        self.bankruptcies = 0
        self._ctx: dict[int, BlContext] = {}
        self._eval_mu: dict[int, np.ndarray] = {}
        self._eval_cov: dict[int, np.ndarray] = {}
        self.reset_cursor()

    # -- indexing helpers ---------------------------------------------------

    @property
    def first_period(self) -> int:
        return self.grid.periods_window

    @property
    def end_period(self) -> int:
        """One past the last tradable period."""
        return self.grid.n_periods

    @property
    def n_tradable(self) -> int:
        return self.end_period - self.first_period

    def state(self, t: int, prev_weights) -> AgentState:
        m, k = self.grid.periods_window, self.grid.days_per_period
        return AgentState(prev_weights=np.asarray(prev_weights, dtype=np.float64),
                          history=self.returns[(t - m) * k : t * k])

    def context(self, t: int) -> BlContext:
        if t not in self._ctx:
            self._ctx[t] = bl_context(historical_cov(self.state(t, np.zeros(self.n_assets)).history),
                                      tau=self.tau)
        return self._ctx[t]

    def realized_mean(self, t: int) -> np.ndarray:
        if t not in self._eval_mu:
            rows = self.grid.return_rows(t)
            self._eval_mu[t] = self.returns[rows].mean(axis=0)
        return self._eval_mu[t]

    def realized_cov(self, t: int) -> np.ndarray:
        """Covariance over periods t-m+1 .. t (the realized period included)."""
        if t not in self._eval_cov:
            m, k = self.grid.periods_window, self.grid.days_per_period
            window = self.returns[(t + 1 - m) * k : (t + 1) * k]
            self._eval_cov[t] = historical_cov(window).cov
        return self._eval_cov[t]

    # -- stepping -----------------------------------------------------------

    def reset_cursor(self):
        self.t = self.first_period
        self.prev_weights = np.zeros(self.n_assets)
        self.ledger = Ledger.fresh(self.initial_amount, self.n_assets)

    def execute(self, t: int, weights, ledger: Ledger) -> PeriodOutcome:
        k = self.grid.days_per_period
        exec_p = self.prices[self.grid.exec_price_row(t)]
        daily = self.prices[self.grid.daily_price_rows(t)]
        q = target_quantity(weights, ledger.invest_amount, exec_p)
        outcome = step_period(ledger, q, exec_p, daily, self.costs, period=t)
        outcome.variance = portfolio_variance(np.asarray(weights, dtype=np.float64),
                                              self.realized_cov(t))
        return outcome

    def rollout_step(self, policy, cfg: TrainConfig) -> Transition | None:
        """Advance the cursor one period; None when the episode went bankrupt."""
        t = self.t
        s_t = self.state(t, self.prev_weights.copy())
        w = policy.act_eval(s_t, self.context(t))
        if not np.isfinite(w).all():
            raise DivergenceDetected(f"policy produced non-finite weights at period {t}")
        try:
            outcome = self.execute(t, w, self.ledger)
        except Bankrupt:
            self.bankruptcies += 1
            self.reset_cursor()
            return None
        reward = env_reward(outcome, cfg)
        tr = Transition(state=s_t, action=w, reward=reward,
                        next_state=self.state(t + 1, w.copy()), period=t)
        self.prev_weights = w
        self.t += 1
        if self.t >= self.end_period:
            self.reset_cursor()
        return tr

    def greedy_sweep(self, policy, cfg: TrainConfig) -> tuple[float, float]:
        """One pass over every tradable period with a fresh ledger.

        Returns (accumulated log2 growth, accumulated reward); a bankruptcy
        cuts the sweep short and reports what was earned up to it.
        """
        ledger = Ledger.fresh(self.initial_amount, self.n_assets)
        prev = np.zeros(self.n_assets)
        ard = 0.0
        for t in range(self.first_period, self.end_period):
            w = policy.act_eval(self.state(t, prev), self.context(t))
            try:
                outcome = self.execute(t, w, ledger)
            except Bankrupt:
                self.bankruptcies += 1
                break
            ard += env_reward(outcome, cfg)
            prev = w
        return float(np.log2(ledger.total_value / self.initial_amount)), ard


# ---------------------------------------------------------------------------
# the training loops


def _sample_quantities(env: TrainingEnv, tr: Transition, cfg: TrainConfig):
    mu = env.realized_mean(tr.period)
    cov = env.realized_cov(tr.period)
    gamma = target_value(mu, cov, tr.state.prev_weights, cfg)
    return mu, cov, gamma


def _minibatch_update(env: TrainingEnv, policy, cfg: TrainConfig, batch,
                      mode: str) -> tuple[float, float]:
    """One ascent step from a sampled batch; returns (OP, EF) on that batch."""
    policy.params.zero_grad()
    thetas, rhos = [], []
    try:
        for tr in batch:
            mu, cov, gamma = _sample_quantities(env, tr, cfg)
            w = policy.act(tr.state, env.context(tr.period))
            rho = rho_graph(w, tr.state.prev_weights, mu, cov, cfg)
            deficit = gn.sub(gn.constant(np.asarray(gamma)), rho)
            theta = gn.neg(gn.mul(deficit, deficit))
            rhos.append(float(rho.value))
            thetas.append(float(theta.value))
            gn.backward(theta if mode == "target" else rho)
    except ValueError as err:
        # linear-algebra kernels reject non-finite operands once the
        # parameters have blown up
        raise DivergenceDetected(f"policy graph produced non-finite values: {err}") from err
    direction = {k: g / len(batch) for k, g in policy.params.grads().items()}
    policy.params.sgd_ascent(direction, cfg.learning_rate, clip_norm=cfg.clip_norm)
    return float(np.mean(thetas)), float(np.mean(rhos))


def _training_loop(env: TrainingEnv, policy, cfg: TrainConfig, mode: str,
                   checkpoint_dir=None):
    rng = np.random.default_rng(cfg.seed)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    trace = TrainTrace()
    steps = 0
    stage = 0
    while steps < cfg.total_steps:
        stage += 1
        buffer.clear()
        filled = 0
        failures = 0
        while filled < cfg.target_step:
            try:
                tr = env.rollout_step(policy, cfg)
            except DivergenceDetected as err:
                err.trace = trace
                raise
            if tr is None:
                failures += 1
                if failures > env.n_tradable and filled == 0:
                    # the current policy cannot survive any period; resets
                    # alone would spin forever
                    raise Bankrupt(f"every period bankrupts at stage {stage}")
                continue
            buffer.push(tr)
            filled += 1
        op = ef = float("nan")
        try:
            for _ in range(cfg.target_step // cfg.minibatch):
                batch = buffer.sample(rng, cfg.minibatch)
                op, ef = _minibatch_update(env, policy, cfg, batch, mode)
                steps += cfg.minibatch
                if not (np.isfinite(op) and np.isfinite(ef)) or \
                        not np.isfinite(policy.params.flatten()).all():
                    raise DivergenceDetected(
                        f"non-finite objective or parameters at stage {stage}")
        except DivergenceDetected as err:
            err.trace = trace
            raise
        ar_tr, ard_tr = env.greedy_sweep(policy, cfg)
        trace.append(StageRecord(stage=stage, steps=steps, op=op, ef=ef,
                                 ar_tr=ar_tr, ard_tr=ard_tr))
        if checkpoint_dir is not None:
            policy.save(f"{checkpoint_dir}/policy_stage{stage:04d}.ckpt")
    return policy.params, trace


def train(env: TrainingEnv, policy, cfg: TrainConfig, checkpoint_dir=None):
    """Squared-deficit training: push the evaluation value toward its target."""
    return _training_loop(env, policy, cfg, "target", checkpoint_dir)


def maximize_rho_train(env: TrainingEnv, policy, cfg: TrainConfig, checkpoint_dir=None):
    """Ablation: ascend the evaluation function directly."""
    return _training_loop(env, policy, cfg, "rho", checkpoint_dir)
