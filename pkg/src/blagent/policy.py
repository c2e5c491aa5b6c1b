"""The deterministic policy: two networks driving a Bayesian allocator.

A Transformer digests the raw return history into one per-asset opinion
vector, a small CNN digests the same history into a positive
aggressiveness scalar, and the Black-Litterman blend plus closed-form
optimizer turn the pair into target weights. The entire map from
parameters to weights is built from gradnet primitives, so one backward
pass gives exact policy gradients.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import cho_solve

from . import gradnet as gn
from .blmodel import HistoricalMoments, historical_cov
from .errors import InputError, ShapeMismatch
from .gradnet.tensor import spd_factor
from .marketdata import AgentState

DELTA_FLOOR = 1e-4

HEAD_MODES = ("bl", "softmax")


@dataclass(frozen=True)
class TransformerConfig:
    """Dimensions and switches for the view network."""

    model_dim: int = 29  # = number of assets
    depth: int = 6
    attn_scale: float = 1.0  # d in the score divisor sqrt(d)
    head_hidden: int = 3712  # l, width of the output head
    mlp_hidden: int | None = None  # defaults to 4 * model_dim
    positional_encoding: bool = False

    def __post_init__(self):
        if self.depth < 1 or self.model_dim < 1 or self.head_hidden < 1:
            raise InputError("transformer dimensions must be positive")
        if self.attn_scale <= 0:
            raise InputError("attention scale must be positive")

    @property
    def mlp_width(self) -> int:
        return self.mlp_hidden if self.mlp_hidden is not None else 4 * self.model_dim


@dataclass
class ViewOutput:
    """Per-asset return opinions plus the aggressiveness scalar."""

    q: np.ndarray
    delta: float

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        if not np.isfinite(self.q).all():
            raise InputError("views must be finite")
        if self.delta <= 0:
            raise InputError("delta must be positive")


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table; odd widths drop the last cosine column."""
    pos = np.arange(length)[:, None]
    half = (dim + 1) // 2
    freq = np.exp(-math.log(10_000.0) * 2.0 * np.arange(half) / dim)
    angles = pos * freq[None, :]
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : dim // 2])
    return table


def pooled_dim(size: int) -> int:
    """Spatial size after one 2x2 max pool (short axes pass through)."""
    return size // 2 if size >= 2 else size


def cnn_flat_dim(rows: int, cols: int) -> int:
    h = pooled_dim(pooled_dim(rows))
    w = pooled_dim(pooled_dim(cols))
    return 16 * h * w


def policy_param_specs(cfg: TransformerConfig, history_rows: int) -> list:
    """Declare every learnable tensor for both networks."""
    n = cfg.model_dim
    specs = [gn.ParamSpec("views/token", (1, n), role="embedding")]
    for i in range(cfg.depth):
        for ln in ("ln1", "ln2"):
            specs.append(gn.ParamSpec(f"enc{i}/{ln}/gain", (n,), role="gain"))
            specs.append(gn.ParamSpec(f"enc{i}/{ln}/bias", (n,), role="bias"))
        for proj in ("wq", "wk", "wv"):
            specs.append(gn.ParamSpec(f"enc{i}/attn/{proj}", (n, n)))
        specs.append(gn.ParamSpec(f"enc{i}/mlp/w1", (n, cfg.mlp_width)))
        specs.append(gn.ParamSpec(f"enc{i}/mlp/b1", (cfg.mlp_width,), role="bias"))
        specs.append(gn.ParamSpec(f"enc{i}/mlp/w2", (cfg.mlp_width, n)))
        specs.append(gn.ParamSpec(f"enc{i}/mlp/b2", (n,), role="bias"))
    specs.append(gn.ParamSpec("views/head/w1", (n, cfg.head_hidden)))
    specs.append(gn.ParamSpec("views/head/w2", (cfg.head_hidden, n)))

    flat = cnn_flat_dim(history_rows, n)
    specs += [
        gn.ParamSpec("risk/conv1/k", (8, 1, 3, 3)),
        gn.ParamSpec("risk/conv1/b", (8,), role="bias"),
        gn.ParamSpec("risk/conv2/k", (16, 8, 3, 3)),
        gn.ParamSpec("risk/conv2/b", (16,), role="bias"),
        gn.ParamSpec("risk/fc1/w", (flat, 32)),
        gn.ParamSpec("risk/fc1/b", (32,), role="bias"),
        gn.ParamSpec("risk/fc2/w", (32, 1)),
        gn.ParamSpec("risk/fc2/b", (1,), role="bias"),
    ]
    return specs


def _encoder_stack(z, params: gn.ParamStore, cfg: TransformerConfig):
    inv_scale = 1.0 / math.sqrt(cfg.attn_scale)
    for i in range(cfg.depth):
        h = gn.layer_norm(z, params[f"enc{i}/ln1/gain"], params[f"enc{i}/ln1/bias"])
        q = gn.matmul(h, params[f"enc{i}/attn/wq"])
        k = gn.matmul(h, params[f"enc{i}/attn/wk"])
        v = gn.matmul(h, params[f"enc{i}/attn/wv"])
        scores = gn.scale(gn.matmul(q, gn.transpose(k)), inv_scale)
        z = gn.add(gn.matmul(gn.softmax_rows(scores), v), z)
        h2 = gn.layer_norm(z, params[f"enc{i}/ln2/gain"], params[f"enc{i}/ln2/bias"])
        m = gn.gelu(gn.add(gn.matmul(h2, params[f"enc{i}/mlp/w1"]), params[f"enc{i}/mlp/b1"]))
        m = gn.add(gn.matmul(m, params[f"enc{i}/mlp/w2"]), params[f"enc{i}/mlp/b2"])
        z = gn.add(m, z)
    return z


def transformer_views(state: AgentState, params: gn.ParamStore, cfg: TransformerConfig,
                      cov_diag=None):
    """Opinion vector Q as a (1, n) graph tensor.

    The history rows themselves are the patch sequence; a learnable token
    is prepended and its final representation feeds the two-layer head.
    The head output is calibrated by each asset's historical variance.
    """
    rows, n = state.history.shape
    if n != cfg.model_dim:
        raise ShapeMismatch(f"history width {n} vs model dim {cfg.model_dim}")
    if cov_diag is None:
        cov_diag = np.diag(historical_cov(state.history).cov)
    z = gn.concat([params["views/token"], gn.constant(state.history)], axis=0)
    if cfg.positional_encoding:
        z = gn.add(z, gn.constant(sinusoidal_encoding(rows + 1, n)))
    z = _encoder_stack(z, params, cfg)
    token = gn.narrow(z, 0, 0, 1)  # (1, n)
    hidden = gn.log_sigmoid(gn.matmul(token, params["views/head/w1"]))
    y = gn.matmul(hidden, params["views/head/w2"])
    return gn.mul(y, gn.constant(np.asarray(cov_diag)))


def cnn_risk_aversion(state: AgentState, params: gn.ParamStore):
    """Aggressiveness scalar as a (1, 1) graph tensor, strictly positive."""
    rows, n = state.history.shape
    x = gn.reshape(gn.constant(state.history), (1, rows, n))
    h = gn.maxpool2d(gn.gelu(gn.conv2d(x, params["risk/conv1/k"], params["risk/conv1/b"], pad=1)))
    h = gn.maxpool2d(gn.gelu(gn.conv2d(h, params["risk/conv2/k"], params["risk/conv2/b"], pad=1)))
    flat = gn.reshape(h, (1, int(np.prod(h.value.shape))))
    h = gn.gelu(gn.add(gn.matmul(flat, params["risk/fc1/w"]), params["risk/fc1/b"]))
    out = gn.add(gn.matmul(h, params["risk/fc2/w"]), params["risk/fc2/b"])
    return gn.add(gn.softplus(out), gn.constant(np.full((1, 1), DELTA_FLOOR)))


@dataclass
class BlContext:
    """Per-state constants of the allocator: everything that does not
    depend on the networks' outputs, precomputed once and reused."""

    cov: np.ndarray  # n x n sample covariance
    cov_diag: np.ndarray  # its diagonal
    tau_cov_inv: np.ndarray  # (tau * cov)^-1
    precision: np.ndarray  # blend precision matrix A
    post_cov: np.ndarray  # posterior covariance cov + A^-1
    prior_base: np.ndarray  # (n, 1) column: cov @ e / n, divided by delta later
    omega_inv: np.ndarray  # (n, 1) column: per-view precision
    tau: float


def bl_context(moments: HistoricalMoments, tau: float = 1.0) -> BlContext:
    cov = moments.cov
    n = cov.shape[0]
    eye = np.eye(n)
    tau_cov_inv = cho_solve(spd_factor(tau * cov), eye)
    omega_inv = 1.0 / (tau * np.diag(cov))
    precision = tau_cov_inv + np.diag(omega_inv)
    spread = cho_solve(spd_factor(precision), eye)
    post_cov = cov + 0.5 * (spread + spread.T)
    return BlContext(
        cov=cov,
        cov_diag=np.diag(cov).copy(),
        tau_cov_inv=tau_cov_inv,
        precision=precision,
        post_cov=0.5 * (post_cov + post_cov.T),
        prior_base=(cov @ np.full(n, 1.0 / n))[:, None],
        omega_inv=omega_inv[:, None],
        tau=tau,
    )


def context_for_state(state: AgentState, tau: float = 1.0) -> BlContext:
    return bl_context(historical_cov(state.history), tau)


def bl_weights_graph(q, delta, ctx: BlContext):
    """Differentiable allocator stage: views + aggressiveness -> weights.

    ``q`` is a (1, n) or (n, 1) tensor, ``delta`` a (1, 1) tensor; the
    result is an (n, 1) column of risk-asset weights.
    """
    n = ctx.cov.shape[0]
    q_col = gn.reshape(q, (n, 1))
    prior = gn.div(gn.constant(ctx.prior_base), delta)
    rhs = gn.add(gn.matmul(gn.constant(ctx.tau_cov_inv), prior),
                 gn.mul(gn.constant(ctx.omega_inv), q_col))
    mean = gn.spd_solve(gn.constant(ctx.precision), rhs)
    return gn.mul(gn.spd_solve(gn.constant(ctx.post_cov), mean), delta)


def policy_forward(state: AgentState, params: gn.ParamStore, cfg: TransformerConfig,
                   ctx: BlContext | None = None, tau: float = 1.0):
    """Full differentiable policy: state -> (n, 1) weight column tensor."""
    if ctx is None:
        ctx = context_for_state(state, tau)
    q = transformer_views(state, params, cfg, cov_diag=ctx.cov_diag)
    delta = cnn_risk_aversion(state, params)
    return bl_weights_graph(q, delta, ctx)


def softmax_weights_graph(q):
    """Ablation allocator: weights = Softmax(views), long-only, sum one."""
    return gn.transpose(gn.softmax_rows(q))


def softmax_policy_forward(state: AgentState, params: gn.ParamStore, cfg: TransformerConfig,
                           ctx: BlContext | None = None, tau: float = 1.0):
    """Ablation policy head: softmax over the view vector, CNN unused."""
    cov_diag = ctx.cov_diag if ctx is not None else None
    q = transformer_views(state, params, cfg, cov_diag=cov_diag)
    return softmax_weights_graph(q)


class BlackLittermanPolicy:
    """Parameter bundle plus config, with graph and evaluation entry points."""

    def __init__(self, cfg: TransformerConfig, params: gn.ParamStore,
                 history_rows: int, head: str = "bl", tau: float = 1.0):
        if head not in HEAD_MODES:
            raise InputError(f"head must be one of {HEAD_MODES}")
        self.cfg = cfg
        self.params = params
        self.history_rows = int(history_rows)
        self.head = head
        self.tau = float(tau)

    @classmethod
    def build(cls, n_assets: int, history_rows: int, seed: int, depth: int = 6,
              attn_scale: float = 1.0, head_hidden: int = 3712,
              mlp_hidden: int | None = None, positional_encoding: bool = False,
              head: str = "bl", tau: float = 1.0) -> "BlackLittermanPolicy":
        cfg = TransformerConfig(model_dim=n_assets, depth=depth, attn_scale=attn_scale,
                                head_hidden=head_hidden, mlp_hidden=mlp_hidden,
                                positional_encoding=positional_encoding)
        params = gn.ParamStore.build(policy_param_specs(cfg, history_rows), seed=seed)
        return cls(cfg, params, history_rows, head=head, tau=tau)

    @property
    def n_assets(self) -> int:
        return self.cfg.model_dim

    def act(self, state: AgentState, ctx: BlContext | None = None):
        """Weight column as a live graph tensor (for training)."""
        if self.head == "softmax":
            return softmax_policy_forward(state, self.params, self.cfg, ctx, self.tau)
        return policy_forward(state, self.params, self.cfg, ctx, self.tau)

    def act_eval(self, state: AgentState, ctx: BlContext | None = None) -> np.ndarray:
        """Weight vector as a plain array (no tape)."""
        with gn.no_grad():
            return self.act(state, ctx).value[:, 0].copy()

    def views_eval(self, state: AgentState, ctx: BlContext | None = None) -> ViewOutput:
        """Evaluate both networks without the allocator."""
        cov_diag = ctx.cov_diag if ctx is not None else None
        with gn.no_grad():
            q = transformer_views(state, self.params, self.cfg, cov_diag=cov_diag)
            delta = cnn_risk_aversion(state, self.params)
        return ViewOutput(q=q.value[0], delta=float(delta.value[0, 0]))

    def config_dict(self) -> dict:
        out = asdict(self.cfg)
        out.update(history_rows=self.history_rows, head=self.head, tau=self.tau)
        return out

    def save(self, path):
        self.params.save(path, config=self.config_dict())

    @classmethod
    def load(cls, path) -> "BlackLittermanPolicy":
        params = gn.ParamStore.load(path)
        meta = gn.load_sidecar(path)
        cfg = TransformerConfig(
            model_dim=meta["model_dim"], depth=meta["depth"],
            attn_scale=meta["attn_scale"], head_hidden=meta["head_hidden"],
            mlp_hidden=meta["mlp_hidden"],
            positional_encoding=meta["positional_encoding"],
        )
        return cls(cfg, params, meta["history_rows"], head=meta["head"], tau=meta["tau"])
