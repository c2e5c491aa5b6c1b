"""Black-Litterman mathematics on plain numpy arrays.

Pipeline: sample moments from a daily-return window, an implied prior
that makes the equal-weight portfolio optimal, a Bayesian blend of that
prior with per-asset views, and the unconstrained closed-form weights
for the blended distribution. All linear solves go through a symmetric
positive-definite factorization; nothing is inverted explicitly except
by solving against the identity where the inverse matrix itself is part
of the result.

Aggressiveness convention: the scalar ``delta`` multiplies the return
term of the objective 0.5 w'Cw - delta w'mu, so LARGER delta produces
larger positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .errors import InputError, TooFewSamples
from .gradnet.tensor import spd_factor

RIDGE_SCALE = 1e-8


@dataclass
class HistoricalMoments:
    """Sample covariance (ridge-stabilized) and mean of a return window."""

    cov: np.ndarray  # n x n
    sample_mean: np.ndarray  # n

    def __post_init__(self):
        self.cov = np.asarray(self.cov, dtype=np.float64)
        self.sample_mean = np.asarray(self.sample_mean, dtype=np.float64)
        n = self.sample_mean.size
        if self.cov.shape != (n, n):
            raise InputError(f"cov {self.cov.shape} vs mean {self.sample_mean.shape}")
        if not np.allclose(self.cov, self.cov.T, rtol=1e-9, atol=1e-14):
            raise InputError("covariance must be symmetric")


@dataclass
class ViewSet:
    """Per-asset return opinions and their uncertainty."""

    pick_matrix: np.ndarray  # v x n
    view_means: np.ndarray  # v
    confidence: float  # tau, scales the prior-uncertainty covariance
    omega: np.ndarray  # v x v diagonal

    def __post_init__(self):
        self.pick_matrix = np.asarray(self.pick_matrix, dtype=np.float64)
        self.view_means = np.asarray(self.view_means, dtype=np.float64)
        self.omega = np.asarray(self.omega, dtype=np.float64)
        v = self.view_means.size
        if self.pick_matrix.ndim != 2 or self.pick_matrix.shape[0] != v:
            raise InputError(f"pick matrix {self.pick_matrix.shape} vs {v} views")
        if self.omega.shape != (v, v):
            raise InputError(f"omega {self.omega.shape} vs {v} views")
        if np.any(self.omega != np.diag(np.diag(self.omega))):
            raise InputError("omega must be diagonal")
        if (np.diag(self.omega) <= 0).any():
            raise InputError("view uncertainties must be positive")
        if self.confidence <= 0:
            raise InputError("confidence tau must be positive")


@dataclass
class BlPosterior:
    """Blended return distribution ready for the closed-form optimizer."""

    mean: np.ndarray  # n
    cov: np.ndarray  # n x n, symmetric positive definite


def historical_cov(history, n_assets: int | None = None) -> HistoricalMoments:
    """Sample covariance of daily return rows with divisor rows - n - 1,
    plus a trace-scaled ridge on the diagonal."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2:
        raise InputError(f"history must be 2-D, got {history.shape}")
    rows, n = history.shape
    if n_assets is not None and n_assets != n:
        raise InputError(f"history has {n} columns, caller expected {n_assets}")
    if rows <= n + 1:
        raise TooFewSamples(f"{rows} rows for {n} assets; need more than {n + 1}")
    mean = history.mean(axis=0)
    centered = history - mean
    cov = centered.T @ centered / (rows - n - 1)
    cov += RIDGE_SCALE * np.trace(cov) / n * np.eye(n)
    return HistoricalMoments(cov=cov, sample_mean=mean)


def prior_mean(cov, delta: float, n: int | None = None) -> np.ndarray:
    """Implied equilibrium returns: the mean that makes w = e/n optimal."""
    cov = np.asarray(cov, dtype=np.float64)
    if delta <= 0:
        raise InputError("delta must be positive")
    if n is None:
        n = cov.shape[0]
    if cov.shape != (n, n):
        raise InputError(f"cov {cov.shape} vs n={n}")
    return cov @ np.full(n, 1.0 / (n * delta))


def absolute_views(moments: HistoricalMoments, view_means, tau: float = 1.0) -> ViewSet:
    """One view per asset: P = I and omega matched to the scaled covariance
    diagonal, so each view's weight is set by the asset's own variance."""
    n = moments.sample_mean.size
    view_means = np.asarray(view_means, dtype=np.float64)
    if view_means.shape != (n,):
        raise InputError(f"need {n} view means, got {view_means.shape}")
    return ViewSet(
        pick_matrix=np.eye(n),
        view_means=view_means,
        confidence=float(tau),
        omega=np.diag(np.diag(tau * moments.cov)),
    )


def posterior(moments: HistoricalMoments, views: ViewSet, prior) -> BlPosterior:
    """Precision-weighted blend of the prior with the views."""
    prior = np.asarray(prior, dtype=np.float64)
    n = moments.sample_mean.size
    if prior.shape != (n,):
        raise InputError(f"prior shape {prior.shape}, want ({n},)")
    p = views.pick_matrix
    if p.shape[1] != n:
        raise InputError(f"pick matrix {p.shape} vs {n} assets")
    tau_cov = views.confidence * moments.cov
    factor = spd_factor(tau_cov)
    eye = np.eye(n)
    tau_cov_inv = cho_solve(factor, eye)
    omega_inv_diag = 1.0 / np.diag(views.omega)
    precision = tau_cov_inv + (p.T * omega_inv_diag) @ p
    rhs = tau_cov_inv @ prior + p.T @ (omega_inv_diag * views.view_means)
    pfactor = spd_factor(precision)
    mean = cho_solve(pfactor, rhs)
    spread = cho_solve(pfactor, eye)
    cov = moments.cov + 0.5 * (spread + spread.T)
    return BlPosterior(mean=mean, cov=0.5 * (cov + cov.T))


def closed_form_weights(post: BlPosterior, delta: float):
    """Unconstrained optimum of 0.5 w'Cw - delta w'mu, plus the cash weight.

    Returns (risk_weights, cash_weight); weights may be negative (shorts)
    and the cash weight is whatever balances the total to one.
    """
    if delta <= 0:
        raise InputError("delta must be positive")
    factor = spd_factor(post.cov)
    w = delta * cho_solve(factor, post.mean)
    return w, float(1.0 - w.sum())
