"""One-dimensional Bayesian optimization of the loss-blend weight.

A Gaussian-process surrogate (RBF kernel, hyperparameters picked by
marginal likelihood over a small grid) with closed-form expected
improvement, maximized over a fixed grid on [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from .errors import NumericError

_JITTER = 1e-8
GRID = np.linspace(0.0, 1.0, 1001)


@dataclass
class BoState:
    """Observations plus kernel hyperparameters of the surrogate."""

    lambdas: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    length_scale: float = 0.2
    signal_var: float = 1.0
    noise_var: float = 1e-6

    def add(self, lam: float, value: float) -> None:
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {lam}")
        self.lambdas.append(float(lam))
        self.values.append(float(value))

    @property
    def incumbent(self) -> tuple[float, float]:
        i = int(np.argmax(self.values))
        return self.lambdas[i], self.values[i]


def _rbf(a: np.ndarray, b: np.ndarray, length_scale: float, signal_var: float) -> np.ndarray:
    d = a[:, None] - b[None, :]
    return signal_var * np.exp(-0.5 * (d / length_scale) ** 2)


def _solve(state: BoState, x: np.ndarray, y: np.ndarray):
    """Cholesky of K + noise, escalating jitter on failure."""
    k = _rbf(x, x, state.length_scale, state.signal_var)
    jitter = _JITTER
    for _ in range(8):
        try:
            factor = cho_factor(k + (state.noise_var + jitter) * np.eye(len(x)),
                                lower=True)
            return factor, cho_solve(factor, y)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericError("GP kernel matrix is not positive definite after jitter escalation")


def gp_posterior(state: BoState, query) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance of the latent function at query points.

    Observations are centered on their mean, which is added back to the
    posterior mean; far from data the variance reverts to the signal
    variance.
    """
    if not state.lambdas:
        raise ValueError("gp_posterior requires at least one observation")
    x = np.asarray(state.lambdas, dtype=np.float64)
    y = np.asarray(state.values, dtype=np.float64)
    q = np.atleast_1d(np.asarray(query, dtype=np.float64))
    y_mean = y.mean()
    factor, alpha = _solve(state, x, y - y_mean)
    k_star = _rbf(q, x, state.length_scale, state.signal_var)
    mean = y_mean + k_star @ alpha
    v = cho_solve(factor, k_star.T)
    var = state.signal_var - np.einsum("ij,ji->i", k_star, v)
    return mean, np.clip(var, 0.0, None)


def expected_improvement(state: BoState, query) -> np.ndarray:
    """Closed-form EI for maximization; zero where the posterior is degenerate."""
    mean, var = gp_posterior(state, query)
    _, best = state.incumbent
    sd = np.sqrt(var)
    improve = mean - best
    ei = np.zeros_like(mean)
    pos = sd > 0
    z = improve[pos] / sd[pos]
    ei[pos] = improve[pos] * norm.cdf(z) + sd[pos] * norm.pdf(z)
    return np.clip(ei, 0.0, None)


_LS_GRID = (0.05, 0.1, 0.2, 0.35, 0.6, 1.0)
_NOISE_GRID = (1e-6, 1e-4, 1e-2)


def fit_hyperparameters(state: BoState) -> BoState:
    """Pick (length scale, signal var, noise var) by marginal likelihood
    over a small grid; robust, no gradient-based tuning."""
    x = np.asarray(state.lambdas, dtype=np.float64)
    y = np.asarray(state.values, dtype=np.float64)
    yc = y - y.mean()
    var = max(float(yc.var()), 1e-12)
    best = (state.length_scale, state.signal_var, state.noise_var)
    best_ll = -np.inf
    n = len(x)
    for ls in _LS_GRID:
        for sv in (0.5 * var, var, 2.0 * var):
            for nv in _NOISE_GRID:
                k = _rbf(x, x, ls, sv) + (nv * var + _JITTER) * np.eye(n)
                try:
                    factor = cho_factor(k, lower=True)
                except np.linalg.LinAlgError:
                    continue
                alpha = cho_solve(factor, yc)
                logdet = 2.0 * np.log(np.diag(factor[0])).sum()
                ll = -0.5 * (yc @ alpha) - 0.5 * logdet
                if ll > best_ll:
                    best_ll = ll
                    best = (ls, sv, nv * var + _JITTER)
    state.length_scale, state.signal_var, state.noise_var = best
    return state


@dataclass
class BoTraceEntry:
    lam: float
    value: float
    incumbent_lam: float
    incumbent_value: float


def optimize_lambda(objective: Callable[[float], float], budget: int = 20,
                    seed: int = 0) -> tuple[float, list[BoTraceEntry]]:
    """Maximize a scalar objective over [0, 1] with GP + EI on a fixed grid.

    Starts from lambda in {0, 0.5, 1}, then takes EI-argmax queries until
    ``budget`` evaluations are spent. Non-finite objective values are
    recorded as strongly negative and optimization continues. Fully
    deterministic for a given seed.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    rng = np.random.default_rng(seed)
    state = BoState()
    trace: list[BoTraceEntry] = []

    def observe(lam: float) -> None:
        value = objective(float(lam))
        if not np.isfinite(value):
            value = -1e9
        state.add(lam, value)
        inc_lam, inc_val = state.incumbent
        trace.append(BoTraceEntry(lam=float(lam), value=float(value),
                                  incumbent_lam=inc_lam, incumbent_value=inc_val))

    for lam in (0.0, 0.5, 1.0)[:budget]:
        observe(lam)

    while len(trace) < budget:
        fit_hyperparameters(state)
        ei = expected_improvement(state, GRID)
        seen = np.isin(GRID, np.asarray(state.lambdas))
        ei[seen] = -1.0                 # never re-query an observed grid point
        best = int(np.argmax(ei))
        if ei[best] <= 0.0:
            fresh = np.flatnonzero(~seen)
            best = int(rng.choice(fresh)) if fresh.size else int(rng.integers(len(GRID)))
        observe(GRID[best])

    best_lam, _ = state.incumbent
    return best_lam, trace
