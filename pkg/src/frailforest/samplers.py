"""Generic MCMC kernels: Hamiltonian Monte Carlo, step-size adaptation, and
one-sided truncated-normal draws for probit augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class HmcSettings:
    step_size: float = 0.1
    n_leapfrog: int = 25
    mass: np.ndarray | None = None
    adapt_target: float = 0.8
    divergence_threshold: float = 1e3

    def __post_init__(self):
        if self.step_size <= 0 or self.n_leapfrog < 1:
            raise ValueError("step size and trajectory length must be positive")
        if not (0.0 < self.adapt_target < 1.0):
            raise ValueError("adapt_target must be inside (0, 1)")


@dataclass(frozen=True)
class LogDensityTarget:
    """A differentiable log density: dimension, value, and gradient callables."""

    dim: int
    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class HmcResult:
    state: np.ndarray
    accepted: bool
    energy_error: float
    divergent: bool


def check_gradient(
    target: LogDensityTarget,
    rng: np.random.Generator,
    n_points: int = 20,
    scale: float = 1.0,
    h: float = 1e-6,
    rtol: float = 1e-6,
) -> float:
    """Central finite-difference audit of the target gradient.

    Raises ValueError if any coordinate at any probe point misses the
    numerical derivative by more than ``rtol`` relative error; returns the
    worst relative error seen.
    """
    worst = 0.0
    for _ in range(n_points):
        theta = scale * rng.standard_normal(target.dim)
        g = np.asarray(target.grad(theta), dtype=float)
        for i in range(target.dim):
            step = np.zeros(target.dim)
            step[i] = h
            num = (target.value(theta + step) - target.value(theta - step)) / (2.0 * h)
            denom = max(abs(num), abs(g[i]), 1e-10)
            rel = abs(g[i] - num) / denom
            worst = max(worst, rel)
            if rel > rtol:
                raise ValueError(
                    f"gradient mismatch at coordinate {i}: analytic {g[i]:.10g}, "
                    f"numeric {num:.10g}, rel err {rel:.3g}"
                )
    return worst


def leapfrog(
    target: LogDensityTarget,
    q: np.ndarray,
    p: np.ndarray,
    step_size: float,
    n_steps: int,
    inv_mass: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Stormer-Verlet integration of Hamilton's equations for -log pi.

    Overflow is allowed to produce non-finite states; the Metropolis wrapper
    treats those as divergent rejections.
    """
    q = q.astype(float).copy()
    p = p.astype(float).copy()
    with np.errstate(over="ignore", invalid="ignore"):
        p += 0.5 * step_size * target.grad(q)
        for step in range(n_steps):
            q += step_size * inv_mass * p
            g = target.grad(q)
            p += (step_size if step < n_steps - 1 else 0.5 * step_size) * g
    return q, p


def hmc_step(
    target: LogDensityTarget,
    state: np.ndarray,
    settings: HmcSettings,
    rng: np.random.Generator,
) -> HmcResult:
    """One Metropolis-adjusted leapfrog trajectory.

    Non-finite energies or energy errors above the divergence threshold reject
    immediately and flag the transition as divergent.
    """
    state = np.asarray(state, dtype=float)
    mass = settings.mass if settings.mass is not None else np.ones(target.dim)
    inv_mass = 1.0 / mass

    p0 = np.sqrt(mass) * rng.standard_normal(target.dim)
    h0 = -target.value(state) + 0.5 * float(inv_mass @ p0**2)
    q, p = leapfrog(target, state, p0, settings.step_size, settings.n_leapfrog, inv_mass)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
        return HmcResult(state, False, math.inf, True)
    with np.errstate(over="ignore", invalid="ignore"):
        h1 = -target.value(q) + 0.5 * float(inv_mass @ p**2)
    energy_error = h1 - h0
    if not math.isfinite(energy_error) or abs(energy_error) > settings.divergence_threshold:
        return HmcResult(state, False, energy_error, True)
    if math.log(rng.uniform()) < -energy_error:
        return HmcResult(q, True, energy_error, False)
    return HmcResult(state, False, energy_error, False)


@dataclass
class DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance rate.

    ``update`` is called once per burn-in transition with that transition's
    acceptance probability; ``finalize`` returns the averaged step size to
    freeze for the sampling phase.
    """

    target: float = 0.8
    initial_step: float = 0.1
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    _mu: float = field(init=False)
    _h_bar: float = field(init=False, default=0.0)
    _log_eps_bar: float = field(init=False, default=0.0)
    _count: int = field(init=False, default=0)

    def __post_init__(self):
        self._mu = math.log(10.0 * self.initial_step)

    def update(self, accept_prob: float) -> float:
        self._count += 1
        t = self._count
        eta = 1.0 / (t + self.t0)
        self._h_bar = (1.0 - eta) * self._h_bar + eta * (self.target - accept_prob)
        log_eps = self._mu - math.sqrt(t) / self.gamma * self._h_bar
        w = t ** (-self.kappa)
        self._log_eps_bar = w * log_eps + (1.0 - w) * self._log_eps_bar
        return math.exp(log_eps)

    def finalize(self) -> float:
        if self._count == 0:
            return self.initial_step
        return math.exp(self._log_eps_bar)


def adapt_step_size(accept_history, settings: HmcSettings) -> float:
    """Replay a history of acceptance probabilities through dual averaging."""
    da = DualAveraging(target=settings.adapt_target, initial_step=settings.step_size)
    eps = settings.step_size
    for a in accept_history:
        eps = da.update(a)
    return eps


# ----------------------------------------------------- truncated normal draws


def _standard_lower_truncated(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draws of xi ~ N(0,1) conditioned on xi > a_i, elementwise.

    Plain rejection in the bulk; for far-right truncation the translated
    exponential proposal of Robert (1995), which stays exact and fast for
    arbitrarily extreme bounds.
    """
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    pending = np.ones(a.shape, dtype=bool)

    easy = a <= 0.3
    idx = np.flatnonzero(easy)
    while idx.size:
        draw = rng.standard_normal(idx.size)
        ok = draw > a[idx]
        out[idx[ok]] = draw[ok]
        idx = idx[~ok]
    pending[easy] = False

    idx = np.flatnonzero(pending)
    while idx.size:
        bound = a[idx]
        lam = 0.5 * (bound + np.sqrt(bound**2 + 4.0))
        draw = bound + rng.exponential(1.0, size=idx.size) / lam
        ok = rng.uniform(size=idx.size) <= np.exp(-0.5 * (draw - lam) ** 2)
        out[idx[ok]] = draw[ok]
        idx = idx[~ok]
    return out


def sample_truncated_normal(mean, side: str, rng: np.random.Generator, size=None):
    """Exact draw from Normal(mean, 1) restricted to a half line.

    ``side='positive'`` restricts to (0, inf), ``side='negative'`` to
    (-inf, 0); a vector ``mean`` yields one draw per entry.
    """
    mean_arr = np.atleast_1d(np.asarray(mean, dtype=float))
    if size is not None and mean_arr.shape[0] == 1:
        mean_arr = np.full(size, mean_arr[0])
    if side == "positive":
        draws = mean_arr + _standard_lower_truncated(-mean_arr, rng)
    elif side == "negative":
        draws = -(-mean_arr + _standard_lower_truncated(mean_arr, rng))
    else:
        raise ValueError("side must be 'positive' or 'negative'")
    if np.isscalar(mean) and size is None:
        return float(draws[0])
    return draws
