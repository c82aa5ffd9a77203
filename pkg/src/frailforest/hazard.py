"""Hazard, survival, latent-point augmentation, and complete-data likelihood.

The hazard of a subject in cluster i is

    lambda(t) = lambda0 * W_i * Phi(b(t~, M_i, x)),

where W_i = exp(R_i) is the cluster frailty, M_i the latent cluster covariate,
Phi the standard normal CDF, and t~ = t / t_max the forest's time coordinate.
The dominating rate lambda0 * W_i makes thinning exact: candidate points on
(0, y) arrive at the dominating rate and survive with probability
1 - Phi(b), yielding the "rejected" latent points whose complete-data
likelihood is linear in per-point probit terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr

from .data import SurvivalRecord
from .forest import Forest

# Forest arguments beyond this magnitude saturate: Phi is 1 (or 0) to double
# precision well before 12, and the clamp keeps log terms finite.
B_CLIP = 12.0


def probit(b):
    return ndtr(np.clip(b, -B_CLIP, B_CLIP))


def log_probit(b):
    return log_ndtr(np.clip(b, -B_CLIP, B_CLIP))


def log_probit_complement(b):
    return log_ndtr(-np.clip(b, -B_CLIP, B_CLIP))


@dataclass(frozen=True)
class HazardParams:
    """Scalar hazard context for one cluster: baseline rate, log frailty, latent covariate."""

    lambda0: float
    log_frailty: float
    m_value: float

    def __post_init__(self):
        if self.lambda0 <= 0:
            raise ValueError("lambda0 must be positive")

    @property
    def frailty(self) -> float:
        return math.exp(self.log_frailty)


@dataclass(frozen=True)
class RejectedPoints:
    """Latent rejected times for every subject, stored as one flat arena.

    ``times[offsets[j]:offsets[j+1]]`` are subject j's points, sorted and
    strictly inside (0, y_j).
    """

    times: np.ndarray
    offsets: np.ndarray

    @property
    def total(self) -> int:
        return self.times.shape[0]

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def for_subject(self, j: int) -> np.ndarray:
        return self.times[self.offsets[j] : self.offsets[j + 1]]

    @classmethod
    def from_lists(cls, per_subject: list[np.ndarray]) -> "RejectedPoints":
        counts = np.array([len(p) for p in per_subject], dtype=int)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        times = np.concatenate([np.sort(p) for p in per_subject]) if counts.sum() else np.empty(0)
        return cls(times=times, offsets=offsets)


def forest_rows(times, m_value, x, t_max) -> np.ndarray:
    """Forest input rows [t~, M, x...] for several times at fixed (M, x)."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    x = np.asarray(x, dtype=float)
    rows = np.empty((times.shape[0], 2 + x.shape[0]))
    rows[:, 0] = np.clip(times / t_max, 0.0, 1.0)
    rows[:, 1] = m_value
    rows[:, 2:] = x
    return rows


def assemble_rows(times, m_values, X, t_max) -> np.ndarray:
    """Forest input rows for per-row (time, M, covariates) triples."""
    times = np.asarray(times, dtype=float)
    X = np.atleast_2d(X)
    rows = np.empty((times.shape[0], 2 + X.shape[1]))
    rows[:, 0] = np.clip(times / t_max, 0.0, 1.0)
    rows[:, 1] = m_values
    rows[:, 2:] = X
    return rows


def hazard_at(t, x, params: HazardParams, forest: Forest, t_max: float) -> float:
    """Instantaneous rate lambda0 * W * Phi(b); strictly below lambda0 * W."""
    b = forest.evaluate(forest_rows(t, params.m_value, x, t_max))
    return float(params.lambda0 * params.frailty * probit(b)[0])


def cumulative_hazard(
    t, x, params: HazardParams, forest: Forest, t_max: float, grid_size: int = 150
) -> float:
    """Trapezoidal cumulative hazard on a uniform grid over [0, t]."""
    if t <= 0:
        return 0.0
    grid = np.linspace(0.0, float(t), max(int(grid_size), 2))
    vals = probit(forest.evaluate(forest_rows(grid, params.m_value, x, t_max)))
    return float(params.lambda0 * params.frailty * np.trapezoid(vals, grid))


def survival_function(
    t, x, params: HazardParams, forest: Forest, t_max: float, grid_size: int = 150
) -> float:
    return math.exp(-cumulative_hazard(t, x, params, forest, t_max, grid_size))


def survival_curve(
    t_grid, x, params: HazardParams, forest: Forest, t_max: float
) -> np.ndarray:
    """S(t) along an increasing grid that starts at 0, via one cumulative trapezoid pass."""
    t_grid = np.asarray(t_grid, dtype=float)
    vals = probit(forest.evaluate(forest_rows(t_grid, params.m_value, x, t_max)))
    increments = 0.5 * np.diff(t_grid) * (vals[1:] + vals[:-1])
    cum = np.concatenate([[0.0], np.cumsum(increments)])
    return np.exp(-params.lambda0 * params.frailty * cum)


def augment_rejected_points(
    record: SurvivalRecord,
    params: HazardParams,
    forest: Forest,
    rng: np.random.Generator,
    t_max: float,
) -> np.ndarray:
    """Draw the latent rejected points for one subject.

    Candidates arrive as a Poisson(lambda0 * W * y) batch placed uniformly
    on (0, y); each survives with probability 1 - Phi(b) at its location,
    leaving a nonhomogeneous Poisson sample at the rejection intensity.
    """
    y = record.time
    q = rng.poisson(params.lambda0 * params.frailty * y)
    if q == 0:
        return np.empty(0)
    cand = rng.uniform(0.0, y, size=q)
    marks = rng.uniform(size=q)
    b = forest.evaluate(forest_rows(cand, params.m_value, record.covariates, t_max))
    keep = marks <= 1.0 - probit(b)
    return np.sort(cand[keep])


def augment_dataset(
    times: np.ndarray,
    cluster_idx: np.ndarray,
    X: np.ndarray,
    lambda0: float,
    log_frailty: np.ndarray,
    m_values: np.ndarray,
    forest: Forest,
    rng: np.random.Generator,
    t_max: float,
) -> RejectedPoints:
    """Vectorized rejected-point augmentation over every subject."""
    w = np.exp(log_frailty)[cluster_idx]
    q = rng.poisson(lambda0 * w * times)
    total = int(q.sum())
    offsets = np.concatenate([[0], np.cumsum(q)])
    if total == 0:
        n = times.shape[0]
        return RejectedPoints(times=np.empty(0), offsets=np.zeros(n + 1, dtype=int))
    subj = np.repeat(np.arange(times.shape[0]), q)
    cand = rng.uniform(0.0, 1.0, size=total) * times[subj]
    marks = rng.uniform(size=total)
    rows = assemble_rows(cand, m_values[cluster_idx[subj]], X[subj], t_max)
    keep = marks <= 1.0 - probit(forest.evaluate(rows))

    kept_subj = subj[keep]
    kept_times = cand[keep]
    order = np.lexsort((kept_times, kept_subj))
    kept_subj = kept_subj[order]
    kept_times = kept_times[order]
    counts = np.bincount(kept_subj, minlength=times.shape[0])
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return RejectedPoints(times=kept_times, offsets=offsets.astype(int))


def complete_loglik_subject(
    record: SurvivalRecord,
    points: np.ndarray,
    params: HazardParams,
    forest: Forest,
    t_max: float,
) -> float:
    """Complete-data log likelihood of one subject given its rejected points.

    delta * log(lambda0 W Phi(b(y))) + sum_k log(lambda0 W (1 - Phi(b(G_k))))
    - lambda0 W y. As a function of the forest alone this reduces to the
    probit terms, which is what the back-fitting update consumes.
    """
    points = np.asarray(points, dtype=float)
    if points.size and (points.min() <= 0 or points.max() >= record.time):
        raise ValueError("rejected points must lie strictly inside (0, y)")
    lam_w = params.lambda0 * params.frailty
    out = -lam_w * record.time
    if record.event:
        b_y = forest.evaluate(forest_rows(record.time, params.m_value, record.covariates, t_max))
        out += math.log(lam_w) + float(log_probit(b_y)[0])
    if points.size:
        b_g = forest.evaluate(forest_rows(points, params.m_value, record.covariates, t_max))
        out += points.size * math.log(lam_w) + float(log_probit_complement(b_g).sum())
    return out


def first_accepted_event_time(
    params: HazardParams,
    forest: Forest,
    x: np.ndarray,
    rng: np.random.Generator,
    t_max: float,
    horizon: float = np.inf,
) -> float:
    """Simulate one event time by thinning a dominating homogeneous process.

    Candidates arrive with Exp(lambda0 * W) gaps; each is accepted with
    probability Phi(b) at its location and the first accepted candidate is the
    event time. Returns ``horizon`` if no candidate is accepted before it
    (administrative censoring).
    """
    rate = params.lambda0 * params.frailty
    t = 0.0
    while True:
        t += rng.exponential(1.0 / rate)
        if t >= horizon:
            return float(horizon)
        b = forest.evaluate(forest_rows(t, params.m_value, x, t_max))
        if rng.uniform() <= probit(b)[0]:
            return t
