"""Evaluation quantities: integrated survival error, averaged curves,
split-based variable importance, life-years-saved, and residual diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import ndtr

from . import hazard
from .data import SurvivalDataset
from .forest import Forest
from .pipeline import WeightedPosterior, weighted_quantile


@dataclass(frozen=True)
class EvaluationGrid:
    """Covariate grid, time grid, horizon, and replication count for the harness."""

    x_grid: np.ndarray
    t_grid: np.ndarray
    t_max: float = 10.0
    n_replications: int = 20

    def __post_init__(self):
        if self.x_grid.size == 0 or self.t_grid.size == 0:
            raise ValueError("grids must be nonempty")
        if np.any(np.diff(self.t_grid) <= 0):
            raise ValueError("t_grid must be increasing")

    @classmethod
    def default(
        cls,
        n_x: int = 11,
        n_t: int = 150,
        t_max: float = 10.0,
        n_replications: int = 20,
    ) -> "EvaluationGrid":
        """The 11 x 11 covariate lattice and 150 time points on (0, t_max]."""
        axis = np.linspace(0.0, 1.0, n_x)
        g1, g2 = np.meshgrid(axis, axis, indexing="ij")
        x_grid = np.column_stack([g1.ravel(), g2.ravel()])
        t_grid = np.linspace(0.0, t_max, n_t + 1)[1:]
        return cls(x_grid=x_grid, t_grid=t_grid, t_max=t_max, n_replications=n_replications)

    @property
    def x_axis(self) -> np.ndarray:
        """Unique sorted values of each covariate axis (valid for lattice grids)."""
        return np.unique(self.x_grid[:, 0])


def amse(true_curves: np.ndarray, fitted_curves: np.ndarray, grid: EvaluationGrid) -> float:
    """Mean integrated squared survival error.

    Both arrays are shaped (replications, clusters, x-points, t-points) on
    ``grid.t_grid``. The squared error is trapezoid-integrated over the grid's
    time span, normalized by that span, then averaged over x-points, clusters,
    and replications.
    """
    true_curves = np.asarray(true_curves, dtype=float)
    fitted_curves = np.asarray(fitted_curves, dtype=float)
    if true_curves.shape != fitted_curves.shape:
        raise ValueError("curve arrays must have identical shapes")
    if true_curves.ndim != 4 or true_curves.shape[-1] != grid.t_grid.shape[0]:
        raise ValueError("curves must be (reps, clusters, x, t) on the grid")
    sq = (true_curves - fitted_curves) ** 2
    span = float(grid.t_grid[-1] - grid.t_grid[0])
    integrated = np.trapezoid(sq, grid.t_grid, axis=-1) / span
    return float(integrated.mean())


def aes_curves(fitted_curves: np.ndarray) -> np.ndarray:
    """Average the per-replication curves pointwise (axis 0 is the replication)."""
    fitted_curves = np.asarray(fitted_curves, dtype=float)
    return fitted_curves.mean(axis=0)


@dataclass(frozen=True)
class ImportanceResult:
    scores: np.ndarray
    n_draws_used: int
    all_splitless: bool


def variable_importance(
    forests: list[Forest], n_features: int
) -> ImportanceResult:
    """Average share of split rules per feature across posterior forest draws.

    Draws without any split contribute nothing and are only counted in the
    ``all_splitless`` flag; within a contributing draw the shares sum to one.
    """
    totals = np.zeros(n_features)
    used = 0
    for fr in forests:
        counts = fr.split_counts(n_features).astype(float)
        c_total = counts.sum()
        if c_total == 0:
            continue
        totals += counts / c_total
        used += 1
    if used == 0:
        return ImportanceResult(np.zeros(n_features), 0, True)
    return ImportanceResult(totals / used, used, False)


@dataclass(frozen=True)
class LysResult:
    estimate: float
    lower: float
    upper: float


def lys(
    posterior: WeightedPosterior,
    x: np.ndarray,
    x_star: np.ndarray,
    cluster: int,
    horizon: float,
    t_max: float,
    m_override: float | None = None,
    m_star_override: float | None = None,
    n_grid: int = 101,
    level: float = 0.95,
) -> LysResult:
    """Expected life years saved within the horizon by moving x to x_star.

    Per draw, integrates S(t | x_star) - S(t | x) over (0, horizon) with the
    draw's own frailty and latent covariate held fixed (optionally overridden,
    e.g. to intervene on the latent proportion itself). Weighted mean plus a
    central credible interval from the weighted quantiles.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if not (0 <= cluster < posterior.m_hat.shape[0]):
        raise ValueError(f"unknown cluster {cluster}")
    grid = np.linspace(0.0, float(horizon), n_grid)
    draws = np.empty(posterior.n_draws)
    for s, state in enumerate(posterior.states):
        m_base = posterior.m_draws[s, cluster] if m_override is None else m_override
        m_star = posterior.m_draws[s, cluster] if m_star_override is None else m_star_override
        p_base = hazard.HazardParams(state.lambda0, float(state.log_frailty[cluster]), m_base)
        p_star = hazard.HazardParams(state.lambda0, float(state.log_frailty[cluster]), m_star)
        s_base = hazard.survival_curve(grid, x, p_base, state.forest, t_max)
        s_star = hazard.survival_curve(grid, x_star, p_star, state.forest, t_max)
        draws[s] = np.trapezoid(s_star - s_base, grid)
    est = float(posterior.weights @ draws)
    alpha = (1.0 - level) / 2.0
    lo, hi = weighted_quantile(draws, posterior.weights, [alpha, 1.0 - alpha])
    return LysResult(estimate=est, lower=float(lo), upper=float(hi))


@dataclass(frozen=True)
class CoxSnellResult:
    residuals: np.ndarray
    events: np.ndarray
    na_times: np.ndarray
    na_values: np.ndarray


def cox_snell_residuals(
    posterior: WeightedPosterior,
    dataset: SurvivalDataset,
    grid_size: int = 48,
    thin: int | None = 128,
) -> CoxSnellResult:
    """Fitted cumulative hazard at each observed time, with a Nelson-Aalen check.

    Uses the posterior-mean baseline rate and frailties, and the draw-averaged
    probit of the ensemble. Under a correct model the (residual, event) pairs
    behave like censored unit-exponential data, so their Nelson-Aalen
    cumulative hazard should track the 45-degree line.
    """
    t_max = dataset.scaler.t_max
    indices = np.arange(posterior.n_draws)
    weights = posterior.weights
    if thin is not None and thin < posterior.n_draws:
        indices = np.linspace(0, posterior.n_draws - 1, thin).astype(int)
        weights = posterior.weights[indices]
        weights = weights / weights.sum()

    lam_hat = float(weights @ np.array([posterior.states[s].lambda0 for s in indices]))
    w_hat = np.zeros(posterior.m_hat.shape[0])
    for wgt, s in zip(weights, indices):
        w_hat += wgt * np.exp(posterior.states[s].log_frailty)

    n = dataset.n_subjects
    # per-subject integration grid over (0, y_j)
    frac = np.linspace(0.0, 1.0, grid_size)
    t_nodes = dataset.times[:, None] * frac[None, :]
    subj = np.repeat(np.arange(n), grid_size)
    rows = hazard.assemble_rows(
        t_nodes.ravel(),
        np.zeros(n * grid_size),
        dataset.covariates[subj],
        t_max,
    )
    cidx = dataset.cluster_idx[subj]
    phi_bar = np.zeros(n * grid_size)
    for wgt, s in zip(weights, indices):
        rows[:, 1] = posterior.m_draws[s][cidx]
        phi_bar += wgt * ndtr(np.clip(posterior.states[s].forest.evaluate(rows), -12, 12))
    phi_bar = phi_bar.reshape(n, grid_size)
    integral = np.trapezoid(phi_bar, t_nodes, axis=1)
    residuals = lam_hat * w_hat[dataset.cluster_idx] * integral

    order = np.argsort(residuals, kind="stable")
    r_sorted = residuals[order]
    d_sorted = dataset.events[order].astype(float)
    at_risk = n - np.arange(n)
    na_values = np.cumsum(d_sorted / at_risk)
    return CoxSnellResult(
        residuals=residuals,
        events=dataset.events.copy(),
        na_times=r_sorted,
        na_values=na_values,
    )


def deviance_residuals(residuals: np.ndarray, events: np.ndarray) -> np.ndarray:
    """Signed square-root deviance transform of Cox-Snell residuals.

    With martingale residual m = delta - r, returns
    sign(m) * sqrt(-2 (m + delta log(delta - m))). Residuals at exactly zero
    with an event are clamped to a tiny positive value so the log stays finite.
    """
    r = np.asarray(residuals, dtype=float)
    delta = np.asarray(events, dtype=float)
    if np.any(r < 0):
        raise ValueError("Cox-Snell residuals must be nonnegative")
    m = delta - r
    safe_r = np.maximum(r, 1e-300)
    inner = -2.0 * (m + delta * np.log(safe_r))
    return np.sign(m) * np.sqrt(np.maximum(inner, 0.0))


# ------------------------------------------------------------------ csv files


def write_aes_csv(
    path,
    aes: np.ndarray,
    truth: np.ndarray,
    t_grid: np.ndarray,
    x_points: np.ndarray,
    clusters: np.ndarray | None = None,
) -> None:
    """Tidy curve table: one row per (cluster, x-point, t-point).

    ``aes`` and ``truth`` are (clusters, x-points, t-points).
    """
    aes = np.asarray(aes, dtype=float)
    truth = np.asarray(truth, dtype=float)
    n_c, n_x, n_t = aes.shape
    clusters = np.arange(1, n_c + 1) if clusters is None else np.asarray(clusters)
    ci, xi, ti = np.meshgrid(
        np.arange(n_c), np.arange(n_x), np.arange(n_t), indexing="ij"
    )
    pd.DataFrame(
        {
            "cluster": clusters[ci.ravel()],
            "x1": x_points[xi.ravel(), 0],
            "x2": x_points[xi.ravel(), 1],
            "t": t_grid[ti.ravel()],
            "estimate": aes.ravel(),
            "truth": truth.ravel(),
        }
    ).to_csv(path, index=False)


def write_residuals_csv(path, result: CoxSnellResult) -> None:
    """Residual table plus the Nelson-Aalen check points, sorted by residual."""
    order = np.argsort(result.residuals, kind="stable")
    dev = deviance_residuals(result.residuals, result.events)
    pd.DataFrame(
        {
            "residual": result.residuals[order],
            "event": result.events[order],
            "nelson_aalen": result.na_values,
            "deviance": dev[order],
        }
    ).to_csv(path, index=False)


def posterior_mean_survival_lattice(
    posterior: WeightedPosterior,
    x1_scaled: np.ndarray,
    x2_scaled: np.ndarray,
    t_grid: np.ndarray,
    t_max: float,
    thin: int | None = None,
) -> np.ndarray:
    """Posterior-mean survival on a (cluster, x1, x2, t) lattice.

    Exploits the tensor structure: each draw's ensemble is evaluated once on
    the (t, M, x1, x2) product grid, so per-branch logistics are computed per
    axis value instead of per lattice cell. This is what makes full-grid AMSE
    evaluation affordable.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    t_full = t_grid if t_grid[0] == 0.0 else np.concatenate([[0.0], t_grid])
    skip = t_full.shape[0] - t_grid.shape[0]
    t_axis = np.clip(t_full / t_max, 0.0, 1.0)

    indices = np.arange(posterior.n_draws)
    weights = posterior.weights
    if thin is not None and thin < posterior.n_draws:
        indices = np.linspace(0, posterior.n_draws - 1, thin).astype(int)
        weights = posterior.weights[indices]
        weights = weights / weights.sum()

    n_clusters = posterior.m_hat.shape[0]
    out = np.zeros((n_clusters, x1_scaled.shape[0], x2_scaled.shape[0], t_grid.shape[0]))
    dt = np.diff(t_full)
    for wgt, s in zip(weights, indices):
        state = posterior.states[s]
        b = state.forest.evaluate_on_lattice(
            [t_axis, posterior.m_draws[s], x1_scaled, x2_scaled]
        )
        phi = ndtr(np.clip(b, -12.0, 12.0))
        inc = 0.5 * dt[:, None, None, None] * (phi[1:] + phi[:-1])
        cum = np.concatenate(
            [np.zeros((1,) + inc.shape[1:]), np.cumsum(inc, axis=0)], axis=0
        )
        rate = state.lambda0 * np.exp(state.log_frailty)
        surv = np.exp(-rate[None, :, None, None] * cum)
        out += wgt * np.moveaxis(surv[skip:], 0, -1)
    return out
