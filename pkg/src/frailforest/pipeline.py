"""Three-step inference: survey imputation, survival MCMC, importance reweighting.

Step 1 samples the latent cluster proportions M from the survey data alone
(HMC on logit(M) under a CAR prior) and summarizes them by the posterior mean
M-hat. Step 2 runs the survival chain with M-hat plugged in: every iteration
re-augments the latent rejected points, redraws the probit latents, back-fits
the forest, and updates the baseline rate, the log frailties (HMC), and the
frailty CAR parameters. Step 3 pairs Step-1 and Step-2 draws and reweights
them by the complete-data likelihood ratio of M versus M-hat, in which every
factor except the probit terms cancels.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from . import forest as forest_mod
from . import hazard, samplers, spatial
from .data import CovariateScaler, SurveyCounts, SurvivalDataset
from .forest import Forest, ForestPrior
from .hazard import RejectedPoints


class NumericalError(RuntimeError):
    """Raised when a run is numerically untrustworthy (e.g. divergent HMC)."""


@dataclass
class Priors:
    """Hyperparameters shared by the samplers (rho is uniform on the graph's proper range)."""

    lambda0_shape: float = 0.01
    lambda0_rate: float = 0.01
    sigma2_shape: float = 1.0
    sigma2_scale: float = 1.0


@dataclass
class McmcSettings:
    burnin: int = 2500
    samples: int = 5000
    thin: int = 1
    step_size: float = 0.1
    n_leapfrog: int = 25
    adapt_target: float = 0.8
    max_divergence_rate: float = 0.01
    lambda0_update: str = "gibbs"  # or "mh", for A/B comparison


@dataclass
class SmuPosterior:
    """Step-1 output: survey-posterior draws of M and (sigma0^2, rho0), plus M-hat."""

    m_samples: np.ndarray
    eta0_samples: np.ndarray
    m_hat: np.ndarray


@dataclass
class ChainState:
    """One Step-2 draw of every survival-model unknown."""

    forest: Forest
    lambda0: float
    log_frailty: np.ndarray
    eta1: tuple[float, float]
    rejected: RejectedPoints
    latent_z: np.ndarray


@dataclass
class WeightedPosterior:
    """Index-paired Step-1/Step-2 draws with normalized importance weights."""

    states: list[ChainState]
    m_draws: np.ndarray
    m_hat: np.ndarray
    log_weights: np.ndarray
    weights: np.ndarray
    ess: float
    degenerate: bool

    @property
    def n_draws(self) -> int:
        return len(self.states)

    @classmethod
    def from_states(cls, states: list[ChainState], m_hat: np.ndarray) -> "WeightedPosterior":
        """Plug-in posterior: M fixed at M-hat, uniform weights."""
        s = len(states)
        return cls(
            states=states,
            m_draws=np.tile(np.asarray(m_hat, dtype=float), (s, 1)),
            m_hat=np.asarray(m_hat, dtype=float),
            log_weights=np.zeros(s),
            weights=np.full(s, 1.0 / s),
            ess=float(s),
            degenerate=False,
        )


# --------------------------------------------------------------------- step 1


def step1_impute(
    survey: SurveyCounts,
    structure: spatial.CarStructure,
    priors: Priors,
    settings: McmcSettings,
    rng: np.random.Generator,
) -> SmuPosterior:
    """Sample the latent cluster proportions from the survey submodel.

    HMC moves theta = logit(M) under the binomial likelihood plus the CAR
    prior; sigma0^2 is a conjugate inverse-gamma block and rho0 a Metropolis
    step. M-hat averages M itself, not theta.
    """
    n = structure.n_nodes
    if survey.n_clusters != n:
        raise ValueError("survey not aligned with the graph")
    n0 = survey.n0.astype(float)
    m0 = survey.m0.astype(float)

    theta = logit((m0 + 0.5) / (n0 + 1.0))
    sigma2, rho = 1.0, 0.0

    def make_target(sig2, rho_val):
        params = spatial.CarParams(sig2, rho_val)

        def value(th):
            binom = float(m0 @ th - n0 @ np.logaddexp(0.0, th))
            return binom + spatial.car_log_density(th, params, structure)

        def grad(th):
            return m0 - n0 * expit(th) + spatial.car_grad(th, params, structure)

        return samplers.LogDensityTarget(n, value, grad)

    hmc = samplers.HmcSettings(
        step_size=settings.step_size,
        n_leapfrog=settings.n_leapfrog,
        adapt_target=settings.adapt_target,
    )
    adapt = samplers.DualAveraging(target=settings.adapt_target, initial_step=hmc.step_size)

    m_samples, eta0_samples = [], []
    divergences = 0
    total_main = settings.samples * settings.thin
    for it in range(settings.burnin + total_main):
        target = make_target(sigma2, rho)
        result = samplers.hmc_step(target, theta, hmc, rng)
        theta = result.state
        if it < settings.burnin:
            accept_prob = 0.0 if result.divergent else min(1.0, math.exp(-result.energy_error))
            hmc.step_size = adapt.update(accept_prob)
            if it == settings.burnin - 1:
                hmc.step_size = adapt.finalize()
        else:
            divergences += int(result.divergent)
        sigma2 = spatial.gibbs_sigma2(
            theta, structure, rho, (priors.sigma2_shape, priors.sigma2_scale), rng
        )
        rho = spatial.update_rho(rho, theta, structure, sigma2, rng)
        kept = it - settings.burnin
        if kept >= 0 and (kept + 1) % settings.thin == 0:
            # expit saturates to exactly 0/1 past |theta| ~ 37; keep the open support
            m = np.clip(expit(theta), np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
            m_samples.append(m)
            eta0_samples.append((sigma2, rho))

    _check_divergences(divergences, total_main, settings.max_divergence_rate, "survey imputation")
    m_arr = np.asarray(m_samples)
    return SmuPosterior(
        m_samples=m_arr,
        eta0_samples=np.asarray(eta0_samples),
        m_hat=m_arr.mean(axis=0),
    )


def _check_divergences(count: int, total: int, max_rate: float, label: str) -> None:
    if total > 0 and count / total > max_rate:
        raise NumericalError(
            f"{label}: {count}/{total} divergent transitions exceeds the "
            f"{max_rate:.1%} tolerance"
        )


# --------------------------------------------------------------------- step 2


class Step2Kernel:
    """One full survival-chain iteration, reusable outside :func:`step2_run`.

    Holds the mutable chain state; ``step`` performs augmentation, probit
    latents, forest back-fit, the lambda0 draw, the frailty HMC block, and the
    CAR parameter updates, in that order. ``set_data`` swaps in new response
    data (used by simulation-based kernel validation).
    """

    def __init__(
        self,
        dataset: SurvivalDataset,
        m_hat: np.ndarray,
        structure: spatial.CarStructure,
        priors: Priors,
        settings: McmcSettings,
        forest_prior: ForestPrior,
        rng: np.random.Generator,
    ):
        self.structure = structure
        self.priors = priors
        self.settings = settings
        self.forest_prior = forest_prior
        self.rng = rng
        self.m_hat = np.asarray(m_hat, dtype=float)
        self.n_clusters = structure.n_nodes
        self.cluster_idx = dataset.cluster_idx
        self.X = dataset.covariates
        self.t_max = dataset.scaler.t_max
        self.n_features = 2 + dataset.n_covariates
        self.set_data(dataset.times, dataset.events)

        self.forest = forest_mod.single_leaf_forest(forest_prior)
        self.lambda0 = 2.0 * max(float(self.events.sum()), 1.0) / float(self.times.sum())
        self.log_frailty = np.zeros(self.n_clusters)
        self.sigma2 = 1.0
        self.rho = 0.0
        self.rejected = RejectedPoints(
            times=np.empty(0), offsets=np.zeros(dataset.n_subjects + 1, dtype=int)
        )
        self.latent_z = np.empty(0)

        self.hmc = samplers.HmcSettings(
            step_size=settings.step_size,
            n_leapfrog=settings.n_leapfrog,
            adapt_target=settings.adapt_target,
        )
        self._adapt = samplers.DualAveraging(
            target=settings.adapt_target, initial_step=settings.step_size
        )

    def set_data(self, times, events) -> None:
        self.times = np.asarray(times, dtype=float)
        self.events = np.asarray(events, dtype=int)
        n = self.n_clusters
        self.cluster_time_sum = np.bincount(self.cluster_idx, weights=self.times, minlength=n)
        self.cluster_event_count = np.bincount(
            self.cluster_idx, weights=self.events.astype(float), minlength=n
        )
        ev = self.events == 1
        self._event_mask = ev
        self._event_rows = hazard.assemble_rows(
            self.times[ev], self.m_hat[self.cluster_idx[ev]], self.X[ev], self.t_max
        )

    def frailty_target(self) -> samplers.LogDensityTarget:
        """Conditional log density of the log frailties given everything else."""
        delta = self.cluster_event_count + np.bincount(
            self.cluster_idx, weights=self.rejected.counts.astype(float), minlength=self.n_clusters
        )
        tsum = self.cluster_time_sum
        lam0 = self.lambda0
        params = spatial.CarParams(self.sigma2, self.rho)
        structure = self.structure

        def value(r):
            if not np.all(np.isfinite(r)):
                return -math.inf
            with np.errstate(over="ignore"):
                w = np.exp(r)
            lik = float(delta @ r - lam0 * (w @ tsum))
            if not math.isfinite(lik):
                return -math.inf
            return lik + spatial.car_log_density(r, params, structure)

        def grad(r):
            with np.errstate(over="ignore"):
                w = np.exp(r)
            return delta - lam0 * w * tsum + spatial.car_grad(r, params, structure)

        return samplers.LogDensityTarget(self.n_clusters, value, grad)

    def update_latents(self) -> np.ndarray:
        """Re-augment the rejected points and redraw every probit latent.

        Returns the stacked forest-input rows (events first, then rejected
        points) that the latents were drawn against.
        """
        rng = self.rng
        self.rejected = hazard.augment_dataset(
            self.times,
            self.cluster_idx,
            self.X,
            self.lambda0,
            self.log_frailty,
            self.m_hat,
            self.forest,
            rng,
            self.t_max,
        )
        subj = np.repeat(np.arange(self.times.shape[0]), self.rejected.counts)
        g_rows = hazard.assemble_rows(
            self.rejected.times, self.m_hat[self.cluster_idx[subj]], self.X[subj], self.t_max
        )
        rows = np.vstack([self._event_rows, g_rows])
        # per-tree weight matrices serve both the latent means here and the
        # back-fit sweep afterwards
        self._phis = [t.leaf_weight_matrix(rows) for t in self.forest.trees]
        b_vals = np.zeros(rows.shape[0])
        for phi, tree in zip(self._phis, self.forest.trees):
            b_vals += phi @ tree.leaf_values()
        n_ev = self._event_rows.shape[0]
        z = np.empty(rows.shape[0])
        if n_ev:
            z[:n_ev] = samplers.sample_truncated_normal(b_vals[:n_ev], "positive", rng)
        if rows.shape[0] > n_ev:
            z[n_ev:] = samplers.sample_truncated_normal(b_vals[n_ev:], "negative", rng)
        self.latent_z = z
        return rows

    def update_forest(self, rows: np.ndarray) -> None:
        phis = getattr(self, "_phis", None)
        self._phis = None
        forest_mod.backfit_sweep(
            self.forest, self.latent_z, rows, self.forest_prior, self.rng, phis=phis
        )

    def lambda0_conditional(self) -> tuple[float, float]:
        """Shape and rate of the Gamma conditional for the baseline rate."""
        shape = self.priors.lambda0_shape + float(self.events.sum()) + self.rejected.total
        rate = self.priors.lambda0_rate + float(
            np.exp(self.log_frailty) @ self.cluster_time_sum
        )
        return shape, rate

    def update_lambda0(self) -> None:
        shape, rate = self.lambda0_conditional()
        if self.settings.lambda0_update == "mh":
            self.lambda0 = _lambda0_metropolis(self.lambda0, shape, rate, self.rng)
        else:
            self.lambda0 = self.rng.gamma(shape) / rate

    def update_frailty(self, adapt: bool = False) -> samplers.HmcResult:
        result = samplers.hmc_step(self.frailty_target(), self.log_frailty, self.hmc, self.rng)
        self.log_frailty = result.state
        if adapt:
            accept_prob = 0.0 if result.divergent else min(1.0, math.exp(-result.energy_error))
            self.hmc.step_size = self._adapt.update(accept_prob)
        return result

    def update_car_params(self) -> None:
        self.sigma2 = spatial.gibbs_sigma2(
            self.log_frailty,
            self.structure,
            self.rho,
            (self.priors.sigma2_shape, self.priors.sigma2_scale),
            self.rng,
        )
        self.rho = spatial.update_rho(
            self.rho, self.log_frailty, self.structure, self.sigma2, self.rng
        )

    def step(self, adapt: bool = False) -> dict:
        rows = self.update_latents()
        self.update_forest(rows)
        self.update_lambda0()
        result = self.update_frailty(adapt=adapt)
        self.update_car_params()
        return {"accepted": result.accepted, "divergent": result.divergent}

    def freeze_step_size(self) -> None:
        self.hmc.step_size = self._adapt.finalize()

    def snapshot(self) -> ChainState:
        return ChainState(
            forest=self.forest.copy(),
            lambda0=float(self.lambda0),
            log_frailty=self.log_frailty.copy(),
            eta1=(float(self.sigma2), float(self.rho)),
            rejected=self.rejected,
            latent_z=self.latent_z.copy(),
        )


def _lambda0_metropolis(lam: float, shape: float, rate: float, rng) -> float:
    """Log-scale random walk targeting the same Gamma conditional as the Gibbs draw."""
    prop = lam * math.exp(rng.normal(0.0, 0.25))
    log_ratio = shape * (math.log(prop) - math.log(lam)) - rate * (prop - lam)
    if math.log(rng.uniform()) < log_ratio:
        return prop
    return lam


def step2_run(
    dataset: SurvivalDataset,
    m_hat: np.ndarray,
    structure: spatial.CarStructure,
    priors: Priors,
    settings: McmcSettings,
    forest_prior: ForestPrior,
    rng: np.random.Generator,
) -> tuple[list[ChainState], dict]:
    """Run the survival chain and return thinned kept states plus diagnostics."""
    if np.any(dataset.cluster_idx < 0) or np.any(dataset.cluster_idx >= structure.n_nodes):
        raise ValueError("dataset cluster indices outside the graph")
    kernel = Step2Kernel(dataset, m_hat, structure, priors, settings, forest_prior, rng)
    for _ in range(settings.burnin):
        kernel.step(adapt=True)
    kernel.freeze_step_size()

    states: list[ChainState] = []
    divergences = 0
    total_main = settings.samples * settings.thin
    for it in range(total_main):
        info = kernel.step(adapt=False)
        divergences += int(info["divergent"])
        if (it + 1) % settings.thin == 0:
            states.append(kernel.snapshot())
    _check_divergences(divergences, total_main, settings.max_divergence_rate, "survival chain")
    diagnostics = {
        "divergences": divergences,
        "main_iterations": total_main,
        "step_size": kernel.hmc.step_size,
    }
    return states, diagnostics


# --------------------------------------------------------------------- step 3


def step3_weights(
    states: list[ChainState],
    smu: SmuPosterior,
    dataset: SurvivalDataset,
    m_hat: np.ndarray,
) -> WeightedPosterior:
    """Importance weights correcting the M-hat plug-in.

    Per paired draw, the log weight sums the probit log-likelihood differences
    between that draw's M and M-hat over the observed events and the draw's
    rejected points; the baseline-rate, frailty, and exponential factors are
    identical in numerator and denominator and drop out.
    """
    m_hat = np.asarray(m_hat, dtype=float)
    s = min(len(states), smu.m_samples.shape[0])
    if s == 0:
        raise ValueError("no draws to weight")
    idx_chain = np.unique(np.linspace(0, len(states) - 1, s).astype(int))
    idx_smu = np.unique(np.linspace(0, smu.m_samples.shape[0] - 1, s).astype(int))
    s = min(idx_chain.size, idx_smu.size)
    idx_chain, idx_smu = idx_chain[:s], idx_smu[:s]

    t_max = dataset.scaler.t_max
    ev = dataset.events == 1
    ev_cluster = dataset.cluster_idx[ev]
    ev_times = dataset.times[ev]
    ev_x = dataset.covariates[ev]

    log_w = np.zeros(s)
    kept_states = []
    m_draws = np.empty((s, m_hat.shape[0]))
    for k in range(s):
        state = states[int(idx_chain[k])]
        m_s = smu.m_samples[int(idx_smu[k])]
        kept_states.append(state)
        m_draws[k] = m_s

        subj = np.repeat(np.arange(dataset.n_subjects), state.rejected.counts)
        g_cluster = dataset.cluster_idx[subj]
        rows_ev = hazard.assemble_rows(ev_times, m_hat[ev_cluster], ev_x, t_max)
        rows_g = hazard.assemble_rows(
            state.rejected.times, m_hat[g_cluster], dataset.covariates[subj], t_max
        )

        def probit_loglik(m_vec):
            # identical m vectors must yield bitwise-identical sums so the
            # ratio cancels exactly; keep the two evaluations symmetric
            rows_ev[:, 1] = m_vec[ev_cluster]
            total = float(hazard.log_probit(state.forest.evaluate(rows_ev)).sum())
            if rows_g.shape[0]:
                rows_g[:, 1] = m_vec[g_cluster]
                total += float(
                    hazard.log_probit_complement(state.forest.evaluate(rows_g)).sum()
                )
            return total

        log_w[k] = probit_loglik(m_s) - probit_loglik(m_hat)

    weights = _normalize_log_weights(log_w)
    ess = 1.0 / float(weights @ weights)
    degenerate = ess < 0.05 * s
    if degenerate:
        warnings.warn(
            f"importance reweighting is degenerate: ESS {ess:.1f} of {s} draws",
            RuntimeWarning,
        )
    return WeightedPosterior(
        states=kept_states,
        m_draws=m_draws,
        m_hat=m_hat,
        log_weights=log_w,
        weights=weights,
        ess=ess,
        degenerate=degenerate,
    )


def _normalize_log_weights(log_w: np.ndarray) -> np.ndarray:
    shifted = log_w - log_w.max()
    w = np.exp(shifted)
    return w / w.sum()


def weighted_quantile(values: np.ndarray, weights: np.ndarray, q) -> np.ndarray:
    """Quantiles of a weighted sample (linear interpolation of the weighted CDF)."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values)
    v = values[order]
    cdf = np.cumsum(weights[order])
    cdf = cdf / cdf[-1]
    return np.interp(np.atleast_1d(q), cdf, v)


# ---------------------------------------------------------------- predictions


@dataclass
class PredictionResult:
    t: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def predict_survival(
    posterior: WeightedPosterior,
    x: np.ndarray,
    cluster: int,
    t_grid: np.ndarray,
    t_max: float,
    level: float = 0.95,
    thin: int | None = None,
) -> PredictionResult:
    """Weighted posterior survival curve with pointwise credible bands.

    ``x`` must already be in model (scaled) coordinates. Grids beyond the
    observed horizon warn; beyond 1.5x the horizon they error, because the
    trees carry no information out there.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or np.any(np.diff(t_grid) <= 0) or t_grid[0] < 0:
        raise ValueError("t_grid must be increasing and nonnegative")
    if t_grid[-1] > 1.5 * t_max:
        raise ValueError(f"prediction grid exceeds 1.5 * t_max = {1.5 * t_max:.3f}")
    if t_grid[-1] > t_max:
        warnings.warn("predicting beyond the observed time support", RuntimeWarning)
    if not (0 <= cluster < posterior.m_hat.shape[0]):
        raise ValueError(f"unknown cluster {cluster}")

    indices = np.arange(posterior.n_draws)
    weights = posterior.weights
    if thin is not None and thin < posterior.n_draws:
        indices = np.linspace(0, posterior.n_draws - 1, thin).astype(int)
        weights = posterior.weights[indices]
        weights = weights / weights.sum()

    grid = t_grid if t_grid[0] == 0.0 else np.concatenate([[0.0], t_grid])
    skip = grid.shape[0] - t_grid.shape[0]
    curves = np.empty((indices.size, t_grid.shape[0]))
    for row, s in enumerate(indices):
        state = posterior.states[s]
        params = hazard.HazardParams(
            lambda0=state.lambda0,
            log_frailty=float(state.log_frailty[cluster]),
            m_value=float(posterior.m_draws[s, cluster]),
        )
        curves[row] = hazard.survival_curve(grid, x, params, state.forest, t_max)[skip:]

    mean = weights @ curves
    alpha = (1.0 - level) / 2.0
    lower = np.empty_like(mean)
    upper = np.empty_like(mean)
    for j in range(t_grid.shape[0]):
        lower[j], upper[j] = weighted_quantile(curves[:, j], weights, [alpha, 1.0 - alpha])
    return PredictionResult(t=t_grid, mean=mean, lower=lower, upper=upper)


@dataclass
class PriorPredictiveResult:
    t: np.ndarray
    mean: np.ndarray
    start_values: np.ndarray
    monotone_violations: int


def prior_predictive_check(
    priors: Priors,
    forest_prior: ForestPrior,
    structure: spatial.CarStructure,
    x: np.ndarray,
    t_grid: np.ndarray,
    n_draws: int,
    rng: np.random.Generator,
    t_max: float,
    cluster: int = 0,
    m_value: float = 0.5,
    fixed_lambda0: float | None = None,
    fixed_frailty: float | None = None,
) -> PriorPredictiveResult:
    """Monte Carlo mean of the prior predictive survival curve.

    Every draw's curve starts at 1 and is checked for monotone decrease; the
    count of violations is returned (it should be zero, since the integrand
    is a nonnegative rate).
    """
    t_grid = np.asarray(t_grid, dtype=float)
    grid = t_grid if t_grid[0] == 0.0 else np.concatenate([[0.0], t_grid])
    skip = grid.shape[0] - t_grid.shape[0]
    lo, hi = spatial.rho_bounds(structure)

    total = np.zeros(t_grid.shape[0])
    starts = np.empty(n_draws)
    violations = 0
    n_features = 2 + np.asarray(x).shape[0]
    for k in range(n_draws):
        lam0 = (
            fixed_lambda0
            if fixed_lambda0 is not None
            else rng.gamma(priors.lambda0_shape) / priors.lambda0_rate
        )
        if fixed_frailty is not None:
            log_w = math.log(fixed_frailty)
        else:
            sigma2 = priors.sigma2_scale / rng.gamma(priors.sigma2_shape)
            rho = rng.uniform(lo, hi)
            log_w = float(
                spatial.sample_car(spatial.CarParams(sigma2, rho), structure, rng)[cluster]
            )
        fr = forest_mod.sample_prior_forest(forest_prior, n_features, rng)
        params = hazard.HazardParams(lambda0=lam0, log_frailty=log_w, m_value=m_value)
        curve = hazard.survival_curve(grid, x, params, fr, t_max)
        starts[k] = curve[0]
        if np.any(np.diff(curve) > 1e-12):
            violations += 1
        total += curve[skip:]
    return PriorPredictiveResult(
        t=t_grid,
        mean=total / n_draws,
        start_values=starts,
        monotone_violations=violations,
    )


# ------------------------------------------------------------- artifact files


def save_posterior(
    out_dir,
    posterior: WeightedPosterior,
    scaler: CovariateScaler,
    cluster_sizes: np.ndarray | None = None,
) -> None:
    """Write the columnar posterior artifact: scalars, forests, weights, M draws.

    ``cluster_sizes`` (subjects per cluster in the fitted data) is carried in
    the M-hat table so downstream summaries can relate estimates to sample
    size without re-reading the training data.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = posterior.m_hat.shape[0]

    rows = {
        "draw": np.arange(posterior.n_draws),
        "lambda0": [st.lambda0 for st in posterior.states],
        "sigma2_1": [st.eta1[0] for st in posterior.states],
        "rho_1": [st.eta1[1] for st in posterior.states],
    }
    for i in range(n):
        rows[f"r_{i + 1}"] = [float(st.log_frailty[i]) for st in posterior.states]
    pd.DataFrame(rows).to_csv(out / "scalars.csv", index=False)

    with open(out / "forests.jsonl", "w") as fh:
        for st in posterior.states:
            fh.write(forest_mod.forest_to_json(st.forest) + "\n")

    pd.DataFrame(
        {
            "draw": np.arange(posterior.n_draws),
            "log_weight": posterior.log_weights,
            "weight": posterior.weights,
        }
    ).to_csv(out / "weights.csv", index=False)

    m_cols = {"draw": np.arange(posterior.n_draws)}
    for i in range(n):
        m_cols[f"m_{i + 1}"] = posterior.m_draws[:, i]
    pd.DataFrame(m_cols).to_csv(out / "m_draws.csv", index=False)

    m_hat_table = {"cluster_id": np.arange(1, n + 1), "m_hat": posterior.m_hat}
    if cluster_sizes is not None:
        m_hat_table["n_subjects"] = np.asarray(cluster_sizes, dtype=int)
    pd.DataFrame(m_hat_table).to_csv(out / "m_hat.csv", index=False)

    with open(out / "scaler.json", "w") as fh:
        json.dump(scaler.to_dict(), fh, indent=2)


def load_posterior(artifact_dir) -> tuple[WeightedPosterior, CovariateScaler]:
    """Rebuild a WeightedPosterior (without latent augmentation) from disk."""
    art = Path(artifact_dir)
    scalars = pd.read_csv(art / "scalars.csv", float_precision="round_trip")
    weights = pd.read_csv(art / "weights.csv", float_precision="round_trip")
    m_draws_df = pd.read_csv(art / "m_draws.csv", float_precision="round_trip")
    m_hat = pd.read_csv(
        art / "m_hat.csv", float_precision="round_trip"
    )["m_hat"].to_numpy(dtype=float)
    with open(art / "scaler.json") as fh:
        scaler = CovariateScaler.from_dict(json.load(fh))

    n = m_hat.shape[0]
    r_cols = [f"r_{i + 1}" for i in range(n)]
    forests = []
    with open(art / "forests.jsonl") as fh:
        for line in fh:
            if line.strip():
                forests.append(forest_mod.forest_from_json(line))

    empty = RejectedPoints(times=np.empty(0), offsets=np.zeros(1, dtype=int))
    states = [
        ChainState(
            forest=forests[k],
            lambda0=float(scalars["lambda0"].iloc[k]),
            log_frailty=scalars[r_cols].iloc[k].to_numpy(dtype=float),
            eta1=(float(scalars["sigma2_1"].iloc[k]), float(scalars["rho_1"].iloc[k])),
            rejected=empty,
            latent_z=np.empty(0),
        )
        for k in range(len(scalars))
    ]
    w = weights["weight"].to_numpy(dtype=float)
    ess = 1.0 / float(w @ w)
    posterior = WeightedPosterior(
        states=states,
        m_draws=m_draws_df[[f"m_{i + 1}" for i in range(n)]].to_numpy(dtype=float),
        m_hat=m_hat,
        log_weights=weights["log_weight"].to_numpy(dtype=float),
        weights=w,
        ess=ess,
        degenerate=ess < 0.05 * len(states),
    )
    return posterior, scaler


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Named independent generators so each stage is reproducible on its own."""
    root = np.random.SeedSequence(seed)
    names = ("data", "step1", "step2", "step3")
    children = root.spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}
