"""Proper conditional-autoregressive (CAR) models on a neighborhood graph.

A CAR vector R has density MVN(0, sigma^2 (D - rho A)^{-1}) where A is the
0/1 adjacency and D = diag(degrees). Positive definiteness of D - rho A is
equivalent to 1 - rho * lam_i > 0 for every generalized eigenvalue lam_i of
D^{-1/2} A D^{-1/2}; those eigenvalues are computed once per graph and reused
by densities, bounds, samplers, and parameter updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, eigh, solve_triangular

from .data import AdjacencyGraph


@dataclass(frozen=True)
class CarStructure:
    """Graph plus cached spectral quantities shared by all CAR operations."""

    graph: AdjacencyGraph
    eigenvalues: np.ndarray
    log_det_d: float

    @classmethod
    def from_graph(cls, graph: AdjacencyGraph) -> "CarStructure":
        deg = graph.degrees
        inv_sqrt = 1.0 / np.sqrt(deg)
        scaled = inv_sqrt[:, None] * graph.matrix * inv_sqrt[None, :]
        lam = np.sort(eigh(scaled, eigvals_only=True))
        return cls(graph=graph, eigenvalues=lam, log_det_d=float(np.log(deg).sum()))

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes

    @property
    def degrees(self) -> np.ndarray:
        return self.graph.degrees

    def precision_part(self, rho: float) -> np.ndarray:
        """The matrix D - rho A (precision up to the 1/sigma^2 factor)."""
        return np.diag(self.degrees) - rho * self.graph.matrix


@dataclass(frozen=True)
class CarParams:
    sigma2: float
    rho: float


def rho_bounds(structure: CarStructure) -> tuple[float, float]:
    """Open interval of rho values for which D - rho A is positive definite."""
    lam = structure.eigenvalues
    lo, hi = float(lam[0]), float(lam[-1])
    if lo >= 0 or hi <= 0:
        raise ValueError("degenerate graph spectrum")
    return 1.0 / lo, 1.0 / hi


def _check_rho(structure: CarStructure, rho: float) -> None:
    lo, hi = rho_bounds(structure)
    if not (lo < rho < hi):
        raise ValueError(f"rho={rho} outside the proper range ({lo:.6f}, {hi:.6f})")


def car_log_density(R: np.ndarray, params: CarParams, structure: CarStructure) -> float:
    """Exact multivariate-normal log density of a CAR vector."""
    _check_rho(structure, params.rho)
    R = np.asarray(R, dtype=float)
    n = structure.n_nodes
    if R.shape != (n,):
        raise ValueError("vector length must match the graph")
    logdet_prec = (
        -n * math.log(params.sigma2)
        + structure.log_det_d
        + float(np.log1p(-params.rho * structure.eigenvalues).sum())
    )
    quad = car_quadratic_form(R, structure, params.rho) / params.sigma2
    return 0.5 * logdet_prec - 0.5 * n * math.log(2.0 * math.pi) - 0.5 * quad


def car_quadratic_form(R: np.ndarray, structure: CarStructure, rho: float) -> float:
    """R' (D - rho A) R without forming the matrix product twice."""
    R = np.asarray(R, dtype=float)
    return float(structure.degrees @ R**2 - rho * (R @ (structure.graph.matrix @ R)))


def car_grad(R: np.ndarray, params: CarParams, structure: CarStructure) -> np.ndarray:
    """Gradient of :func:`car_log_density` in R."""
    _check_rho(structure, params.rho)
    R = np.asarray(R, dtype=float)
    return -(structure.degrees * R - params.rho * (structure.graph.matrix @ R)) / params.sigma2


def sample_car(params: CarParams, structure: CarStructure, rng: np.random.Generator) -> np.ndarray:
    """Exact joint draw via a Cholesky factor of the precision."""
    _check_rho(structure, params.rho)
    prec = structure.precision_part(params.rho) / params.sigma2
    try:
        upper = cholesky(prec, lower=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - interior rho is PD
        raise ValueError("precision factorization failed") from exc
    return solve_triangular(upper, rng.standard_normal(structure.n_nodes), lower=False)


def gibbs_sigma2(
    R: np.ndarray,
    structure: CarStructure,
    rho: float,
    prior: tuple[float, float],
    rng: np.random.Generator,
) -> float:
    """Conjugate inverse-gamma draw for the CAR variance.

    With prior InverseGamma(a, b), the conditional is
    InverseGamma(a + N/2, b + R'(D - rho A)R / 2).
    """
    _check_rho(structure, rho)
    a, b = prior
    shape = a + structure.n_nodes / 2.0
    scale = b + car_quadratic_form(R, structure, rho) / 2.0
    return scale / rng.gamma(shape)


def update_rho(
    rho: float,
    R: np.ndarray,
    structure: CarStructure,
    sigma2: float,
    rng: np.random.Generator,
    step_frac: float = 0.1,
) -> float:
    """One random-walk Metropolis step for rho under a uniform prior on its proper range.

    The conditional target is 0.5 * sum(log(1 - rho lam_i)) - R'(D - rho A)R / (2 sigma^2);
    proposals beyond the range are rejected outright.
    """
    lo, hi = rho_bounds(structure)
    prop = rho + rng.normal(0.0, step_frac * (hi - lo))
    if not (lo < prop < hi):
        return rho

    def log_target(r):
        return (
            0.5 * float(np.log1p(-r * structure.eigenvalues).sum())
            - car_quadratic_form(R, structure, r) / (2.0 * sigma2)
        )

    if math.log(rng.uniform()) < log_target(prop) - log_target(rho):
        return prop
    return rho
