"""Ingestion and validation of survival records, adjacency graphs, and survey counts.

All loaders consume UTF-8 CSV files with a header row. File-level cluster ids
are 1-based; everything downstream works with 0-based indices. Continuous
covariates are rescaled to the open unit interval, which is the support every
tree split assumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

EPS = 1e-6

RESERVED_COLUMNS = ("cluster_id", "time", "event")


class DataValidationError(ValueError):
    """Raised when an input file violates the documented format or ranges."""


@dataclass(frozen=True)
class SurvivalRecord:
    """One subject: cluster index (0-based), follow-up time, event flag, scaled covariates."""

    cluster_id: int
    time: float
    event: int
    covariates: np.ndarray


@dataclass
class ColumnSpec:
    """Which covariate columns are continuous vs categorical.

    Columns not named anywhere are treated as continuous. Categorical levels
    are encoded as equally spaced points in [0, 1] (binary becomes {0, 1}).
    """

    continuous: Sequence[str] = ()
    categorical: Sequence[str] = ()


@dataclass
class CovariateScaler:
    """Affine map of each continuous covariate onto (EPS, 1 - EPS), plus the time scale.

    Fitted from the training data; prediction-time inputs outside the observed
    range are clamped to the open interval rather than extrapolated.
    """

    columns: list[str]
    continuous_mask: np.ndarray
    mins: np.ndarray
    maxs: np.ndarray
    t_max: float
    categorical_levels: dict[str, list] = field(default_factory=dict)

    def scale(self, raw: np.ndarray) -> np.ndarray:
        """Map raw covariate rows (n, p) onto the open unit cube."""
        raw = np.atleast_2d(np.asarray(raw, dtype=float))
        out = raw.copy()
        cont = self.continuous_mask
        span = self.maxs[cont] - self.mins[cont]
        unit = (raw[:, cont] - self.mins[cont]) / span
        out[:, cont] = EPS + (1.0 - 2.0 * EPS) * unit
        out[:, cont] = np.clip(out[:, cont], EPS, 1.0 - EPS)
        return out

    def unscale(self, scaled: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`scale` for in-range values."""
        scaled = np.atleast_2d(np.asarray(scaled, dtype=float))
        out = scaled.copy()
        cont = self.continuous_mask
        span = self.maxs[cont] - self.mins[cont]
        unit = (scaled[:, cont] - EPS) / (1.0 - 2.0 * EPS)
        out[:, cont] = self.mins[cont] + unit * span
        return out

    def scale_time(self, t) -> np.ndarray:
        """Map times onto [0, 1] using the fitted horizon; saturates beyond t_max."""
        return np.clip(np.asarray(t, dtype=float) / self.t_max, 0.0, 1.0)

    def scale_column(self, j: int, values) -> np.ndarray:
        """Scale raw values of covariate column j alone."""
        values = np.asarray(values, dtype=float)
        if not self.continuous_mask[j]:
            return np.clip(values, 0.0, 1.0)
        unit = (values - self.mins[j]) / (self.maxs[j] - self.mins[j])
        return np.clip(EPS + (1.0 - 2.0 * EPS) * unit, EPS, 1.0 - EPS)

    def to_dict(self) -> dict:
        return {
            "columns": self.columns,
            "continuous_mask": self.continuous_mask.tolist(),
            "mins": self.mins.tolist(),
            "maxs": self.maxs.tolist(),
            "t_max": self.t_max,
            "categorical_levels": self.categorical_levels,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "CovariateScaler":
        return cls(
            columns=list(obj["columns"]),
            continuous_mask=np.asarray(obj["continuous_mask"], dtype=bool),
            mins=np.asarray(obj["mins"], dtype=float),
            maxs=np.asarray(obj["maxs"], dtype=float),
            t_max=float(obj["t_max"]),
            categorical_levels=dict(obj.get("categorical_levels", {})),
        )

    def encode_row(self, values: dict) -> np.ndarray:
        """Scale one raw covariate mapping {column: value} into model coordinates."""
        raw = np.empty(len(self.columns))
        for k, name in enumerate(self.columns):
            if name not in values:
                raise DataValidationError(f"missing covariate '{name}'")
            v = values[name]
            if name in self.categorical_levels:
                raw[k] = _encode_level(v, self.categorical_levels[name], name)
            else:
                raw[k] = float(v)
        return self.scale(raw[None, :])[0]


@dataclass(frozen=True)
class AdjacencyGraph:
    """Symmetric 0/1 adjacency with zero diagonal; every node must have a neighbor."""

    matrix: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DataValidationError("adjacency must be a square matrix")
        if not np.array_equal(a, a.T):
            raise DataValidationError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise DataValidationError("self-loop: adjacency diagonal must be zero")
        if not np.all(np.isin(a, (0.0, 1.0))):
            raise DataValidationError("adjacency entries must be 0 or 1")
        deg = a.sum(axis=1)
        if np.any(deg == 0):
            bad = int(np.flatnonzero(deg == 0)[0]) + 1
            raise DataValidationError(
                f"isolated node {bad}: every cluster needs at least one neighbor"
            )
        object.__setattr__(self, "matrix", a)

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    @classmethod
    def from_edges(cls, edges: Sequence[tuple[int, int]], n_nodes: int) -> "AdjacencyGraph":
        """Build from 1-based (i, j) pairs."""
        a = np.zeros((n_nodes, n_nodes))
        for i, j in edges:
            if i == j:
                raise DataValidationError(f"self-loop at node {i}")
            if not (1 <= i <= n_nodes and 1 <= j <= n_nodes):
                raise DataValidationError(f"edge ({i},{j}) outside 1..{n_nodes}")
            a[i - 1, j - 1] = 1.0
            a[j - 1, i - 1] = 1.0
        return cls(a)


@dataclass(frozen=True)
class SurveyCounts:
    """Per-cluster survey size n0 and success count m0, aligned to graph node order."""

    n0: np.ndarray
    m0: np.ndarray

    def __post_init__(self):
        n0 = np.asarray(self.n0, dtype=int)
        m0 = np.asarray(self.m0, dtype=int)
        if n0.shape != m0.shape:
            raise DataValidationError("survey n0 and m0 lengths differ")
        if np.any(n0 < 0) or np.any(m0 < 0):
            raise DataValidationError("survey counts must be nonnegative")
        if np.any(m0 > n0):
            bad = int(np.flatnonzero(m0 > n0)[0]) + 1
            raise DataValidationError(f"cluster {bad}: m0 exceeds n0")
        object.__setattr__(self, "n0", n0)
        object.__setattr__(self, "m0", m0)

    @property
    def n_clusters(self) -> int:
        return self.n0.shape[0]


@dataclass(frozen=True)
class SurvivalDataset:
    """Column-stacked view of a record list, used by the fitting pipeline."""

    cluster_idx: np.ndarray
    times: np.ndarray
    events: np.ndarray
    covariates: np.ndarray
    scaler: CovariateScaler

    @classmethod
    def from_records(
        cls, records: Sequence[SurvivalRecord], scaler: CovariateScaler
    ) -> "SurvivalDataset":
        return cls(
            cluster_idx=np.array([r.cluster_id for r in records], dtype=int),
            times=np.array([r.time for r in records], dtype=float),
            events=np.array([r.event for r in records], dtype=int),
            covariates=np.vstack([r.covariates for r in records]),
            scaler=scaler,
        )

    @property
    def n_subjects(self) -> int:
        return self.times.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]


def _encode_level(value, levels: list, column: str) -> float:
    try:
        pos = levels.index(value)
    except ValueError:
        raise DataValidationError(f"unknown level {value!r} for categorical '{column}'")
    if len(levels) == 1:
        return 0.0
    return pos / (len(levels) - 1)


def load_survival(
    path,
    schema: ColumnSpec | None = None,
    graph: AdjacencyGraph | None = None,
    scaler: CovariateScaler | None = None,
) -> tuple[list[SurvivalRecord], CovariateScaler]:
    """Read survival records and fit (or reuse) the covariate scaler.

    Parameters
    ----------
    path : str or Path
        CSV with columns ``cluster_id,time,event`` plus covariate columns.
    schema : ColumnSpec, optional
        Marks covariate columns as categorical; unlisted columns are continuous.
    graph : AdjacencyGraph, optional
        When given, cluster ids are validated against the node range.
    scaler : CovariateScaler, optional
        Reuse a previously fitted scaler (e.g. when scoring new data against a
        fitted model) instead of fitting from this file.

    Returns
    -------
    (records, scaler)
        Records carry covariates already scaled to the open unit interval.
    """
    schema = schema or ColumnSpec()
    df = pd.read_csv(path)
    for col in RESERVED_COLUMNS:
        if col not in df.columns:
            raise DataValidationError(f"missing required column '{col}'")
    cov_cols = [c for c in df.columns if c not in RESERVED_COLUMNS]
    for c in schema.categorical:
        if c not in cov_cols:
            raise DataValidationError(f"categorical column '{c}' not in file")

    # header is line 1, so data row k lives on file line k + 1
    for k in range(len(df)):
        row_no = k + 2
        t = df["time"].iloc[k]
        if not np.isfinite(t) or t <= 0:
            raise DataValidationError(f"nonpositive time at row {row_no}")
        ev = df["event"].iloc[k]
        if ev not in (0, 1):
            raise DataValidationError(f"event flag must be 0/1 at row {row_no}")
        cid = df["cluster_id"].iloc[k]
        if cid != int(cid) or int(cid) < 1:
            raise DataValidationError(f"cluster_id must be a positive integer at row {row_no}")
        if graph is not None and not (1 <= int(cid) <= graph.n_nodes):
            raise DataValidationError(f"unknown cluster_id {int(cid)} at row {row_no}")

    if scaler is not None and scaler.columns != cov_cols:
        raise DataValidationError(
            f"covariate columns {cov_cols} do not match the fitted scaler {scaler.columns}"
        )

    raw = np.empty((len(df), len(cov_cols)))
    categorical_levels: dict[str, list] = {}
    continuous_mask = np.ones(len(cov_cols), dtype=bool)
    fitted_levels = scaler.categorical_levels if scaler is not None else {}
    for k, c in enumerate(cov_cols):
        if c in schema.categorical or c in fitted_levels:
            levels = fitted_levels.get(c) or sorted(df[c].unique().tolist())
            categorical_levels[c] = levels
            raw[:, k] = [_encode_level(v, levels, c) for v in df[c]]
            continuous_mask[k] = False
        else:
            col = pd.to_numeric(df[c], errors="coerce").to_numpy(dtype=float)
            if np.any(~np.isfinite(col)):
                row_no = int(np.flatnonzero(~np.isfinite(col))[0]) + 2
                raise DataValidationError(f"malformed value in column '{c}' at row {row_no}")
            raw[:, k] = col

    times = df["time"].to_numpy(dtype=float)
    if scaler is None:
        mins = raw.min(axis=0)
        maxs = raw.max(axis=0)
        # categorical codes are already in [0,1]; give them a unit span so
        # scale() passes them through the clamp unchanged
        mins[~continuous_mask] = 0.0
        maxs[~continuous_mask] = 1.0
        if np.any(maxs[continuous_mask] <= mins[continuous_mask]):
            k = int(np.flatnonzero(maxs <= mins)[0])
            raise DataValidationError(f"constant continuous column '{cov_cols[k]}'")
        scaler = CovariateScaler(
            columns=cov_cols,
            continuous_mask=continuous_mask,
            mins=mins,
            maxs=maxs,
            t_max=float(times.max() * 1.05),
            categorical_levels=categorical_levels,
        )
    scaled = scaler.scale(raw)

    records = [
        SurvivalRecord(
            cluster_id=int(df["cluster_id"].iloc[k]) - 1,
            time=float(times[k]),
            event=int(df["event"].iloc[k]),
            covariates=scaled[k],
        )
        for k in range(len(df))
    ]
    return records, scaler


def load_adjacency(path) -> AdjacencyGraph:
    """Read a neighborhood graph, either as an ``i,j`` edge list or a dense 0/1 matrix."""
    df = pd.read_csv(path)
    if list(df.columns[:2]) == ["i", "j"] and df.shape[1] == 2:
        edges = [(int(r.i), int(r.j)) for r in df.itertuples()]
        n_nodes = max(max(i, j) for i, j in edges)
        return AdjacencyGraph.from_edges(edges, n_nodes)
    mat = df.to_numpy(dtype=float)
    if mat.shape[0] != mat.shape[1]:
        raise DataValidationError(
            "adjacency file must be an 'i,j' edge list or a square dense matrix"
        )
    return AdjacencyGraph(mat)


def load_survey(path, graph: AdjacencyGraph) -> SurveyCounts:
    """Read per-cluster survey counts, one row per graph node."""
    df = pd.read_csv(path)
    for col in ("cluster_id", "n0", "m0"):
        if col not in df.columns:
            raise DataValidationError(f"missing required column '{col}'")
    n = graph.n_nodes
    seen = df["cluster_id"].to_numpy(dtype=int)
    expected = np.arange(1, n + 1)
    if sorted(seen.tolist()) != expected.tolist():
        missing = sorted(set(expected.tolist()) - set(seen.tolist()))
        if missing:
            raise DataValidationError(f"survey is missing cluster {missing[0]}")
        raise DataValidationError("survey must contain each cluster exactly once")
    order = np.argsort(seen)
    return SurveyCounts(
        n0=df["n0"].to_numpy(dtype=int)[order],
        m0=df["m0"].to_numpy(dtype=int)[order],
    )


def write_survival_csv(path, cluster_ids_1based, times, events, covariates: dict) -> None:
    """Write the survival CSV format (raw, unscaled covariate columns)."""
    out = {"cluster_id": np.asarray(cluster_ids_1based, dtype=int),
           "time": np.asarray(times, dtype=float),
           "event": np.asarray(events, dtype=int)}
    out.update({k: np.asarray(v) for k, v in covariates.items()})
    pd.DataFrame(out).to_csv(path, index=False)


def write_adjacency_csv(path, graph: AdjacencyGraph) -> None:
    """Write the graph as a 1-based edge list."""
    ii, jj = np.nonzero(np.triu(graph.matrix))
    pd.DataFrame({"i": ii + 1, "j": jj + 1}).to_csv(path, index=False)


def write_survey_csv(path, survey: SurveyCounts) -> None:
    pd.DataFrame(
        {
            "cluster_id": np.arange(1, survey.n_clusters + 1),
            "n0": survey.n0,
            "m0": survey.m0,
        }
    ).to_csv(path, index=False)
