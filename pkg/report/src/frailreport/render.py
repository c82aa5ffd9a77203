"""Renderers for each figure kind, all pure functions of their input CSVs.

Output bytes are reproducible: the Agg backend is pinned and SVG date
metadata is suppressed, so rerunning a render overwrites the file with
identical content.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

# deterministic SVG element ids, so reruns produce identical bytes
matplotlib.rcParams["svg.hashsalt"] = "frailforest-report"

KINDS = ("aes", "survival", "coxsnell", "deviance", "lys-scatter", "importance-bar")

TRUTH_COLOR = "black"
ESTIMATE_COLOR = "tab:green"
REFERENCE_COLOR = "tab:red"


class SchemaError(ValueError):
    """The input CSV is missing required columns or is empty."""


@dataclass
class PlotSpec:
    kind: str
    input_path: str
    output_path: str
    title: str | None = None
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown plot kind {self.kind!r}; choose from {KINDS}")


def _load(spec: PlotSpec, required: list[str]) -> pd.DataFrame:
    path = Path(spec.input_path)
    if not path.exists():
        raise SchemaError(f"input file {path} does not exist")
    df = pd.read_csv(path)
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(f"{path} is missing columns: {', '.join(missing)}")
    if df.empty:
        raise SchemaError(f"{path} has no rows")
    return df


def _save(fig, spec: PlotSpec) -> Path:
    out = Path(spec.output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    metadata = {"Date": None} if out.suffix.lower() == ".svg" else None
    fig.savefig(out, dpi=150, metadata=metadata)
    plt.close(fig)
    return out


def _render_aes(spec: PlotSpec) -> Path:
    df = _load(spec, ["cluster", "x1", "x2", "t", "estimate", "truth"])
    panels = sorted(df.groupby(["x1", "x2"]).groups.keys())
    n = len(panels)
    ncols = min(n, 2)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(
        nrows, ncols, figsize=(4.2 * ncols, 3.2 * nrows), squeeze=False, sharey=True
    )
    for ax, (x1, x2) in zip(axes.ravel(), panels):
        sub = df[(df.x1 == x1) & (df.x2 == x2)]
        mean = sub.groupby("t")[["estimate", "truth"]].mean()
        ax.plot(mean.index, mean.truth, color=TRUTH_COLOR, lw=1.6, label="truth")
        ax.plot(
            mean.index, mean.estimate, color=ESTIMATE_COLOR, lw=1.6,
            label="averaged estimate",
        )
        ax.set_title(f"x1={x1:g}, x2={x2:g}", fontsize=10)
        ax.set_xlabel("years")
        ax.set_ylim(-0.02, 1.02)
    for ax in axes.ravel()[n:]:
        ax.set_visible(False)
    axes[0, 0].set_ylabel("survival")
    axes[0, 0].legend(frameon=False, fontsize=9)
    if spec.title:
        fig.suptitle(spec.title)
    fig.tight_layout()
    return _save(fig, spec)


def _render_survival(spec: PlotSpec) -> Path:
    df = _load(spec, ["cluster", "t", "mean"])
    has_band = {"lower", "upper"}.issubset(df.columns)
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for key, sub in df.groupby("cluster"):
        ax.plot(sub.t, sub["mean"], lw=1.6, label=f"cluster {key}")
        if has_band:
            ax.fill_between(sub.t, sub.lower, sub.upper, alpha=0.2)
    ax.set_xlabel("years")
    ax.set_ylabel("survival")
    ax.set_ylim(-0.02, 1.02)
    if df.cluster.nunique() <= 8:
        ax.legend(frameon=False, fontsize=9)
    if spec.title:
        ax.set_title(spec.title)
    fig.tight_layout()
    return _save(fig, spec)


def _render_coxsnell(spec: PlotSpec) -> Path:
    df = _load(spec, ["residual", "event", "nelson_aalen"])
    fig, ax = plt.subplots(figsize=(4.4, 4.2))
    events = df[df.event == 1]
    censored = df[df.event == 0]
    ax.step(
        df.residual, df.nelson_aalen, where="post",
        color=ESTIMATE_COLOR, lw=1.4, label="Nelson-Aalen of residuals",
    )
    ax.scatter(events.residual, events.nelson_aalen, s=8, color=ESTIMATE_COLOR)
    if len(censored):
        ax.scatter(
            censored.residual, censored.nelson_aalen, s=10, marker="+",
            color="gray", label="censored",
        )
    lim = float(max(df.residual.max(), df.nelson_aalen.max())) * 1.05
    ax.plot([0, lim], [0, lim], color=REFERENCE_COLOR, ls="--", lw=1.2,
            label="unit exponential")
    ax.set_xlabel("Cox-Snell residual")
    ax.set_ylabel("cumulative hazard")
    ax.set_xlim(0, lim)
    ax.set_ylim(0, lim)
    ax.legend(frameon=False, fontsize=9)
    if spec.title:
        ax.set_title(spec.title)
    fig.tight_layout()
    return _save(fig, spec)


def _render_deviance(spec: PlotSpec) -> Path:
    df = _load(spec, ["deviance"])
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.scatter(np.arange(len(df)), df.deviance, s=8, color=ESTIMATE_COLOR)
    ax.axhline(0.0, color="gray", lw=1.0)
    band = df.deviance.abs().quantile(0.99)
    ax.set_ylim(-max(3.5, band * 1.2), max(3.5, band * 1.2))
    ax.set_xlabel("subject (sorted by residual)")
    ax.set_ylabel("deviance residual")
    if spec.title:
        ax.set_title(spec.title)
    fig.tight_layout()
    return _save(fig, spec)


def _render_lys_scatter(spec: PlotSpec) -> Path:
    df = _load(spec, ["cluster", "cluster_size", "lys"])
    fig, ax = plt.subplots(figsize=(5.2, 3.8))
    if {"lower", "upper"}.issubset(df.columns):
        yerr = np.vstack([df.lys - df.lower, df.upper - df.lys])
        ax.errorbar(
            df.cluster_size, df.lys, yerr=yerr, fmt="o",
            color=ESTIMATE_COLOR, ecolor="gray", capsize=2, ms=5,
        )
    else:
        ax.scatter(df.cluster_size, df.lys, color=ESTIMATE_COLOR, s=24)
    ax.axhline(0.0, color="gray", lw=1.0, ls=":")
    ax.set_xlabel("cluster sample size")
    ax.set_ylabel("expected life years saved")
    if spec.title:
        ax.set_title(spec.title)
    fig.tight_layout()
    return _save(fig, spec)


def _render_importance_bar(spec: PlotSpec) -> Path:
    df = _load(spec, ["feature", "score"])
    order = df.sort_values("score", ascending=True)
    fig, ax = plt.subplots(figsize=(5.0, 0.5 + 0.4 * len(order)))
    ax.barh(order.feature, order.score, color=ESTIMATE_COLOR)
    ax.set_xlabel("share of split rules")
    if spec.title:
        ax.set_title(spec.title)
    fig.tight_layout()
    return _save(fig, spec)


_RENDERERS = {
    "aes": _render_aes,
    "survival": _render_survival,
    "coxsnell": _render_coxsnell,
    "deviance": _render_deviance,
    "lys-scatter": _render_lys_scatter,
    "importance-bar": _render_importance_bar,
}


def render(spec: PlotSpec) -> Path:
    """Render one figure; raises SchemaError before writing anything on bad input."""
    return _RENDERERS[spec.kind](spec)
