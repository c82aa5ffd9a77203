"""Spatially correlated soft-tree survival modeling.

Library layout:

* :mod:`frailforest.data` - file loaders, validation, covariate scaling
* :mod:`frailforest.forest` - soft decision-tree ensembles and back-fitting
* :mod:`frailforest.spatial` - conditional-autoregressive machinery
* :mod:`frailforest.hazard` - hazard/survival evaluation and latent-point augmentation
* :mod:`frailforest.samplers` - HMC, step-size adaptation, truncated normals
* :mod:`frailforest.pipeline` - the 3-step inference engine and posterior artifacts
* :mod:`frailforest.simulate` - synthetic scenario generators
* :mod:`frailforest.metrics` - evaluation metrics and residual diagnostics
* :mod:`frailforest.cli` - the command-line entry point
"""

from .data import (
    AdjacencyGraph,
    ColumnSpec,
    CovariateScaler,
    DataValidationError,
    SurveyCounts,
    SurvivalDataset,
    SurvivalRecord,
    load_adjacency,
    load_survey,
    load_survival,
)
from .forest import Forest, ForestPrior, SoftTree, SplitRule
from .pipeline import (
    ChainState,
    McmcSettings,
    NumericalError,
    Priors,
    SmuPosterior,
    WeightedPosterior,
    predict_survival,
    step1_impute,
    step2_run,
    step3_weights,
)
from .simulate import ScenarioSpec, gen_scenario, western_florida_graph
from .spatial import CarParams, CarStructure, rho_bounds

__version__ = "0.1.0"

__all__ = [
    "AdjacencyGraph",
    "CarParams",
    "CarStructure",
    "ChainState",
    "ColumnSpec",
    "CovariateScaler",
    "DataValidationError",
    "Forest",
    "ForestPrior",
    "McmcSettings",
    "NumericalError",
    "Priors",
    "ScenarioSpec",
    "SmuPosterior",
    "SoftTree",
    "SplitRule",
    "SurveyCounts",
    "SurvivalDataset",
    "SurvivalRecord",
    "WeightedPosterior",
    "gen_scenario",
    "load_adjacency",
    "load_survey",
    "load_survival",
    "predict_survival",
    "rho_bounds",
    "step1_impute",
    "step2_run",
    "step3_weights",
    "western_florida_graph",
    "__version__",
]
