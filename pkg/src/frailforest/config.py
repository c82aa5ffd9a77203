"""Run configuration: JSON file + command-line overrides over documented defaults."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .data import DataValidationError
from .forest import ForestPrior
from .pipeline import McmcSettings, Priors

DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "frailforest-out",
    "data": {
        "survival": None,
        "adjacency": None,
        "survey": None,
        "m_hat": None,
        "step1_dir": None,
    },
    "priors": {
        "lambda0_shape": 0.01,
        "lambda0_rate": 0.01,
        "sigma2_shape": 1.0,
        "sigma2_scale": 1.0,
    },
    "forest": {
        "n_trees": 50,
        "gamma": 0.95,
        "depth_power": 2.0,
        "bandwidth_rate": 10.0,
    },
    "mcmc": {
        "burnin": 2500,
        "samples": 5000,
        "thin": 1,
        "step_size": 0.1,
        "n_leapfrog": 25,
        "adapt_target": 0.8,
        "max_divergence_rate": 0.01,
        "lambda0_update": "gibbs",
    },
    "grids": {"t_points": 150, "t_max": None},
    "simulate": {
        "scenario": "A",
        "n_clusters": 10,
        "cluster_size": 200,
        "sigma0": 1.0,
        "sigma1": 1.0,
        "rho0": 0.5,
        "rho1": 0.5,
        "survey_n0": 100,
    },
}

_RANGES = {
    ("priors", "lambda0_shape"): ("gt", 0.0),
    ("priors", "lambda0_rate"): ("gt", 0.0),
    ("priors", "sigma2_shape"): ("gt", 0.0),
    ("priors", "sigma2_scale"): ("gt", 0.0),
    ("forest", "n_trees"): ("ge", 1),
    ("forest", "gamma"): ("open", 0.0, 1.0),
    ("forest", "depth_power"): ("gt", 0.0),
    ("forest", "bandwidth_rate"): ("gt", 0.0),
    ("mcmc", "burnin"): ("ge", 0),
    ("mcmc", "samples"): ("ge", 1),
    ("mcmc", "thin"): ("ge", 1),
    ("mcmc", "step_size"): ("gt", 0.0),
    ("mcmc", "n_leapfrog"): ("ge", 1),
    ("mcmc", "adapt_target"): ("open", 0.0, 1.0),
}


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Merge defaults, an optional JSON file, and explicit overrides (highest wins)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            _deep_update(cfg, json.load(fh))
    if overrides:
        _deep_update(cfg, overrides)
    _validate_ranges(cfg)
    return cfg


def _deep_update(base: dict, update: dict) -> None:
    for key, value in update.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value


def _validate_ranges(cfg: dict) -> None:
    for (section, key), spec in _RANGES.items():
        v = cfg[section][key]
        kind = spec[0]
        if kind == "gt" and not v > spec[1]:
            raise DataValidationError(f"{section}.{key} must exceed {spec[1]}, got {v}")
        if kind == "ge" and not v >= spec[1]:
            raise DataValidationError(f"{section}.{key} must be at least {spec[1]}, got {v}")
        if kind == "open" and not (spec[1] < v < spec[2]):
            raise DataValidationError(
                f"{section}.{key} must be inside ({spec[1]}, {spec[2]}), got {v}"
            )


def priors_from_config(cfg: dict) -> Priors:
    p = cfg["priors"]
    return Priors(
        lambda0_shape=float(p["lambda0_shape"]),
        lambda0_rate=float(p["lambda0_rate"]),
        sigma2_shape=float(p["sigma2_shape"]),
        sigma2_scale=float(p["sigma2_scale"]),
    )


def mcmc_from_config(cfg: dict) -> McmcSettings:
    m = cfg["mcmc"]
    return McmcSettings(
        burnin=int(m["burnin"]),
        samples=int(m["samples"]),
        thin=int(m["thin"]),
        step_size=float(m["step_size"]),
        n_leapfrog=int(m["n_leapfrog"]),
        adapt_target=float(m["adapt_target"]),
        max_divergence_rate=float(m["max_divergence_rate"]),
        lambda0_update=str(m["lambda0_update"]),
    )


def forest_prior_from_config(cfg: dict) -> ForestPrior:
    f = cfg["forest"]
    return ForestPrior(
        n_trees=int(f["n_trees"]),
        gamma=float(f["gamma"]),
        depth_power=float(f["depth_power"]),
        bandwidth_rate=float(f["bandwidth_rate"]),
    )


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_manifest(out_dir, command: str, cfg: dict, inputs: dict, extra: dict | None = None):
    """Reproducibility record: seed, config digest, input digests, and run facts."""
    manifest = {
        "command": command,
        "seed": cfg["seed"],
        "config_digest": config_digest(cfg),
        "inputs": {str(k): file_digest(v) for k, v in inputs.items() if v is not None},
        "settings": cfg,
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path
