"""Command-line surface: simulate, impute, fit, predict, importance, lys, residuals.

Exit codes: 0 success, 2 usage error, 3 data validation failure,
4 numerical failure. No command mutates its inputs; every command writes a
manifest with the seed, config digest, and input digests so reruns are
reproducible byte for byte.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import config as cfg_mod
from . import metrics, pipeline, simulate
from .data import (
    DataValidationError,
    SurvivalDataset,
    load_adjacency,
    load_survey,
    load_survival,
)
from .pipeline import NumericalError
from .spatial import CarStructure

EXIT_DATA = 3
EXIT_NUMERIC = 4


def _run(command):
    """Translate library failures into documented exit codes."""
    try:
        command()
    except DataValidationError as exc:
        click.echo(f"data validation error: {exc}", err=True)
        sys.exit(EXIT_DATA)
    except FileNotFoundError as exc:
        click.echo(f"data validation error: {exc}", err=True)
        sys.exit(EXIT_DATA)
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)


@click.group()
def main():
    """Spatial soft-tree survival modeling."""


config_option = click.option(
    "--config", "config_path", type=click.Path(exists=True), default=None,
    help="JSON config file; command-line flags override it.",
)
seed_option = click.option("--seed", type=int, default=None, help="Master seed.")
out_option = click.option("--out", "out_dir", type=click.Path(), default=None,
                          help="Output directory.")


@main.command(name="simulate")
@config_option
@seed_option
@out_option
@click.option("--scenario", type=click.Choice(simulate.SCENARIOS), default=None)
@click.option("--clusters", "n_clusters", type=int, default=None)
@click.option("--cluster-size", type=int, default=None)
@click.option("--survey-n0", type=int, default=None)
def cmd_simulate(config_path, seed, out_dir, scenario, n_clusters, cluster_size, survey_n0):
    """Generate a synthetic dataset and its truth file."""

    def body():
        cfg = cfg_mod.load_config(config_path, {
            "seed": seed,
            "output_dir": out_dir,
            "simulate": {
                "scenario": scenario,
                "n_clusters": n_clusters,
                "cluster_size": cluster_size,
                "survey_n0": survey_n0,
            },
        })
        sim_cfg = cfg["simulate"]
        try:
            spec = simulate.ScenarioSpec(
                scenario=sim_cfg["scenario"],
                n_clusters=int(sim_cfg["n_clusters"]),
                cluster_size=int(sim_cfg["cluster_size"]),
                sigma0=float(sim_cfg["sigma0"]),
                sigma1=float(sim_cfg["sigma1"]),
                rho0=float(sim_cfg["rho0"]),
                rho1=float(sim_cfg["rho1"]),
                survey_n0=int(sim_cfg["survey_n0"]),
                seed=int(cfg["seed"]),
            )
        except ValueError as exc:
            raise DataValidationError(str(exc))
        rng = pipeline.seed_streams(int(cfg["seed"]))["data"]
        data = simulate.gen_scenario(spec, rng)
        out = Path(cfg["output_dir"])
        paths = data.write_csvs(out)
        cfg_mod.write_manifest(out, "simulate", cfg, {}, {
            "outputs": {k: str(v) for k, v in paths.items()},
            "n_subjects": data.n_subjects,
        })
        click.echo(f"wrote {data.n_subjects} subjects to {out}")

    _run(body)


@main.command(name="impute")
@config_option
@seed_option
@out_option
@click.option("--survey", "survey_path", type=click.Path(), default=None)
@click.option("--adjacency", "adjacency_path", type=click.Path(), default=None)
@click.option("--burnin", type=int, default=None)
@click.option("--samples", type=int, default=None)
def cmd_impute_smu(config_path, seed, out_dir, survey_path, adjacency_path, burnin, samples):
    """Sample the latent cluster proportions from survey counts (step 1)."""

    def body():
        cfg = cfg_mod.load_config(config_path, {
            "seed": seed,
            "output_dir": out_dir,
            "data": {"survey": survey_path, "adjacency": adjacency_path},
            "mcmc": {"burnin": burnin, "samples": samples},
        })
        survey_file = cfg["data"]["survey"]
        adjacency_file = cfg["data"]["adjacency"]
        if not survey_file or not adjacency_file:
            raise click.UsageError("impute needs --survey and --adjacency (or config paths)")
        graph = load_adjacency(adjacency_file)
        survey = load_survey(survey_file, graph)
        structure = CarStructure.from_graph(graph)
        rng = pipeline.seed_streams(int(cfg["seed"]))["step1"]
        smu = pipeline.step1_impute(
            survey, structure, cfg_mod.priors_from_config(cfg),
            cfg_mod.mcmc_from_config(cfg), rng,
        )
        out = Path(cfg["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        _write_smu(out, smu)
        cfg_mod.write_manifest(
            out, "impute", cfg,
            {"survey": survey_file, "adjacency": adjacency_file},
            {"n_samples": int(smu.m_samples.shape[0])},
        )
        click.echo(f"wrote M-hat for {smu.m_hat.shape[0]} clusters to {out}")

    _run(body)


def _write_smu(out: Path, smu: pipeline.SmuPosterior) -> None:
    n = smu.m_hat.shape[0]
    pd.DataFrame(
        {"cluster_id": np.arange(1, n + 1), "m_hat": smu.m_hat}
    ).to_csv(out / "m_hat.csv", index=False)
    cols = {"draw": np.arange(smu.m_samples.shape[0])}
    cols.update({f"m_{i + 1}": smu.m_samples[:, i] for i in range(n)})
    pd.DataFrame(cols).to_csv(out / "m_samples.csv", index=False)
    pd.DataFrame(
        {
            "draw": np.arange(smu.eta0_samples.shape[0]),
            "sigma2_0": smu.eta0_samples[:, 0],
            "rho_0": smu.eta0_samples[:, 1],
        }
    ).to_csv(out / "eta0_samples.csv", index=False)


def _load_smu(step1_dir) -> pipeline.SmuPosterior:
    d = Path(step1_dir)
    m_hat = pd.read_csv(d / "m_hat.csv")["m_hat"].to_numpy(dtype=float)
    ms = pd.read_csv(d / "m_samples.csv")
    n = m_hat.shape[0]
    eta = pd.read_csv(d / "eta0_samples.csv")
    return pipeline.SmuPosterior(
        m_samples=ms[[f"m_{i + 1}" for i in range(n)]].to_numpy(dtype=float),
        eta0_samples=eta[["sigma2_0", "rho_0"]].to_numpy(dtype=float),
        m_hat=m_hat,
    )


@main.command(name="fit")
@config_option
@seed_option
@out_option
@click.option("--survival", "survival_path", type=click.Path(), default=None)
@click.option("--adjacency", "adjacency_path", type=click.Path(), default=None)
@click.option("--m-hat", "m_hat_path", type=click.Path(), default=None,
              help="m_hat.csv used as a fixed plug-in when no step-1 directory is given.")
@click.option("--step1-dir", type=click.Path(), default=None,
              help="Directory from `impute`; enables importance reweighting (step 3).")
@click.option("--burnin", type=int, default=None)
@click.option("--samples", type=int, default=None)
@click.option("--thin", type=int, default=None)
@click.option("--trees", "n_trees", type=int, default=None)
def cmd_fit(config_path, seed, out_dir, survival_path, adjacency_path, m_hat_path,
            step1_dir, burnin, samples, thin, n_trees):
    """Run the survival chain (step 2) and, when step-1 samples exist, reweight (step 3)."""

    def body():
        cfg = cfg_mod.load_config(config_path, {
            "seed": seed,
            "output_dir": out_dir,
            "data": {"survival": survival_path, "adjacency": adjacency_path,
                     "m_hat": m_hat_path, "step1_dir": step1_dir},
            "mcmc": {"burnin": burnin, "samples": samples, "thin": thin},
            "forest": {"n_trees": n_trees},
        })
        data_cfg = cfg["data"]
        if not data_cfg["survival"] or not data_cfg["adjacency"]:
            raise click.UsageError("fit needs --survival and --adjacency (or config paths)")
        if not data_cfg["m_hat"] and not data_cfg["step1_dir"]:
            raise click.UsageError("fit needs --m-hat or --step1-dir")

        graph = load_adjacency(data_cfg["adjacency"])
        records, scaler = load_survival(data_cfg["survival"], graph=graph)
        dataset = SurvivalDataset.from_records(records, scaler)
        structure = CarStructure.from_graph(graph)

        smu = None
        if data_cfg["step1_dir"]:
            smu = _load_smu(data_cfg["step1_dir"])
            m_hat = smu.m_hat
        else:
            m_hat = pd.read_csv(data_cfg["m_hat"])["m_hat"].to_numpy(dtype=float)
        if m_hat.shape[0] != graph.n_nodes:
            raise DataValidationError("m_hat length does not match the graph")

        streams = pipeline.seed_streams(int(cfg["seed"]))
        states, diagnostics = pipeline.step2_run(
            dataset, m_hat, structure,
            cfg_mod.priors_from_config(cfg), cfg_mod.mcmc_from_config(cfg),
            cfg_mod.forest_prior_from_config(cfg), streams["step2"],
        )
        if smu is not None:
            posterior = pipeline.step3_weights(states, smu, dataset, m_hat)
        else:
            posterior = pipeline.WeightedPosterior.from_states(states, m_hat)

        out = Path(cfg["output_dir"])
        cluster_sizes = np.bincount(dataset.cluster_idx, minlength=graph.n_nodes)
        pipeline.save_posterior(out, posterior, scaler, cluster_sizes=cluster_sizes)
        inputs = {"survival": data_cfg["survival"], "adjacency": data_cfg["adjacency"]}
        if data_cfg["m_hat"]:
            inputs["m_hat"] = data_cfg["m_hat"]
        cfg_mod.write_manifest(out, "fit", cfg, inputs, {
            "n_draws": posterior.n_draws,
            "ess": posterior.ess,
            "degenerate_weights": bool(posterior.degenerate),
            "reweighted": smu is not None,
            "divergences": diagnostics["divergences"],
            "main_iterations": diagnostics["main_iterations"],
        })
        click.echo(
            f"kept {posterior.n_draws} draws (ESS {posterior.ess:.1f}, "
            f"{diagnostics['divergences']} divergences) in {out}"
        )

    _run(body)


def _parse_x(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise click.UsageError(f"could not parse covariate vector {text!r}")


def _load_artifact(artifact_dir):
    art = Path(artifact_dir)
    if not art.exists():
        raise DataValidationError(f"no posterior artifact at {art}")
    return pipeline.load_posterior(art)


@main.command(name="predict")
@click.option("--posterior", "artifact_dir", type=click.Path(), required=True)
@click.option("--cluster", type=int, required=True, help="1-based cluster id.")
@click.option("--x", "x_text", required=True, help="Comma-separated raw covariates.")
@click.option("--t-points", type=int, default=150)
@click.option("--t-max", "t_max_opt", type=float, default=None,
              help="Grid end; defaults to the fitted horizon.")
@click.option("--out", "out_path", type=click.Path(), required=True)
def cmd_predict(artifact_dir, cluster, x_text, t_points, t_max_opt, out_path):
    """Posterior survival curve with credible bands at fixed covariates."""

    def body():
        posterior, scaler = _load_artifact(artifact_dir)
        if not (1 <= cluster <= posterior.m_hat.shape[0]):
            raise DataValidationError(f"unknown cluster {cluster}")
        raw = _parse_x(x_text)
        if raw.shape[0] != len(scaler.columns):
            raise DataValidationError(
                f"expected {len(scaler.columns)} covariates, got {raw.shape[0]}"
            )
        x = scaler.scale(raw[None, :])[0]
        end = t_max_opt if t_max_opt is not None else scaler.t_max
        grid = np.linspace(0.0, end, t_points + 1)[1:]
        result = pipeline.predict_survival(
            posterior, x, cluster - 1, grid, scaler.t_max
        )
        pd.DataFrame(
            {
                "cluster": cluster,
                "t": result.t,
                "mean": result.mean,
                "lower": result.lower,
                "upper": result.upper,
            }
        ).to_csv(out_path, index=False)
        click.echo(f"wrote survival curve to {out_path}")

    _run(body)


@main.command(name="importance")
@click.option("--posterior", "artifact_dir", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def cmd_importance(artifact_dir, out_path):
    """Split-share variable importance over posterior forest draws."""

    def body():
        posterior, scaler = _load_artifact(artifact_dir)
        names = ["time", "smu"] + list(scaler.columns)
        result = metrics.variable_importance(
            [st.forest for st in posterior.states], len(names)
        )
        pd.DataFrame(
            {
                "feature": names,
                "score": result.scores,
                "draws_used": result.n_draws_used,
                "all_splitless": result.all_splitless,
            }
        ).to_csv(out_path, index=False)
        click.echo(f"wrote importance scores to {out_path}")

    _run(body)


@main.command(name="lys")
@click.option("--posterior", "artifact_dir", type=click.Path(), required=True)
@click.option("--a", "horizon", type=float, required=True)
@click.option("--x", "x_text", required=True)
@click.option("--x-star", "x_star_text", required=True)
@click.option("--cluster", type=int, default=None, help="1-based id; omit with --all-clusters.")
@click.option("--all-clusters", is_flag=True, default=False)
@click.option("--out", "out_path", type=click.Path(), required=True)
def cmd_lys(artifact_dir, horizon, x_text, x_star_text, cluster, all_clusters, out_path):
    """Expected life years saved by a covariate intervention."""

    def body():
        posterior, scaler = _load_artifact(artifact_dir)
        x = scaler.scale(_parse_x(x_text)[None, :])[0]
        x_star = scaler.scale(_parse_x(x_star_text)[None, :])[0]
        if all_clusters:
            targets = list(range(posterior.m_hat.shape[0]))
        else:
            if cluster is None:
                raise click.UsageError("give --cluster or --all-clusters")
            targets = [cluster - 1]
        m_hat_table = pd.read_csv(Path(artifact_dir) / "m_hat.csv")
        sizes = (
            m_hat_table["n_subjects"].to_numpy(dtype=int)
            if "n_subjects" in m_hat_table.columns
            else np.zeros(posterior.m_hat.shape[0], dtype=int)
        )
        rows = []
        for c in targets:
            if not (0 <= c < posterior.m_hat.shape[0]):
                raise DataValidationError(f"unknown cluster {c + 1}")
            res = metrics.lys(posterior, x, x_star, c, horizon, scaler.t_max)
            rows.append(
                {"cluster": c + 1, "cluster_size": int(sizes[c]), "lys": res.estimate,
                 "lower": res.lower, "upper": res.upper}
            )
        pd.DataFrame(rows).to_csv(out_path, index=False)
        click.echo(f"wrote life-years-saved estimates to {out_path}")

    _run(body)


@main.command(name="residuals")
@click.option("--posterior", "artifact_dir", type=click.Path(), required=True)
@click.option("--survival", "survival_path", type=click.Path(), required=True)
@click.option("--adjacency", "adjacency_path", type=click.Path(), default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
def cmd_residuals(artifact_dir, survival_path, adjacency_path, out_path):
    """Cox-Snell and deviance residuals of the fitted model on a dataset."""

    def body():
        posterior, scaler = _load_artifact(artifact_dir)
        graph = load_adjacency(adjacency_path) if adjacency_path else None
        records, scaler = load_survival(survival_path, graph=graph, scaler=scaler)
        dataset = SurvivalDataset.from_records(records, scaler)
        result = metrics.cox_snell_residuals(posterior, dataset)
        metrics.write_residuals_csv(out_path, result)
        click.echo(f"wrote residual diagnostics to {out_path}")

    _run(body)


if __name__ == "__main__":
    main()
