"""Command-line front end.

Exit codes: 0 success, 1 check or run failure, 2 usage or configuration error.
The default output root is taken from ``DOGRAPH_OUTPUT_ROOT`` (``runs`` if unset).
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from .config import ConfigError, RunConfig, load_config, with_overrides
from .domains import load_scenario
from .model import BLOCKS
from .scheduler import (TrainingAborted, export_figure1_data, export_weight_trajectory,
                        run_experiment, sweep_m)
from .verify import run_all

OUTPUT_ROOT_ENV = "DOGRAPH_OUTPUT_ROOT"


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _fail_config(exc: ConfigError):
    click.echo(f"config error: {exc}", err=True)
    sys.exit(2)


def _build_config(config_file, scenario, scenario_file, train_overrides, objective_overrides,
                  model_overrides) -> RunConfig:
    cfg = load_config(config_file) if config_file else RunConfig()
    train = {k: v for k, v in train_overrides.items() if v is not None}
    objective = {k: v for k, v in objective_overrides.items() if v is not None}
    model = {k: v for k, v in model_overrides.items() if v is not None}
    cfg = with_overrides(cfg, train=train, objective=objective, model=model, scenario=scenario)
    if scenario_file:
        try:
            mix = load_scenario(scenario_file)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError("scenario_file", str(exc)) from None
        cfg = RunConfig(cfg.model, cfg.train, mix.name, mix.recipe)
    cfg.mixture()
    return cfg


def _run_options(f):
    options = [
        click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
                     help="JSON run config (a config.snapshot replays a run)."),
        click.option("--scenario", default=None, help="Built-in scenario name."),
        click.option("--scenario-file", type=click.Path(exists=True, dir_okay=False),
                     help="JSON scenario definition."),
        click.option("--steps", type=int), click.option("--seed", type=int),
        click.option("--batch-size", type=int), click.option("--lr", type=float),
        click.option("--target-dim", type=int), click.option("--eval-every", type=int),
        click.option("--objective", type=click.Choice(["variance", "robust_softmax",
                                                        "alignment", "uncertainty"])),
        click.option("--attn-temperature", type=float),
        click.option("--freeze-projection/--resample-projection", default=None),
        click.option("--export-partitions/--no-export-partitions", default=None),
        click.option("--out", type=click.Path(file_okay=False), help="Run directory."),
        click.option("-v", "--verbose", is_flag=True),
    ]
    for opt in reversed(options):
        f = opt(f)
    return f


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def main():
    """Gradient-space domain discovery and data-mixture reweighting."""


@main.command()
@_run_options
@click.option("--policy", type=click.Choice(["dograph", "uniform", "loss_based"]))
@click.option("-m", "--clusters", "n_clusters", type=int, help="Number of gradient clusters.")
def train(config_file, scenario, scenario_file, steps, seed, batch_size, lr, target_dim,
          eval_every, objective, attn_temperature, freeze_projection, export_partitions, out,
          verbose, policy, n_clusters):
    """Train one policy and write a run directory."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING)
    try:
        cfg = _build_config(
            config_file, scenario, scenario_file,
            dict(steps=steps, seed=seed, batch_size=batch_size, lr=lr, target_dim=target_dim,
                 eval_every=eval_every, policy=policy, n_clusters=n_clusters,
                 freeze_projection=freeze_projection, export_partitions=export_partitions),
            dict(kind=objective), dict(attn_temperature=attn_temperature))
    except ConfigError as exc:
        _fail_config(exc)
    t = cfg.train
    run_dir = Path(out) if out else _output_root() / f"{cfg.scenario}_{t.policy}_m{t.n_clusters}_s{t.seed}"
    try:
        records = run_experiment(cfg, run_dir)
    except TrainingAborted as exc:
        click.echo(f"training aborted: {exc}", err=True)
        sys.exit(1)
    final = records[-1]
    click.echo(f"{run_dir}: {len(records)} epochs, worst ppl {final.worst_ppl:.4f}, "
               f"mean ppl {final.mean_ppl:.4f}")


@main.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--blocks", multiple=True, type=click.Choice(list(BLOCKS) + ["flat"]),
              help="Restrict to these blocks (repeatable).")
@click.option("--pairs", type=int, default=20, show_default=True, help="Batch pairs for the MMD identity.")
@click.option("--batch", type=int, default=16, show_default=True)
@click.option("--instances", type=int, default=20, show_default=True, help="Finite-difference instances.")
@click.option("--jl-dim", type=int, default=10_000, show_default=True)
@click.option("--jl-target", type=int, default=1_000, show_default=True)
@click.option("--jl-points", type=int, default=100, show_default=True)
@click.option("--jl-seeds", type=int, default=5, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="Emit a machine-readable report.")
def verify(seed, blocks, pairs, batch, instances, jl_dim, jl_target, jl_points, jl_seeds, as_json):
    """Run the identity, finite-difference, PSD and JL checks."""
    if pairs < 1 or batch < 1 or instances < 1 or not 1 <= jl_target <= jl_dim:
        click.echo("verify: sizes must be positive and jl-target <= jl-dim", err=True)
        sys.exit(2)
    results = run_all(seed, blocks or None, pairs, batch, instances, jl_dim, jl_target,
                      jl_points, jl_seeds)
    ok = all(r.passed for r in results)
    if as_json:
        click.echo(json.dumps({"passed": ok, "checks": [r.to_dict() for r in results]}, indent=2))
    else:
        width = max(len(r.name) for r in results)
        for r in results:
            click.echo(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  "
                       f"value={r.value:.3e}  threshold={r.threshold:.1e}")
        failed = [r.name for r in results if not r.passed]
        if failed:
            click.echo("failed: " + ", ".join(failed), err=True)
    sys.exit(0 if ok else 1)


def _parse_m_list(ctx, param, value):
    try:
        values = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter("expected comma-separated integers") from None
    if not values or min(values) < 1:
        raise click.BadParameter("cluster counts must be integers >= 1")
    return values


@main.command("sweep-m")
@_run_options
@click.option("--m-list", default="1,3,5,11,19", show_default=True, callback=_parse_m_list,
              help="Comma-separated cluster counts.")
def sweep_m_cmd(config_file, scenario, scenario_file, steps, seed, batch_size, lr, target_dim,
                eval_every, objective, attn_temperature, freeze_projection, export_partitions,
                out, verbose, m_list):
    """One DoGraph run per cluster count; writes sweep_summary.csv."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING)
    try:
        cfg = _build_config(
            config_file, scenario, scenario_file,
            dict(steps=steps, seed=seed, batch_size=batch_size, lr=lr, target_dim=target_dim,
                 eval_every=eval_every, policy="dograph", n_clusters=min(m_list),
                 freeze_projection=freeze_projection, export_partitions=export_partitions),
            dict(kind=objective), dict(attn_temperature=attn_temperature))
        if max(m_list) > cfg.train.batch_size:
            raise ConfigError("m-list", f"{max(m_list)} exceeds batch size {cfg.train.batch_size}")
    except ConfigError as exc:
        _fail_config(exc)
    out_root = Path(out) if out else _output_root() / f"sweep_{cfg.scenario}_s{cfg.train.seed}"
    try:
        path = sweep_m(cfg, m_list, out_root)
    except TrainingAborted as exc:
        click.echo(f"sweep aborted: {exc}", err=True)
        sys.exit(1)
    click.echo(str(path))


@main.command()
@click.argument("run_dir", type=click.Path(file_okay=False))
@click.option("--what", type=click.Choice(["figure1", "weights"]), default="figure1",
              show_default=True)
@click.option("--out", type=click.Path(), help="Output directory (figure1) or file (weights).")
def export(run_dir, what, out):
    """Export per-snapshot PCA coordinates or the weight trajectory of a run."""
    if not Path(run_dir).is_dir():
        click.echo(f"export: run directory {run_dir} not found", err=True)
        sys.exit(1)
    try:
        if what == "figure1":
            paths = export_figure1_data(run_dir, out)
        else:
            paths = [export_weight_trajectory(run_dir, out)]
    except (FileNotFoundError, ValueError) as exc:
        click.echo(f"export failed: {exc}", err=True)
        sys.exit(1)
    for p in paths:
        click.echo(str(p))


if __name__ == "__main__":
    main()
