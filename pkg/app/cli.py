"""
Command line entry point.

    python -m app.cli schedule --k 4 --t 2 --beta 1 --beta 2 --out runs/study
    python -m app.cli certify --k 2 --epsilon 0.05 --eta 0.05 --r 4
    python -m app.cli lemma-mc --measure chebyshev
    python -m app.cli plot runs/study/curves.csv
    python -m app.cli online --basis runs/study/basis_beta2_r0.rb --params ys.csv
"""

import functools
import logging
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import click
import numpy as np
import pandas as pd

from app.core.config import get_settings, load_experiment_config
from app.core.errors import RBGreedyError
from app.core.logging import configure_logging
from app.models.experiment import ExperimentConfig, PoolMode, RunMode, Selector
from app.services import experiments, persistence, plots
from app.services.greedy import online_batch
from app.services.params import SamplingMeasure

logger = logging.getLogger(__name__)


def _choice(enum) -> click.Choice:
    return click.Choice([e.value for e in enum])


def common_options(func: Callable) -> Callable:
    """Model, mesh, sampling and bookkeeping flags shared by the run commands."""
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="key=value experiment file"),
        click.option("--delta", type=float),
        click.option("--grid-n", type=int),
        click.option("--measure", type=_choice(SamplingMeasure)),
        click.option("--seed", "master_seed", type=int),
        click.option("--out", "output_dir", type=click.Path(file_okay=False)),
        click.option("--validation-size", type=int),
        click.option("--selector", type=_choice(Selector)),
        click.option("--workers", type=int),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _handle_errors(func: Callable) -> Callable:
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except RBGreedyError as e:
            raise click.ClickException(str(e)) from e
    return wrapper


def _load(config_path: Optional[str], mode: RunMode, overrides: Dict[str, Any]) -> ExperimentConfig:
    return load_experiment_config(config_path, {"mode": mode.value, **overrides})


@click.group()
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING (default from RBGREEDY_LOG_LEVEL)")
def cli(log_level: Optional[str]) -> None:
    """Weak greedy reduced bases over random training sets."""
    configure_logging(log_level or get_settings().log_level)


@cli.command()
@common_options
@click.option("--k", "ks", type=int, multiple=True, help="Subdomains per side; repeat for a sweep")
@click.option("--t", "ts", type=float, multiple=True, help="Amplitude decay; repeat for a sweep")
@click.option("--beta", "beta_list", type=float, multiple=True, help="Training growth exponent; repeatable")
@click.option("--n-max", type=int)
@click.option("--realizations", type=int)
@click.option("--pool-mode", type=_choice(PoolMode))
@click.option("--pool-size", type=int)
@click.option("--save-bases/--no-save-bases", default=None)
@_handle_errors
def schedule(config_path, ks, ts, **overrides):
    """Error curves of the greedy with N(n) = floor(n^beta) training points."""
    first = {"k": ks[0] if ks else None, "t": ts[0] if ts else None}
    config = _load(config_path, RunMode.SCHEDULED, {**overrides, **first})
    results = experiments.run_study(config, ks, ts)
    for (k, t), curves in results.items():
        rates = {f"{b:g}": experiments.fit_decay_rate(curves, b) for b in curves.betas}
        click.echo(f"k={k} t={t:g}: observed rates " + ", ".join(f"beta={b}: {s:.3f}" for b, s in rates.items()))
    click.echo(f"results in {config.output_dir}")


@cli.command()
@common_options
@click.option("--k", type=int)
@click.option("--t", type=float)
@click.option("--epsilon", type=float)
@click.option("--eta", type=float)
@click.option("--r", type=float)
@click.option("--m0", type=float)
@click.option("--s-assumed", type=float, help="Assumed n-width decay rate for the complexity diagnostics")
@click.option("--save-bases/--no-save-bases", default=None)
@_handle_errors
def certify(config_path, **overrides):
    """Certified greedy: stop once the training maximum drops below epsilon / (8 m^alpha)."""
    config = _load(config_path, RunMode.CERTIFIED, overrides)
    trace = experiments.run_certified_cli(config)
    d = trace.diagnostics
    click.echo(
        f"{trace.termination.value}: n={d['final_dimension']} m={d['m']} N={d['N']} "
        f"evaluations={trace.evaluation_count} validation error={d['final_sigma_val']:.4e}"
    )


@cli.command("lemma-mc")
@common_options
@click.option("--instances", "lemma_instances", type=int)
@click.option("--trials", "lemma_trials", type=int)
@click.option("--max-m", "lemma_max_m", type=int)
@click.option("--max-d", "lemma_max_d", type=int)
@click.option("--mc-samples", "lemma_mc_samples", type=int)
@click.option("--eta", "lemma_etas", type=float, multiple=True)
@_handle_errors
def lemma_mc(config_path, **overrides):
    """Monte Carlo checks of the sampling inequalities behind the certified budget."""
    config = _load(config_path, RunMode.LEMMA_MC, overrides)
    report = experiments.run_lemma_mc(config)
    click.echo(
        f"{len(report.lemma)} sampling trials, {len(report.nikolskii)} Nikolskii and "
        f"{len(report.superlevel)} superlevel checks: {report.violations} violations"
    )
    if report.violations:
        raise click.exceptions.Exit(1)


@cli.command()
@click.argument("csv_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(), default=None, help="Directory or .svg file (default: plots/ next to the CSV)")
@click.option("--title", default=None)
@_handle_errors
def plot(csv_path, out_path, title):
    """Error curves from curves.csv as SVG."""
    target = Path(out_path) if out_path else Path(csv_path).parent / "plots"
    for path in plots.emit_plots(csv_path, target, title=title):
        click.echo(f"wrote {path}")


@cli.command()
@click.option("--basis", "basis_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--params", "params_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="CSV with one parameter vector per row and a header line")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Result CSV (default: stdout)")
@_handle_errors
def online(basis_path, params_path, out_path):
    """Reduced coefficients c1..cn for parameter rows, with their V-norm and residual surrogate."""
    rb = persistence.load_basis(basis_path)
    points = pd.read_csv(params_path, float_precision="round_trip").to_numpy(dtype=np.float64)
    rows = online_batch(rb, points)
    coeff_columns = [f"c{i + 1}" for i in range(rb.n)]
    table = pd.DataFrame(
        [[r["row"], r["vnorm"], r["residual"], *r["coeffs"]] for r in rows],
        columns=["row", "vnorm", "residual", *coeff_columns],
    )
    if out_path:
        experiments.write_csv(table, out_path)
        click.echo(f"{len(table)} rows written to {out_path}")
    else:
        click.echo(table.to_csv(index=False, float_format=experiments.FLOAT_FORMAT, lineterminator="\n"), nl=False)


if __name__ == "__main__":
    cli()
