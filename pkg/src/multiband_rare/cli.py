"""Command-line entry point: ``multiband-rare <verb> [options]``."""
from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from . import experiments, plotting
from .optimize import ConvergenceError
from .quantum import DivergenceError, SteadyStateError
from .scenario import ScenarioError, load_scenario
from .transfer import StrongReferenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PHYSICS = 3
EXIT_DIVERGENCE = 4


def _common(func):
    @click.option("--scenario", default="default.toml", show_default=True,
                  help="Scenario TOML (path, or name under $RARE_SCENARIO_DIR or the bundled data).")
    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                  help="Experiment config TOML.")
    @click.option("--seed", type=int, default=None, help="Master seed (overrides the config).")
    @click.option("--out", type=click.Path(file_okay=False), default="results", show_default=True,
                  help="Output directory.")
    @click.option("--mode", type=click.Choice(experiments.MODES), default=None,
                  help="Analytic curves, Monte Carlo checks, or both.")
    @click.option("--mc-count", type=int, default=None, help="Monte Carlo draws per checked grid point.")
    @click.option("--no-plot", is_flag=True, help="Skip figure rendering.")
    @functools.wraps(func)
    def wrapper(**kw):
        return func(**kw)

    return wrapper


def _run(experiment, scenario, config_path, seed, out, mode, mc_count, no_plot):
    try:
        s, bands, _ = load_scenario(scenario)
        cfg = experiments.load_config(config_path, experiment, seed=seed, mode=mode, mc_count=mc_count)
        meta = experiments.output_meta(s, bands, cfg)
        out = Path(out)
        written = []
        if experiment == "waveforms":
            summary, traces = experiments.run_waveforms(s, bands, cfg)
            written += [experiments.write_table(t, out, meta) for t in (summary, *traces)]
            if not no_plot:
                written.append(plotting.plot_waveforms(traces, summary, out / "waveforms.png"))
            click.echo(summary.body(), nl=False)
        elif experiment == "optimize":
            table, rep = experiments.run_optimize(s, bands, cfg)
            written.append(experiments.write_table(table, out, meta))
            (out / "optimize.json").write_text(json.dumps({**meta, **rep.as_dict()}, indent=2, sort_keys=True) + "\n")
            written.append(out / "optimize.json")
            click.echo(experiments.format_report(rep))
        else:
            runner, plotter = {
                "attention_sweep": (experiments.run_attention_sweep, plotting.plot_attention),
                "sumsquare_sweep": (experiments.run_sumsquare_sweep, plotting.plot_sumsquare),
                "power_sweep": (experiments.run_power_sweep, plotting.plot_power),
            }[experiment]
            table = runner(s, bands, cfg)
            written.append(experiments.write_table(table, out, meta))
            if not no_plot:
                written.append(plotter(table, out / f"{experiment}.png"))
        for path in written:
            click.echo(f"wrote {path}", err=True)
    except (ScenarioError, experiments.ConfigError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (StrongReferenceError, SteadyStateError) as exc:
        click.echo(f"physics precondition failed: {exc}", err=True)
        sys.exit(EXIT_PHYSICS)
    except (DivergenceError, ConvergenceError) as exc:
        click.echo(f"numerical divergence: {exc}", err=True)
        sys.exit(EXIT_DIVERGENCE)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose):
    """Multi-band Rydberg atomic receiver experiments."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@_common
def waveforms(**kw):
    """Linearized, quasi-static and master-equation probe-power traces for N = 1..32 bands."""
    _run("waveforms", **kw)


@main.command("attention-sweep")
@_common
def attention_sweep(**kw):
    """Per-band SE and NCRLB over the dual-band Rabi attention."""
    _run("attention_sweep", **kw)


@main.command("sumsquare-sweep")
@_common
def sumsquare_sweep(**kw):
    """Mean SE and NCRLB over the Rabi sum-square for optimal and random attentions."""
    _run("sumsquare_sweep", **kw)


@main.command("power-sweep")
@_common
def power_sweep(**kw):
    """Mean SE and NCRLB over transmit power, with the classic baseline."""
    _run("power_sweep", **kw)


@main.command()
@_common
def optimize(**kw):
    """Optimal sum-square and attentions for the scenario's service mix."""
    _run("optimize", **kw)


if __name__ == "__main__":  # pragma: no cover
    main()
