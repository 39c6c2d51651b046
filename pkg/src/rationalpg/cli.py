"""
RationalPG CLI.

This module provides the command-line interface of rationalpg. It trains the
algorithm family on matrix games, sweeps parameter grids, evaluates checkpoints
against each other, audits them for self-sabotage and runs the oracle checks.

Exit codes: 0 success, 1 usage or configuration error, 2 a run diverged,
3 a check suite failed.

Functions:
    cli: The click command group.
    main: The console entry point.

Example:
    To train AT-RPG with four lookahead steps:
        $ rationalpg run --game fig2_coop --algo at-rpg --lookahead 4 --steps 3000

    To sweep the lookahead:
        $ rationalpg sweep --algo at-rpg --grid lookahead=1,2,4,8

    To compare checkpoints and audit them:
        $ rationalpg crossplay "runs/*/seed-0/checkpoints/step-003000/member-*.yaml"
        $ rationalpg audit runs/at-fig2_coop-*/seed-0/checkpoints/step-005000/adversary.yaml

    To run the self-checks:
        $ rationalpg check --suite grad --suite oracle
"""

import logging
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence

import click

from .algorithms import AlgorithmKind, Outcome
from .config import load_config
from .exceptions import RationalPGError
from .games import resolve_game
from .harness import (
    CHECK_SUITES,
    RunRecord,
    run_audit,
    run_checks,
    run_crossplay,
    run_experiments,
    run_sweep,
)
from .utils import parse_grid

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_CHECK_FAILED = 3

_EXPERIMENT_OPTIONS = [
    click.option("--config", "config_path", default=None, help="TOML configuration file"),
    click.option("--game", default=None, help="Built-in game name or game definition file"),
    click.option(
        "--algo",
        "algorithm",
        type=click.Choice([kind.value for kind in AlgorithmKind], case_sensitive=False),
        default=None,
        help="Algorithm to train",
    ),
    click.option("--mode", type=click.Choice(["exact", "sampled"]), default=None),
    click.option("--steps", type=int, default=None, help="Update step budget"),
    click.option("--seed", "seeds", type=int, multiple=True, help="Seed; repeat for several"),
    click.option("--output", default=None, help="Output root for run directories"),
    click.option("--lookahead", type=int, default=None, help="Lookahead steps N"),
    click.option("--lr-base-lookahead", type=float, default=None),
    click.option("--lr-base", type=float, default=None),
    click.option("--lr-manipulator", type=float, default=None),
    click.option("--max-grad-norm", type=float, default=None),
    click.option("--partnerplay", type=float, default=None, help="Partner-play weight"),
    click.option("--population", type=int, default=None, help="Diversity population size"),
    click.option("--diversity-lambda", type=float, default=None),
    click.option("--victim", default=None, help="Checkpoint of the frozen victim"),
    click.option(
        "--sequential/--simultaneous",
        default=None,
        help="Train diversity members one after another",
    ),
    click.option("--dice-mode", type=click.Choice(["raw", "loaded"]), default=None),
    click.option("--optimizer", type=click.Choice(["sgd", "adam"]), default=None),
    click.option("--batch-size", type=int, default=None, help="Episodes per seating and edge"),
    click.option("--horizon", type=int, default=None, help="Repeat the game this many steps"),
    click.option("--discount", type=float, default=None, help="Discount of an iterated game"),
    click.option("--init-scale", type=float, default=None),
    click.option(
        "--per-partner-norm/--pooled-norm",
        default=None,
        help="Normalize advantages per training partner",
    ),
    click.option("--checkpoint-interval", type=int, default=None),
    click.option(
        "--early-stop/--no-early-stop",
        "stop_on_convergence",
        default=None,
        help="Stop once the policies converge",
    ),
]


def experiment_options(command: Callable) -> Callable:
    for option in reversed(_EXPERIMENT_OPTIONS):
        command = option(command)
    return command


def _load(config_path: Optional[str], overrides: Dict[str, Any]):
    seeds = overrides.pop("seeds", ())
    if seeds:
        overrides["seeds"] = tuple(seeds)
    try:
        return load_config(config_path).with_overrides(**overrides)
    except RationalPGError as e:
        raise click.ClickException(f"Error loading configuration: {e}")


def _game(game: str, horizon: Optional[int], discount: Optional[float]):
    try:
        return resolve_game(game, horizon, discount)
    except (RationalPGError, OSError) as e:
        raise click.ClickException(f"Error loading game: {e}")


def _echo_record(record: RunRecord) -> None:
    converged = "" if record.converged_step is None else f", converged at {record.converged_step}"
    cycling = f", oscillating ({record.switches} switches)" if record.oscillating else ""
    click.echo(
        f"seed {record.seed}: {record.outcome.value} after {record.steps_run} steps"
        f"{converged}{cycling} ({record.wall_clock:.1f}s) -> {record.run_dir}"
    )
    if record.error:
        click.echo(f"  {record.error}", err=True)


def _exit_for(ctx: click.Context, records: Sequence[RunRecord]) -> None:
    if any(record.outcome is Outcome.DIVERGED for record in records):
        ctx.exit(EXIT_NUMERICAL)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Log progress of the library")
def cli(verbose: bool) -> None:
    """Rational policy gradients on matrix games."""
    if verbose:
        logging.basicConfig(
            level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
        )


@cli.command()
@experiment_options
@click.pass_context
def run(ctx: click.Context, config_path: Optional[str], **overrides: Any) -> None:
    """Train one configuration for every seed."""
    config = _load(config_path, overrides)
    click.echo(f"Running {config.algorithm} on {config.game} for {config.steps} steps")
    try:
        records = run_experiments(config)
    except RationalPGError as e:
        raise click.ClickException(str(e))
    for record in records:
        _echo_record(record)
    _exit_for(ctx, records)


@cli.command()
@experiment_options
@click.option("--grid", "grid_args", multiple=True, help="Parameter values as name=v1,v2")
@click.option("--workers", type=int, default=None, help="Worker processes (default: all CPUs)")
@click.option("--sweep-dir", default=None, help="Directory of the sweep")
@click.pass_context
def sweep(
    ctx: click.Context,
    config_path: Optional[str],
    grid_args: List[str],
    workers: Optional[int],
    sweep_dir: Optional[str],
    **overrides: Any,
) -> None:
    """Run the Cartesian product of a parameter grid."""
    config = _load(config_path, overrides)
    try:
        grid = parse_grid(grid_args)
        result = run_sweep(config, grid, workers=workers, output=sweep_dir)
    except RationalPGError as e:
        raise click.ClickException(str(e))
    for record in result.records:
        _echo_record(record)
    click.echo(f"Sweep summary: {result.summary_path}")
    _exit_for(ctx, result.records)


@cli.command()
@click.argument("checkpoints", nargs=-1, required=True)
@click.option(
    "--game", default="fig2_coop", show_default=True, help="Built-in game or definition file"
)
@click.option("--horizon", type=int, default=None)
@click.option("--discount", type=float, default=None)
@click.option("--episodes", type=int, default=0, show_default=True, help="0 for exact utilities")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--output", default=None, help="Grid CSV path")
def crossplay(
    checkpoints: Sequence[str],
    game: str,
    horizon: Optional[int],
    discount: Optional[float],
    episodes: int,
    seed: int,
    output: Optional[str],
) -> None:
    """Cross-play grid of checkpoint files (paths or glob patterns)."""
    payoff_game = _game(game, horizon, discount)
    try:
        grid, path = run_crossplay(checkpoints, payoff_game, episodes, seed, output)
    except RationalPGError as e:
        raise click.ClickException(str(e))
    width = max(len(label) for label in grid.labels)
    click.echo(" " * width + "  " + "  ".join(f"{label:>10}" for label in grid.labels))
    for label, row in zip(grid.labels, grid.values):
        click.echo(f"{label:<{width}}  " + "  ".join(f"{value:>10.4f}" for value in row))
    click.echo(f"self-play {grid.self_play:.4f}, cross-play {grid.cross_play:.4f}")
    click.echo(f"Grid written to {path}")


@cli.command()
@click.argument("checkpoints", nargs=-1, required=True)
@click.option(
    "--game", default="fig2_coop", show_default=True, help="Built-in game or definition file"
)
@click.option("--horizon", type=int, default=None)
@click.option("--discount", type=float, default=None)
@click.option("--delta", type=float, default=0.01, show_default=True, help="Oracle grid step")
@click.option(
    "--support-tol",
    type=float,
    default=0.05,
    show_default=True,
    help="Probability below which an action does not count as played",
)
def audit(
    checkpoints: Sequence[str],
    game: str,
    horizon: Optional[int],
    discount: Optional[float],
    delta: float,
    support_tol: float,
) -> None:
    """Flag policies that are not a best response to any co-policy."""
    payoff_game = _game(game, horizon, discount)
    try:
        report = run_audit(checkpoints, payoff_game, delta, support_tol)
    except RationalPGError as e:
        raise click.ClickException(str(e))
    for line in report.lines:
        click.echo(line)
    click.echo(f"{len(report.flagged)} of {len(report.entries)} policies flagged as irrational")


@cli.command()
@click.option(
    "--suite",
    "suites",
    type=click.Choice(list(CHECK_SUITES)),
    multiple=True,
    help="Suite to run; repeat for several (default: all)",
)
@click.option(
    "--h", "h", type=float, default=1e-5, show_default=True, help="Finite-difference step"
)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--trials", type=int, default=20, show_default=True)
@click.option("--batch-size", type=int, default=10_000, show_default=True)
@click.option("--strategies", type=int, default=100, show_default=True)
@click.option("--delta", type=float, default=0.01, show_default=True)
@click.pass_context
def check(
    ctx: click.Context,
    suites: Sequence[str],
    h: float,
    seed: int,
    trials: int,
    batch_size: int,
    strategies: int,
    delta: float,
) -> None:
    """Compare the engine against finite differences and independent oracles."""
    try:
        report = run_checks(suites or None, h, seed, trials, batch_size, strategies, delta)
    except RationalPGError as e:
        raise click.ClickException(str(e))
    for line in report.lines:
        click.echo(line)
    if not report.passed:
        click.echo(f"{len(report.failures())} check(s) failed", err=True)
        ctx.exit(EXIT_CHECK_FAILED)
    click.echo("All checks passed")


def main(argv: Optional[Sequence[str]] = None) -> None:
    """Console entry point; maps click usage errors to exit code 1."""
    try:
        code = cli.main(args=argv, prog_name="rationalpg", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        sys.exit(EXIT_USAGE)
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        sys.exit(EXIT_USAGE)
    sys.exit(code if isinstance(code, int) else EXIT_OK)


if __name__ == "__main__":
    main()
