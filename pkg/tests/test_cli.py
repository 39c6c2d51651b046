# tests/test_cli.py

import os

import pytest
from click.testing import CliRunner
from src.rationalpg import algorithms
from src.rationalpg import cli as cli_module
from src.rationalpg.agents import Role
from src.rationalpg.algorithms import ADVERSARY, VICTIM, save_checkpoint
from src.rationalpg.cli import EXIT_CHECK_FAILED, EXIT_NUMERICAL, EXIT_USAGE, cli, main
from src.rationalpg.exceptions import NumericalError
from src.rationalpg.games import Seat
from src.rationalpg.harness import CheckOutcome, CheckReport


@pytest.fixture(autouse=True)
def _isolated(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("RATIONALPG_OUTPUT_ROOT", raising=False)


def _checkpoints(directory):
    victim = save_checkpoint(
        os.path.join(directory, "victim.yaml"), VICTIM, Role.BASE, 0, {Seat.ROW: [50.0, 0.0]}
    )
    adversary = save_checkpoint(
        os.path.join(directory, "adversary.yaml"),
        ADVERSARY,
        Role.BASE,
        0,
        {Seat.COL: [0.0, 0.0, 50.0]},
    )
    return victim, adversary


def test_help_lists_commands():
    runner = CliRunner()
    result = runner.invoke(cli, ["--help"])
    assert result.exit_code == 0
    for command in ("run", "sweep", "crossplay", "audit", "check"):
        assert command in result.output


def test_run_command(tmp_path):
    runner = CliRunner()
    result = runner.invoke(
        cli,
        ["run", "--algo", "sp", "--steps", "2", "--seed", "0", "--seed", "1", "--output", "out"],
    )
    assert result.exit_code == 0, result.output
    assert "Running sp on fig2_coop for 2 steps" in result.output
    assert "seed 0: budget-exhausted after 2 steps" in result.output
    assert "seed 1: budget-exhausted after 2 steps" in result.output
    assert os.path.isdir(tmp_path / "out")


def test_run_command_reads_config_file(tmp_path):
    (tmp_path / "run.toml").write_text(
        '[experiment]\nalgorithm = "sp"\nsteps = 1\ngame = "fig12_chicken"\n'
    )
    runner = CliRunner()
    result = runner.invoke(cli, ["run", "--config", "run.toml"])
    assert result.exit_code == 0, result.output
    assert "Running sp on fig12_chicken for 1 steps" in result.output


def test_run_command_rejects_invalid_configuration():
    runner = CliRunner()
    result = runner.invoke(cli, ["run", "--lookahead", "0"])
    assert result.exit_code == EXIT_USAGE
    assert "Error loading configuration" in result.output
    assert "lookahead.steps" in result.output


def test_run_command_exits_2_when_a_run_diverges(monkeypatch):
    def explode(*args, **kwargs):
        raise NumericalError("non-finite gradient")

    monkeypatch.setattr(algorithms, "exact_rpg_step", explode)
    runner = CliRunner()
    result = runner.invoke(cli, ["run", "--algo", "sp", "--steps", "3"])
    assert result.exit_code == EXIT_NUMERICAL
    assert "seed 0: diverged after 0 steps" in result.output


def test_sweep_command():
    runner = CliRunner()
    result = runner.invoke(
        cli,
        ["sweep", "--algo", "sp", "--steps", "1", "--grid", "lookahead=1,2", "--workers", "1"],
    )
    assert result.exit_code == 0, result.output
    assert result.output.count("budget-exhausted") == 2
    assert "Sweep summary: runs" in result.output
    assert result.output.rstrip().endswith("summary.csv")


def test_sweep_command_rejects_malformed_grid():
    runner = CliRunner()
    result = runner.invoke(cli, ["sweep", "--algo", "sp", "--grid", "lookahead"])
    assert result.exit_code == EXIT_USAGE
    assert "name=v1,v2" in result.output


def test_crossplay_command(tmp_path):
    paths = []
    for name, action in (("first", 0), ("second", 1)):
        policies = {
            Seat.ROW: [50.0 if a == action else 0.0 for a in range(2)],
            Seat.COL: [50.0 if a == action else 0.0 for a in range(3)],
        }
        path = str(tmp_path / f"{name}.yaml")
        paths.append(save_checkpoint(path, name, Role.BASE, 0, policies))
    runner = CliRunner()
    result = runner.invoke(cli, ["crossplay", *paths])
    assert result.exit_code == 0, result.output
    assert "self-play 1.0000, cross-play 0.0000" in result.output
    assert f"Grid written to {tmp_path / 'crossplay.csv'}" in result.output


def test_crossplay_command_without_compatible_seating(tmp_path):
    runner = CliRunner()
    result = runner.invoke(cli, ["crossplay", *_checkpoints(str(tmp_path))])
    assert result.exit_code == EXIT_USAGE
    assert "compatible seating" in result.output


def test_crossplay_command_missing_checkpoint():
    runner = CliRunner()
    result = runner.invoke(cli, ["crossplay", "nowhere.yaml"])
    assert result.exit_code == EXIT_USAGE
    assert "checkpoint not found: nowhere.yaml" in result.output


def test_crossplay_command_unknown_game(tmp_path):
    victim, _ = _checkpoints(str(tmp_path))
    runner = CliRunner()
    result = runner.invoke(cli, ["crossplay", victim, "--game", "no_such_game"])
    assert result.exit_code == EXIT_USAGE
    assert "Error loading game" in result.output


def test_audit_command(tmp_path):
    _checkpoints(str(tmp_path))
    runner = CliRunner()
    result = runner.invoke(cli, ["audit", str(tmp_path / "*.yaml")])
    assert result.exit_code == 0, result.output
    assert "IRRATIONAL" in result.output
    assert "1 of 2 policies flagged as irrational" in result.output


def test_check_command_passes():
    runner = CliRunner()
    result = runner.invoke(
        cli, ["check", "--suite", "oracle", "--strategies", "3", "--delta", "0.05"]
    )
    assert result.exit_code == 0, result.output
    assert "[PASS] oracle: rationality oracles agree on fig2_coop" in result.output
    assert "All checks passed" in result.output


def test_check_command_exits_3_on_failure(monkeypatch):
    failing = CheckReport([CheckOutcome("grad", "utility", False, "max relative error 1.00e+00")])
    monkeypatch.setattr(cli_module, "run_checks", lambda *args: failing)
    runner = CliRunner()
    result = runner.invoke(cli, ["check", "--suite", "grad"])
    assert result.exit_code == EXIT_CHECK_FAILED
    assert "[FAIL] grad: utility" in result.output


def test_main_maps_usage_errors_to_exit_code_1():
    with pytest.raises(SystemExit) as excinfo:
        main(["run", "--algo", "bogus"])
    assert excinfo.value.code == EXIT_USAGE


def test_main_exits_0_on_success():
    with pytest.raises(SystemExit) as excinfo:
        main(["check", "--suite", "oracle", "--strategies", "0", "--delta", "0.1"])
    assert excinfo.value.code == 0
