import os
from unittest import mock

import pytest
from src.rationalpg.algorithms import AlgorithmKind, Mode
from src.rationalpg.config import (
    OUTPUT_ROOT_ENV,
    ExperimentConfig,
    config_hash,
    load_config,
)
from src.rationalpg.exceptions import ConfigError
from src.rationalpg.shaping import DiceMode, LookaheadConfig


@pytest.fixture(autouse=True)
def _no_output_override(monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)


def test_load_config_defaults_without_files(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    config = load_config()
    assert config == ExperimentConfig()
    assert config.algorithm == "at-rpg"
    assert (config.lookahead, config.lr_base_lookahead, config.lr_manipulator) == (8, 1.0, 0.1)
    assert config.lookahead_config() == LookaheadConfig()
    assert config.seeds == (0,)


def test_load_config_from_rationalpg_toml(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "rationalpg.toml").write_text(
        "[experiment]\n"
        'game = "fig12_chicken"\n'
        "seeds = [1, 2, 3]\n"
        "\n"
        "[lookahead]\n"
        "steps = 4\n"
        "lr_base = 0.02\n"
        'optimizer = "adam"\n'
        "\n"
        "[convergence]\n"
        "stop_on_convergence = false\n"
    )
    config = load_config()
    assert config.game == "fig12_chicken"
    assert config.seeds == (1, 2, 3)
    assert config.lookahead == 4
    assert config.lr_base == 0.02
    assert not config.stop_on_convergence
    options = config.training_options()
    assert options.lookahead.lookahead == 4
    assert options.lookahead.optimizer.value == "adam"
    assert not options.stop_on_convergence


def test_load_config_with_valid_pyproject(monkeypatch):
    pyproject_content = (
        "[project]\n"
        'name = "demo"\n'
        "\n"
        "[tool.rationalpg.experiment]\n"
        'algorithm = "ad-rpg"\n'
        "steps = 10\n"
        "\n"
        "[tool.rationalpg.algorithm]\n"
        "population = 3\n"
    )
    monkeypatch.setattr(os.path, "exists", lambda x: x == "pyproject.toml")
    monkeypatch.setattr("builtins.open", mock.mock_open(read_data=pyproject_content))

    config = load_config()
    assert config.algorithm == "ad-rpg"
    assert config.steps == 10
    assert config.population == 3
    assert config.algorithm_spec(seed=4).kind is AlgorithmKind.AD_RPG


def test_load_config_explicit_path_not_found(tmp_path):
    with pytest.raises(ConfigError, match="configuration file not found"):
        load_config(str(tmp_path / "missing.toml"))


def test_load_config_with_malformed_toml(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[experiment]\nsteps = 10\ngame = \n")
    with pytest.raises(ConfigError) as excinfo:
        load_config(str(path))
    assert excinfo.value.line == 3
    assert "error decoding" in str(excinfo.value)


def test_unknown_key_names_line_and_field(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[lookahead]\nsteps = 4\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError) as excinfo:
        load_config(str(path))
    assert excinfo.value.line == 3
    assert excinfo.value.field == "lookahead.learning_rate"
    assert "[line 3, field 'lookahead.learning_rate']" in str(excinfo.value)


def test_unknown_section(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[optimizer]\nlr = 0.1\n")
    with pytest.raises(ConfigError, match="unknown section") as excinfo:
        load_config(str(path))
    assert excinfo.value.field == "optimizer"


def test_discount_comes_from_the_game_only(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[training]\ngamma = 0.9\n")
    with pytest.raises(ConfigError) as excinfo:
        load_config(str(path))
    assert excinfo.value.field == "training.gamma"
    config = ExperimentConfig().with_overrides(horizon=2, discount=0.5)
    assert config.resolve_game().discount == 0.5
    assert not hasattr(config.lookahead_config(), "gamma")


@pytest.mark.parametrize(
    "body, field, line",
    [
        ('[experiment]\nsteps = "many"\n', "experiment.steps", 2),
        ("[experiment]\n\nbatch_size = 1.5\n", "experiment.batch_size", 3),
        ('[training]\ngae_lambda = "high"\n', "training.gae_lambda", 2),
        ('[convergence]\nlog_threshold = "tight"\n', "convergence.log_threshold", 2),
        ("[algorithm]\nsequential = 1\n", "algorithm.sequential", 2),
        ('[experiment]\nseeds = [1.5]\n', "experiment.seeds", 2),
    ],
)
def test_type_errors_name_line_and_field(tmp_path, body, field, line):
    path = tmp_path / "run.toml"
    path.write_text(body)
    with pytest.raises(ConfigError) as excinfo:
        load_config(str(path))
    assert excinfo.value.field == field
    assert excinfo.value.line == line


def test_output_root_environment_override(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "rationalpg.toml").write_text('[experiment]\noutput = "from-file"\n')
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "elsewhere"))
    assert load_config().output == str(tmp_path / "elsewhere")


def test_with_overrides_accepts_dotted_names_and_skips_none():
    config = ExperimentConfig().with_overrides(**{"lookahead.steps": 4, "game": None})
    assert config.lookahead == 4
    assert config.game == "fig2_coop"
    sampled = ExperimentConfig().with_overrides(steps=5, mode="sampled")
    assert sampled.training_options().mode is Mode.SAMPLED


def test_with_overrides_rejects_unknown_fields():
    with pytest.raises(ConfigError) as excinfo:
        ExperimentConfig().with_overrides(learning_rate=0.1)
    assert excinfo.value.field == "learning_rate"


@pytest.mark.parametrize(
    "overrides, field",
    [
        ({"game": "no-such-game"}, "experiment.game"),
        ({"victim": "no/such/checkpoint.yaml"}, "algorithm.victim"),
        ({"mode": "annealed"}, "experiment.mode"),
        ({"dice_mode": "heavy"}, "lookahead.dice_mode"),
        ({"optimizer": "rmsprop"}, "lookahead.optimizer"),
        ({"batch_size": 0}, "experiment.batch_size"),
        ({"seeds": ()}, "experiment.seeds"),
        ({"partnerplay": 2.0}, "lookahead.partnerplay"),
        ({"algorithm": "ap"}, "algorithm.victim"),
        ({"algorithm": "lola"}, "experiment.algorithm"),
        ({"lookahead": 0}, "lookahead.steps"),
        ({"log_threshold": 0.0}, "convergence.log_threshold"),
        ({"threshold": -0.1}, "convergence.threshold"),
    ],
)
def test_validate_names_the_offending_field(overrides, field):
    with pytest.raises(ConfigError) as excinfo:
        ExperimentConfig().with_overrides(**overrides)
    assert excinfo.value.field == field


def test_game_file_is_accepted(tmp_path):
    game = tmp_path / "mp.yaml"
    game.write_text("payoff1: [[1, -1], [-1, 1]]\npayoff2: zerosum\n")
    config = ExperimentConfig().with_overrides(game=str(game), horizon=3, discount=0.9)
    resolved = config.resolve_game()
    assert resolved.is_zero_sum
    assert resolved.discount_mass == pytest.approx(1 + 0.9 + 0.81)


def test_lookahead_config_mapping():
    config = ExperimentConfig().with_overrides(dice_mode="raw", partnerplay=0.1, dice_lambda=0.5)
    lookahead = config.lookahead_config()
    assert lookahead.dice_mode is DiceMode.RAW
    assert lookahead.partnerplay == 0.1
    assert lookahead.dice_lambda == 0.5
    assert config.algorithm_spec(seed=0).partnerplay == 0.1


def test_config_hash_ignores_seeds_and_output():
    base = ExperimentConfig()
    assert len(config_hash(base)) == 12
    assert config_hash(base) == config_hash(base.with_overrides(seeds=(5, 6), output="x"))
    assert config_hash(base) != config_hash(base.with_overrides(lookahead=2))


def test_to_dict_lists_seeds():
    document = ExperimentConfig(seeds=(1, 2)).to_dict()
    assert document["seeds"] == [1, 2]
    assert document["algorithm"] == "at-rpg"
