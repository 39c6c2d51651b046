# tests/test_games.py

import numpy as np
import pytest
import yaml
from src.rationalpg import hograd
from src.rationalpg.exceptions import ContractViolation, OracleLimitError
from src.rationalpg.games import (
    BUILTIN_GAMES,
    PayoffGame,
    Phase,
    Seat,
    Step,
    Trajectory,
    best_response_set,
    exact_utility,
    game_from_document,
    get_game,
    load_game,
    min_rational_utility,
    rationality_check,
    resolve_game,
    sample_batch,
    support_enumeration_check,
)


def test_builtin_games_shapes_and_labels():
    fig2 = get_game("fig2_coop")
    assert (fig2.rows, fig2.cols) == (2, 3)
    assert fig2.row_actions == ("A", "B")
    assert fig2.col_actions == ("C", "D", "E")
    assert fig2.is_cooperative
    assert get_game("fig13_rps").is_zero_sum
    assert not get_game("fig10_bach").is_cooperative
    assert set(BUILTIN_GAMES) >= {"appB_sabotage", "fig12_chicken", "fig11_coop"}


def test_unknown_game_lists_builtins():
    with pytest.raises(ContractViolation, match="fig2_coop"):
        get_game("prisoners")


def test_default_labels_continue_after_rows():
    game = PayoffGame("tiny", [[1, 2, 3], [4, 5, 6]], [[1, 2, 3], [4, 5, 6]])
    assert game.row_actions == ("A", "B")
    assert game.col_actions == ("C", "D", "E")


@pytest.mark.parametrize(
    "kwargs",
    [
        {"payoff1": [[1, 0]], "payoff2": [[1, 0], [0, 1]]},
        {"payoff1": [[1, float("nan")]], "payoff2": [[1, 0]]},
        {"payoff1": [[1, 0]], "payoff2": [[1, 0]], "horizon": 0},
        {"payoff1": [[1, 0]], "payoff2": [[1, 0]], "discount": 1.5},
        {"payoff1": [[1, 0]], "payoff2": [[1, 0]], "row_actions": ("A", "B")},
    ],
)
def test_invalid_games_are_rejected(kwargs):
    with pytest.raises(ContractViolation):
        PayoffGame("bad", **kwargs)


def test_exact_utility_of_mixed_strategies():
    fig2 = get_game("fig2_coop")
    assert exact_utility(fig2, [0.5, 0.5], [0.5, 0.5, 0.0], Seat.ROW) == pytest.approx(0.5)
    assert exact_utility(fig2, [1.0, 0.0], [0.0, 0.0, 1.0], Seat.COL) == pytest.approx(-1.0)


def test_exact_utility_scales_with_discount_mass():
    game = get_game("fig2_coop").with_horizon(3, 0.5)
    assert game.discount_mass == pytest.approx(1.75)
    assert exact_utility(game, [1.0, 0.0], [1.0, 0.0, 0.0], Seat.ROW) == pytest.approx(1.75)


def test_exact_utility_on_tape_matches_float_path():
    game = get_game("fig10_bach")
    tape = hograd.Tape()
    p = hograd.softmax(tape.leaves([0.3, -0.2]))
    q = hograd.softmax(tape.leaves([0.1, 0.4, -1.0]))
    value = exact_utility(game, p, q, Seat.COL)
    assert hograd.is_tape_value(value)
    expected = exact_utility(game, hograd.values_of(p), hograd.values_of(q), Seat.COL)
    assert hograd.value_of(value) == pytest.approx(expected)


def test_exact_utility_rejects_off_simplex_strategies():
    with pytest.raises(ContractViolation, match="simplex"):
        exact_utility(get_game("fig2_coop"), [0.7, 0.7], [1.0, 0.0, 0.0], Seat.ROW)
    with pytest.raises(ContractViolation, match="entries"):
        exact_utility(get_game("fig2_coop"), [1.0, 0.0], [1.0, 0.0], Seat.ROW)


def test_best_response_set_includes_ties():
    fig2 = get_game("fig2_coop")
    assert best_response_set(fig2, [1.0, 0.0, 0.0], Seat.ROW) == frozenset({0})
    assert best_response_set(fig2, [0.5, 0.5, 0.0], Seat.ROW) == frozenset({0, 1})
    assert best_response_set(fig2, [0.0, 1.0], Seat.COL) == frozenset({1})


def test_rationality_check_accepts_a_best_response():
    verdict = rationality_check(get_game("fig2_coop"), [1.0, 0.0, 0.0], Seat.COL)
    assert verdict.rational
    assert verdict.witness == pytest.approx((1.0, 0.0))
    assert verdict.margin == pytest.approx(1.0)
    assert verdict.support == (0,)


def test_rationality_check_flags_a_dominated_action():
    verdict = rationality_check(get_game("fig2_coop"), [0.0, 0.0, 1.0], Seat.COL)
    assert not verdict.rational
    assert verdict.witness is None
    assert verdict.support == (2,)


def test_rationality_check_of_sabotage_actions():
    game = get_game("appB_sabotage")
    assert rationality_check(game, [0.0, 0.0, 0.0, 1.0], Seat.COL).rational
    assert not rationality_check(game, [0.0, 1.0, 0.0, 0.0], Seat.COL).rational
    assert not rationality_check(game, [0.0, 0.0, 1.0, 0.0], Seat.COL).rational


def test_rationality_check_finds_barycenter_support():
    rps = get_game("fig13_rps")
    verdict = rationality_check(rps, [1 / 3, 1 / 3, 1 / 3], Seat.ROW)
    assert verdict.rational
    assert verdict.witness == pytest.approx((1 / 3, 1 / 3, 1 / 3))


def test_chicken_swerve_is_rational():
    assert rationality_check(get_game("fig12_chicken"), [0.0, 1.0], Seat.COL).rational


def test_oracle_limit_on_wide_games():
    wide = PayoffGame("wide", np.zeros((2, 5)), np.zeros((2, 5)))
    with pytest.raises(OracleLimitError, match="oracle limit"):
        rationality_check(wide, [0.5, 0.5], Seat.ROW)
    with pytest.raises(OracleLimitError):
        support_enumeration_check(wide, [0.5, 0.5], Seat.ROW)


@pytest.mark.parametrize("name", sorted(BUILTIN_GAMES))
def test_oracles_agree_on_pure_strategies(name):
    game = get_game(name)
    for seat in (Seat.ROW, Seat.COL):
        count = game.action_count(seat)
        for a in range(count):
            pure = [0.0] * count
            pure[a] = 1.0
            grid = rationality_check(game, pure, seat, delta=0.05).rational
            faces = support_enumeration_check(game, pure, seat, delta=0.05)
            assert grid == faces, f"{name} {seat.key} action {a}"


def test_min_rational_utility_ignores_irrational_co_play():
    fig2 = get_game("fig2_coop")
    # E is never a best response, so only C and D count
    assert min_rational_utility(fig2, [0.5, 0.5], Seat.ROW) == pytest.approx(0.5)
    assert min_rational_utility(fig2, [1.0, 0.0], Seat.ROW) == pytest.approx(0.0)


def test_sample_batch_is_deterministic_for_a_seed():
    game = get_game("fig2_coop").with_horizon(3)
    first = sample_batch(game, [0.5, 0.5], [0.2, 0.3, 0.5], 11, 8)
    second = sample_batch(game, [0.5, 0.5], [0.2, 0.3, 0.5], 11, 8)
    assert [[s.actions for s in t.steps] for t in first] == [
        [s.actions for s in t.steps] for t in second
    ]
    assert len(first) == 8
    assert all(len(t.steps) == 3 for t in first)
    assert [t.episode_id for t in first] == list(range(8))


def test_sample_batch_pure_strategies_and_rewards():
    game = get_game("fig10_bach")
    batch = sample_batch(
        game, [0.0, 1.0], [1.0, 0.0, 0.0], 3, 4, pairing=("x", "y"), phase=Phase.LOOKAHEAD
    )
    for trajectory in batch:
        assert trajectory.pairing == ("x", "y")
        assert trajectory.phase is Phase.LOOKAHEAD
        assert trajectory.steps[0].actions == (1, 0)
        assert trajectory.steps[0].rewards == (1.0, 1.0)


def test_sample_batch_attaches_log_prob_references():
    game = get_game("fig2_coop")
    tape = hograd.Tape()
    log_probs = hograd.log_softmax(tape.leaves([0.0, 0.0]))
    batch = sample_batch(game, [0.5, 0.5], [1.0, 0.0, 0.0], 5, 6, log_probs={Seat.ROW: log_probs})
    for trajectory in batch:
        step = trajectory.steps[0]
        assert step.log_probs[Seat.ROW] is log_probs[step.actions[0]]
        assert Seat.COL not in step.log_probs


def test_trajectory_discounted_return_per_seat():
    steps = [Step(0, (0, 0), (1.0, -1.0)) for _ in range(3)]
    trajectory = Trajectory(0, ("a", "b"), Phase.EVALUATION, steps)
    assert trajectory.discounted_return([Seat.ROW], 0.5) == pytest.approx(1.75)
    assert trajectory.discounted_return([Seat.COL], 0.5) == pytest.approx(-1.75)
    assert trajectory.discounted_return([Seat.ROW, Seat.COL], 0.5) == pytest.approx(0.0)


def test_game_from_document_shorthands():
    doc = {"name": "mp", "payoff1": [[1, -1], [-1, 1]], "payoff2": "zerosum"}
    game = game_from_document(doc)
    assert game.is_zero_sum
    assert game_from_document({"payoff1": [[1, 0]]}).is_cooperative
    with pytest.raises(ContractViolation, match="payoff2"):
        game_from_document({"payoff1": [[1, 0]], "payoff2": "mirror"})
    with pytest.raises(ContractViolation, match="payoff1"):
        game_from_document({"payoff2": [[1, 0]]})


def test_load_and_resolve_game_from_file(tmp_path):
    path = tmp_path / "stag.yaml"
    doc = get_game("fig12_chicken").to_document()
    doc["name"] = "chicken-copy"
    path.write_text(yaml.safe_dump(doc))

    game = load_game(str(path))
    assert game.name == "chicken-copy"
    assert np.array_equal(game.payoff2, get_game("fig12_chicken").payoff2)

    repeated = resolve_game(str(path), horizon=4, discount=0.9)
    assert (repeated.horizon, repeated.discount) == (4, 0.9)
    assert resolve_game("fig2_coop") is BUILTIN_GAMES["fig2_coop"]
    assert resolve_game("fig2_coop", horizon=2).discount == 1.0
