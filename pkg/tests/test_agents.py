# tests/test_agents.py

import math

import numpy as np
import pytest
from src.rationalpg import hograd
from src.rationalpg.agents import (
    AdvantageBatch,
    CriticParams,
    PolicyParams,
    Role,
    critic_update,
    discounted_returns,
    entropy_bonus,
    gae_advantages,
    gae_batch,
    init_policy,
    normalize_advantages,
    policy_log_prob,
)
from src.rationalpg.exceptions import ContractViolation, EmptyBatchError
from src.rationalpg.games import Phase, Seat, Step, Trajectory


def _policy(logits, trainable=True):
    return PolicyParams("agent", Role.BASE, Seat.ROW, tuple(logits), trainable)


def _trajectory(rewards, pairing=("a", "b")):
    steps = [Step(0, (0, 0), (r, r)) for r in rewards]
    return Trajectory(0, pairing, Phase.EVALUATION, steps)


def test_init_policy_is_seeded():
    first = init_policy("x", Role.BASE, Seat.COL, 3, np.random.default_rng(4))
    second = init_policy("x", Role.BASE, Seat.COL, 3, np.random.default_rng(4))
    assert first.logits == second.logits
    assert first.action_count == 3
    assert first.key == ("x", Seat.COL)
    assert first.optimizer_state.kind is hograd.OptimizerKind.SGD


def test_init_policy_zero_scale_is_uniform():
    policy = init_policy("x", "manipulator", 1, 4, np.random.default_rng(0), init_scale=0.0)
    assert policy.role is Role.MANIPULATOR
    assert policy.seat is Seat.ROW
    assert policy.probabilities() == pytest.approx([0.25] * 4)


def test_policy_log_prob_of_uniform_policy():
    assert policy_log_prob(_policy((0.0, 0.0)), 0, 0) == pytest.approx(math.log(0.5))


def test_policy_log_prob_rejects_bad_inputs():
    policy = _policy((0.0, 0.0))
    with pytest.raises(ContractViolation, match="observation"):
        policy_log_prob(policy, 1, 0)
    with pytest.raises(ContractViolation, match="out of range"):
        policy_log_prob(policy, 0, 2)


def test_entropy_bonus_is_maximal_for_uniform():
    assert entropy_bonus(_policy((0.0, 0.0, 0.0))) == pytest.approx(math.log(3))
    assert entropy_bonus(_policy((20.0, 0.0, 0.0))) == pytest.approx(0.0, abs=1e-6)


def test_entropy_bonus_is_differentiable():
    tape = hograd.Tape()
    policy = _policy((0.5, 0.0)).bind(tape)
    (d_first, d_second) = hograd.grad(entropy_bonus(policy), policy.logits)
    # moving mass towards the uniform policy raises the entropy
    assert d_first < 0.0 < d_second


def test_bind_uses_leaves_only_for_trainable_policies():
    tape = hograd.Tape()
    trainable = _policy((1.0, 2.0)).bind(tape)
    frozen = _policy((1.0, 2.0), trainable=False).bind(tape)
    assert [z.op for z in trainable.logits] == ["leaf", "leaf"]
    assert [z.op for z in frozen.logits] == ["const", "const"]
    product = hograd.dot(hograd.values_of(frozen.logits), trainable.logits)
    assert hograd.grad(product, trainable.logits) == pytest.approx([1.0, 2.0])
    assert frozen.detached().logits == (1.0, 2.0)


def test_discounted_returns():
    assert discounted_returns([1.0, 1.0, 1.0], 0.5) == pytest.approx([1.75, 1.5, 1.0])


def test_gae_with_zero_critic():
    critic = CriticParams.zeros(("a", "b"), [Seat.ROW], 3)
    batch = gae_advantages(_trajectory([1.0, 1.0, 1.0]), critic, 0.95, 0.95, owner="a")
    assert batch.owner == "a"
    assert batch.pairing == ("a", "b")
    (row,) = batch.values
    assert row[0] == pytest.approx(1.0 + 0.9025 + 0.9025**2)
    assert row[2] == pytest.approx(1.0)


def test_gae_with_lambda_zero_is_the_td_error():
    critic = CriticParams.zeros(("a", "b"), [Seat.ROW], 2)
    critic = CriticParams(critic.pairing, critic.reward_seats, np.array([[0.5, 2.0]]))
    (row,) = gae_batch([_trajectory([1.0, 1.0])], critic, 0.9, 0.0).values
    assert row == pytest.approx((1.0 + 0.9 * 2.0 - 0.5, 1.0 - 2.0))


def test_gae_rejects_trajectories_longer_than_the_critic():
    critic = CriticParams.zeros(("a", "b"), [Seat.ROW], 1)
    with pytest.raises(ContractViolation, match="covers"):
        gae_batch([_trajectory([1.0, 1.0])], critic, 0.9, 0.9)


def test_critic_update_moves_towards_returns():
    critic = CriticParams.zeros(("a", "b"), [Seat.ROW], 1, lr=1.0)
    updated, loss = critic_update(critic, [_trajectory([2.0])], 0.9, value_coef=0.5)
    assert loss == pytest.approx(1.0)
    assert updated.values[0, 0] == pytest.approx(1.0)
    assert critic.values[0, 0] == 0.0


def test_critic_update_with_empty_batch():
    critic = CriticParams.zeros(("a", "b"), [Seat.ROW], 1)
    with pytest.raises(EmptyBatchError, match="no data for pairing"):
        critic_update(critic, [], 0.9)


def test_critic_update_rejects_foreign_pairing():
    critic = CriticParams.zeros(("a", "b"), [Seat.ROW], 1)
    with pytest.raises(ContractViolation, match="fed to critic"):
        critic_update(critic, [_trajectory([1.0], pairing=("b", "a"))], 0.9)


def test_pooled_normalization_shares_statistics():
    batches = [
        AdvantageBatch("a", ("a", "b"), ((1.0,), (3.0,))),
        AdvantageBatch("a", ("a", "c"), ((5.0,), (7.0,))),
    ]
    pooled = normalize_advantages(batches)
    assert pooled[0].mean == pooled[1].mean == pytest.approx(4.0)
    values = np.concatenate([b.flat() for b in pooled])
    assert values.mean() == pytest.approx(0.0)
    assert values.std() == pytest.approx(1.0, rel=1e-6)
    assert pooled[0].flat()[0] < pooled[1].flat()[0]


def test_per_partner_normalization_is_independent():
    batches = [
        AdvantageBatch("a", ("a", "b"), ((1.0,), (3.0,))),
        AdvantageBatch("a", ("a", "c"), ((5.0,), (7.0,))),
    ]
    separate = normalize_advantages(batches, pooled=False)
    assert separate[0].mean == pytest.approx(2.0)
    assert separate[1].mean == pytest.approx(6.0)
    assert separate[0].flat() == pytest.approx(separate[1].flat())


def test_normalization_of_empty_group_fails():
    with pytest.raises(ContractViolation, match="no advantages"):
        normalize_advantages([AdvantageBatch("a", ("a", "b"), ())])
