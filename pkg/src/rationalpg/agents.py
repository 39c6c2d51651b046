"""
Tabular softmax policies, critics and advantage estimation.

Classes:
    Role: Base agent or manipulator.
    PolicyParams: Logits of one agent in one seat.
    CriticParams: Tabular value function of one evaluated pairing.
    AdvantageBatch: Per-trajectory advantages with normalization stats.

Functions:
    init_policy: Draws initial logits.
    policy_log_prob: log softmax(logits)[action] as a tape value.
    entropy_bonus: Shannon entropy of a policy in nats.
    discounted_returns: Reward-to-go of a trajectory.
    gae_advantages: Generalized advantage estimates for one trajectory.
    gae_batch: Generalized advantage estimates for a batch.
    critic_update: One gradient step on the critic's value loss.
    normalize_advantages: Pooled (or per-partner) advantage normalization.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import hograd
from .exceptions import ContractViolation, EmptyBatchError
from .games import Seat, Trajectory

logger = logging.getLogger(__name__)

NORMALIZATION_EPS = 1e-8


class Role(str, Enum):
    BASE = "base"
    MANIPULATOR = "manipulator"


def _check_observation(observation: int) -> None:
    # matrix games have a single state
    if observation != 0:
        raise ContractViolation(f"unknown observation {observation}; matrix games only have 0")


@dataclass(frozen=True)
class PolicyParams:
    """Softmax policy of one agent in one seat.

    Attributes:
        agent_id (str): Owning agent.
        role (Role): Base agent or manipulator.
        seat (Seat): Seat this policy plays.
        logits (tuple): One logit per action; tape values while bound to a tape.
        trainable (bool): Frozen policies are never differentiation targets.
        optimizer_state (DifferentiableOptimizerState): Optimizer state.
    """

    agent_id: str
    role: Role
    seat: Seat
    logits: Tuple[hograd.Scalar, ...]
    trainable: bool = True
    optimizer_state: hograd.DifferentiableOptimizerState = field(
        default_factory=hograd.DifferentiableOptimizerState
    )

    @property
    def key(self) -> Tuple[str, Seat]:
        return (self.agent_id, self.seat)

    @property
    def action_count(self) -> int:
        return len(self.logits)

    def probabilities(self) -> np.ndarray:
        z = np.asarray(hograd.values_of(self.logits), dtype=float)
        z = np.exp(z - z.max())
        return z / z.sum()

    def log_probs(self) -> List[hograd.Scalar]:
        return hograd.log_softmax(self.logits)

    def probs(self) -> List[hograd.Scalar]:
        return hograd.softmax(self.logits)

    def bind(self, tape: hograd.Tape) -> "PolicyParams":
        """Copy whose logits live on `tape`: leaves when trainable, constants otherwise."""
        values = hograd.values_of(self.logits)
        logits = tape.leaves(values) if self.trainable else tape.constants(values)
        return replace(self, logits=tuple(logits))

    def with_logits(
        self,
        logits: Sequence[hograd.Scalar],
        optimizer_state: Optional[hograd.DifferentiableOptimizerState] = None,
    ) -> "PolicyParams":
        return replace(
            self,
            logits=tuple(logits),
            optimizer_state=self.optimizer_state if optimizer_state is None else optimizer_state,
        )

    def detached(self) -> "PolicyParams":
        return replace(
            self,
            logits=tuple(hograd.values_of(self.logits)),
            optimizer_state=self.optimizer_state.detached(),
        )


def init_policy(
    agent_id: str,
    role: Role,
    seat: Seat,
    actions: int,
    rng: np.random.Generator,
    init_scale: float = 0.5,
    optimizer: hograd.OptimizerKind = hograd.OptimizerKind.SGD,
    trainable: bool = True,
) -> PolicyParams:
    """Logits drawn from N(0, init_scale^2)."""
    logits = rng.normal(0.0, init_scale, size=actions) if init_scale > 0 else np.zeros(actions)
    return PolicyParams(
        agent_id=agent_id,
        role=Role(role),
        seat=Seat(seat),
        logits=tuple(float(x) for x in logits),
        trainable=trainable,
        optimizer_state=hograd.DifferentiableOptimizerState.create(optimizer, actions),
    )


def policy_log_prob(policy: PolicyParams, observation: int, action: int) -> hograd.Scalar:
    """log softmax(logits)[action].

    Example:
        policy_log_prob(policy_with_logits((0.0, 0.0)), 0, 0)  # log 0.5
    """
    _check_observation(observation)
    if not 0 <= action < policy.action_count:
        raise ContractViolation(
            f"action {action} out of range for {policy.agent_id} with {policy.action_count} actions"
        )
    return policy.log_probs()[action]


def entropy_bonus(policy: PolicyParams, observation: int = 0) -> hograd.Scalar:
    """Shannon entropy of softmax(logits) in nats, differentiable in the logits."""
    _check_observation(observation)
    log_probs = policy.log_probs()
    return -hograd.total([hograd.exp(lp) * lp for lp in log_probs])


@dataclass(frozen=True, eq=False)
class CriticParams:
    """Tabular value function V[observation, t] of one pairing and reward stream.

    Critic values never sit on a tape: they enter losses as constants.
    """

    pairing: Tuple[str, str]
    reward_seats: Tuple[Seat, ...]
    values: np.ndarray
    lr: float = 1.0

    @classmethod
    def zeros(
        cls, pairing: Tuple[str, str], reward_seats: Sequence[Seat], horizon: int, lr: float = 1.0
    ) -> "CriticParams":
        return cls(tuple(pairing), tuple(Seat(s) for s in reward_seats), np.zeros((1, horizon)), lr)

    @property
    def key(self) -> Tuple[str, str, Tuple[Seat, ...]]:
        return (self.pairing[0], self.pairing[1], self.reward_seats)

    @property
    def horizon(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class AdvantageBatch:
    """Advantages of a batch of trajectories.

    Attributes:
        owner (str): Agent whose loss consumes these advantages.
        pairing (tuple): Source pairing (row agent, column agent).
        values (tuple): Per-trajectory tuples of per-step advantages.
        mean (Optional[float]): Mean subtracted during normalization.
        std (Optional[float]): Standard deviation divided out during normalization.
    """

    owner: str
    pairing: Tuple[str, str]
    values: Tuple[Tuple[float, ...], ...]
    mean: Optional[float] = None
    std: Optional[float] = None

    def flat(self) -> np.ndarray:
        return np.array([a for row in self.values for a in row], dtype=float)


def discounted_returns(rewards: Sequence[float], gamma: float) -> List[float]:
    returns = [0.0] * len(rewards)
    running = 0.0
    for t in reversed(range(len(rewards))):
        running = rewards[t] + gamma * running
        returns[t] = running
    return returns


def _gae(rewards: Sequence[float], values: Sequence[float], gamma: float, gae_lambda: float):
    advantages = [0.0] * len(rewards)
    last = 0.0
    for t in reversed(range(len(rewards))):
        next_value = values[t + 1] if t + 1 < len(rewards) else 0.0
        delta = rewards[t] + gamma * next_value - values[t]
        advantages[t] = last = delta + gamma * gae_lambda * last
    return advantages


def _covers(critic: CriticParams, trajectory: Trajectory) -> None:
    if len(trajectory.steps) > critic.horizon:
        raise ContractViolation(
            f"critic for {critic.pairing} covers {critic.horizon} steps, "
            f"trajectory has {len(trajectory.steps)}"
        )


def gae_advantages(
    trajectory: Trajectory,
    critic: CriticParams,
    gamma: float,
    gae_lambda: float,
    owner: str = "",
) -> AdvantageBatch:
    """Generalized advantage estimates with a terminal value of zero.

    delta_t = r_t + gamma V_{t+1} - V_t and A_t = delta_t + gamma lambda A_{t+1},
    where rewards are those of the critic's reward seats.
    """
    return gae_batch([trajectory], critic, gamma, gae_lambda, owner)


def gae_batch(
    trajectories: Sequence[Trajectory],
    critic: CriticParams,
    gamma: float,
    gae_lambda: float,
    owner: str = "",
) -> AdvantageBatch:
    rows = []
    for trajectory in trajectories:
        _covers(critic, trajectory)
        values = critic.values[trajectory.steps[0].observation] if trajectory.steps else []
        rewards = trajectory.rewards(critic.reward_seats)
        rows.append(tuple(_gae(rewards, values, gamma, gae_lambda)))
    return AdvantageBatch(owner=owner, pairing=critic.pairing, values=tuple(rows))


def critic_update(
    critic: CriticParams,
    trajectories: Sequence[Trajectory],
    gamma: float,
    value_coef: float = 0.5,
) -> Tuple[CriticParams, float]:
    """One gradient step on value_coef * 0.5 * mean (V - G)^2.

    Args:
        critic (CriticParams): Critic to update.
        trajectories (Sequence[Trajectory]): Batch sampled under the critic's pairing.
        gamma (float): Discount of the empirical returns G.
        value_coef (float): Value-loss coefficient.

    Returns:
        Tuple[CriticParams, float]: Updated critic and the value loss before the step.

    Raises:
        EmptyBatchError: If `trajectories` is empty.
        ContractViolation: If a trajectory belongs to another pairing.
    """
    if not trajectories:
        raise EmptyBatchError(f"no data for pairing {critic.pairing}")
    residual_sum = np.zeros_like(critic.values)
    squared = 0.0
    count = 0
    for trajectory in trajectories:
        if tuple(trajectory.pairing) != critic.pairing:
            raise ContractViolation(
                f"trajectory of pairing {trajectory.pairing} fed to critic of {critic.pairing}"
            )
        _covers(critic, trajectory)
        returns = discounted_returns(trajectory.rewards(critic.reward_seats), gamma)
        for t, (step, g) in enumerate(zip(trajectory.steps, returns)):
            residual = critic.values[step.observation, t] - g
            residual_sum[step.observation, t] += residual
            squared += residual * residual
            count += 1
    loss = value_coef * 0.5 * squared / count
    values = critic.values - critic.lr * value_coef * residual_sum / count
    return replace(critic, values=values), float(loss)


def normalize_advantages(
    batches: Sequence[AdvantageBatch], pooled: bool = True
) -> List[AdvantageBatch]:
    """Centers and scales advantages per owning agent.

    With `pooled`, all of one agent's batches (one per training partner) share
    one mean and standard deviation; otherwise each batch is normalized alone.

    Raises:
        ContractViolation: If an agent group holds no advantage values.
    """
    groups: Dict[object, List[int]] = {}
    for index, batch in enumerate(batches):
        key = batch.owner if pooled else index
        groups.setdefault(key, []).append(index)

    result: List[Optional[AdvantageBatch]] = [None] * len(batches)
    for key, members in groups.items():
        pool = np.concatenate([batches[i].flat() for i in members])
        if pool.size == 0:
            raise ContractViolation(f"no advantages to normalize for {key}")
        mean = float(pool.mean())
        std = float(pool.std())
        for i in members:
            scaled = tuple(
                tuple((a - mean) / (std + NORMALIZATION_EPS) for a in row)
                for row in batches[i].values
            )
            result[i] = replace(batches[i], values=scaled, mean=mean, std=std)
    return result
