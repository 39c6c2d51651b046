"""
Objective graphs and the rational policy gradient update.

An objective graph lists agents and the weighted evaluation pairings each of them
optimizes. A base agent with a manipulator trains only against that manipulator
(plus optional partner-play), while the manipulator carries the agent's real
objective and optimizes it by differentiating through the base agent's lookahead
updates. Base agents therefore only ever learn best responses.

Classes:
    DiceMode: Advantage-weighted (loaded) or reward-weighted (raw) manipulator loss.
    AgentNode: An agent of the graph.
    Edge: One weighted objective term.
    ObjectiveGraph: Nodes and edges of an algorithm.
    LookaheadConfig: Learning rates and estimator settings of a step.
    EdgeMetric: Per-edge statistics of a step.
    StepResult: Updated policies, critics and metrics.

Functions:
    validate_graph: Lists violations of the graph invariants.
    base_loss: Policy-gradient surrogate of a base agent.
    manipulator_loss: DiCE objective of a manipulator.
    exact_manipulator_gradients: Shaping gradients from exact utilities.
    sampled_manipulator_gradients: Shaping gradients from rollouts.
    exact_rpg_step: One update step on exact utilities.
    rpg_step: One update step on sampled rollouts.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import hograd
from .agents import (
    AdvantageBatch,
    CriticParams,
    PolicyParams,
    Role,
    critic_update,
    entropy_bonus,
    gae_batch,
    normalize_advantages,
)
from .exceptions import ContractViolation, NumericalError
from .games import PayoffGame, Phase, Seat, Trajectory, exact_utility, sample_batch
from .utils import stream_rng

logger = logging.getLogger(__name__)

PolicyKey = Tuple[str, Seat]
Seating = Tuple[str, str]
CriticKey = Tuple[str, str, Tuple[Seat, ...]]


class DiceMode(str, Enum):
    RAW = "raw"
    LOADED = "loaded"


@dataclass(frozen=True)
class AgentNode:
    """An agent of an objective graph.

    Attributes:
        agent_id (str): Agent id.
        role (Role): Base agent or manipulator.
        trainable (bool): Frozen agents have no edges.
        seats (tuple): Seats the agent plays.
        shapes (Optional[str]): For a manipulator, the base agent it shapes.
        learns_in_lookahead (bool): An unshaped base agent that also takes the
            lookahead steps on its own edges, so manipulators see it adapt.
    """

    agent_id: str
    role: Role
    trainable: bool
    seats: Tuple[Seat, ...]
    shapes: Optional[str] = None
    learns_in_lookahead: bool = False


@dataclass(frozen=True)
class Edge:
    """A weighted objective term of one agent.

    The optimizing agent maximizes weight times the expected return of
    `reward_of` when `pair[0]` plays the row and `pair[1]` the column seat.
    A seat-averaged edge also plays the swapped seating and averages the two.
    """

    optimizer: str
    pair: Seating
    weight: float
    reward_of: str
    phase: Phase
    seat_averaged: bool = False

    @property
    def edge_id(self) -> str:
        return f"{self.optimizer}:{self.phase.value}:{self.pair[0]}x{self.pair[1]}@{self.reward_of}"

    def seatings(self) -> List[Tuple[Seating, float]]:
        row, col = self.pair
        if self.seat_averaged and row != col:
            return [((row, col), 0.5), ((col, row), 0.5)]
        return [((row, col), 1.0)]


def reward_seats(agent_id: str, seating: Seating) -> Tuple[Seat, ...]:
    """Seats `agent_id` occupies in `seating`; its reward is their mean."""
    seats = zip((Seat.ROW, Seat.COL), seating)
    return tuple(seat for seat, occupant in seats if occupant == agent_id)


@dataclass(frozen=True)
class ObjectiveGraph:
    nodes: Tuple[AgentNode, ...]
    edges: Tuple[Edge, ...]

    def node(self, agent_id: str) -> Optional[AgentNode]:
        for node in self.nodes:
            if node.agent_id == agent_id:
                return node
        return None

    def edges_of(self, agent_id: str) -> List[Edge]:
        return [edge for edge in self.edges if edge.optimizer == agent_id]

    def manipulator_of(self, base_id: str) -> Optional[AgentNode]:
        for node in self.nodes:
            if node.role is Role.MANIPULATOR and node.shapes == base_id:
                return node
        return None

    @property
    def bases(self) -> List[AgentNode]:
        return [node for node in self.nodes if node.role is Role.BASE]

    @property
    def manipulators(self) -> List[AgentNode]:
        return [node for node in self.nodes if node.role is Role.MANIPULATOR]

    @property
    def shaped_bases(self) -> List[AgentNode]:
        return [
            node
            for node in self.bases
            if node.trainable and self.manipulator_of(node.agent_id) is not None
        ]

    @property
    def lookahead_learners(self) -> List[AgentNode]:
        """Base agents updated inside the lookahead, in declaration order."""
        shaped = {node.agent_id for node in self.shaped_bases}
        return [
            node
            for node in self.bases
            if node.agent_id in shaped or (node.trainable and node.learns_in_lookahead)
        ]


@dataclass(frozen=True)
class LookaheadConfig:
    """Settings of one update step.

    The per-step discount is not a setting: sampled mode discounts with the
    game's own `discount`, the same value exact utilities use.

    Tabular logits need a lookahead that moves the shaped agent a few units
    (lookahead times `lr_base_lookahead` of about 4 or more) before the
    manipulator gradient sees its best response.
    """

    lookahead: int = 8
    lr_base_lookahead: float = 1.0
    lr_base: float = 0.01
    lr_manipulator: float = 0.1
    max_grad_norm: float = 0.5
    partnerplay: float = 0.0
    dice_lambda: float = 0.95
    dice_mode: DiceMode = DiceMode.LOADED
    gae_lambda: float = 0.95
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    critic_lr: float = 1.0
    optimizer: hograd.OptimizerKind = hograd.OptimizerKind.SGD
    per_partner_norm: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "dice_mode", DiceMode(self.dice_mode))
        object.__setattr__(self, "optimizer", hograd.OptimizerKind(self.optimizer))
        if int(self.lookahead) != self.lookahead or self.lookahead < 1:
            raise ContractViolation(f"lookahead must be a positive integer, got {self.lookahead}")
        for name in ("lr_base_lookahead", "lr_base", "lr_manipulator", "critic_lr"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 <= self.partnerplay <= 1.0:
            raise ContractViolation(f"partnerplay must lie in [0, 1], got {self.partnerplay}")
        for name in ("dice_lambda", "gae_lambda"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractViolation(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.max_grad_norm < 0:
            raise ContractViolation("max_grad_norm must be non-negative (0 disables clipping)")


@dataclass(frozen=True)
class EdgeMetric:
    agent: str
    edge: str
    reward_mean: float
    loss: float
    grad_norm: float


@dataclass
class StepResult:
    policies: Dict[PolicyKey, PolicyParams]
    critics: Dict[CriticKey, CriticParams] = field(default_factory=dict)
    metrics: List[EdgeMetric] = field(default_factory=list)


def validate_graph(graph: ObjectiveGraph) -> List[str]:
    """Checks the structural invariants of an objective graph.

    Returns:
        List[str]: One message per violation, empty for a valid graph.
    """
    findings: List[str] = []
    ids = [node.agent_id for node in graph.nodes]
    for agent_id in sorted({i for i in ids if ids.count(i) > 1}):
        findings.append(f"agent {agent_id} is declared more than once")

    for node in graph.nodes:
        edges = graph.edges_of(node.agent_id)
        if not node.trainable and edges:
            findings.append(f"frozen agent {node.agent_id} has outgoing edges")
        if node.trainable and not edges:
            findings.append(f"trainable agent {node.agent_id} has no outgoing edge")
        if node.role is Role.MANIPULATOR:
            base = graph.node(node.shapes) if node.shapes else None
            if base is None or base.role is not Role.BASE:
                findings.append(f"manipulator {node.agent_id} does not shape a base agent")
        if node.learns_in_lookahead and (
            node.role is not Role.BASE
            or not node.trainable
            or graph.manipulator_of(node.agent_id) is not None
        ):
            findings.append(
                f"agent {node.agent_id} learns in the lookahead but is not "
                "a trainable, unshaped base agent"
            )

    for base in graph.bases:
        shapers = [m for m in graph.manipulators if m.shapes == base.agent_id]
        if len(shapers) > 1:
            findings.append(f"base agent {base.agent_id} has more than one manipulator")

    for edge in graph.edges:
        owner = graph.node(edge.optimizer)
        if owner is None:
            findings.append(f"edge {edge.edge_id} is optimized by an unknown agent")
            continue
        members = [graph.node(agent_id) for agent_id in edge.pair]
        if any(member is None for member in members):
            findings.append(f"edge {edge.edge_id} references an unknown agent")
            continue
        if edge.reward_of not in edge.pair:
            findings.append(f"edge {edge.edge_id} rewards an agent outside its pairing")
        for (row, col), _ in edge.seatings():
            if Seat.ROW not in graph.node(row).seats or Seat.COL not in graph.node(col).seats:
                findings.append(f"edge {edge.edge_id} seats an agent in a seat it does not play")
                break
        if owner.role is Role.MANIPULATOR:
            if edge.phase is not Phase.EVALUATION:
                findings.append(
                    f"manipulator edge {edge.edge_id} targets a {edge.phase.value}-phase pairing"
                )
            if any(member.role is not Role.BASE for member in members):
                findings.append(f"manipulator edge {edge.edge_id} pairs a manipulator")
        elif edge.phase is Phase.LOOKAHEAD:
            manipulator = graph.manipulator_of(owner.agent_id)
            if manipulator is None or manipulator.agent_id not in edge.pair:
                findings.append(f"lookahead edge {edge.edge_id} is not paired with a manipulator")

    for base in graph.bases:
        manipulator = graph.manipulator_of(base.agent_id)
        if manipulator is None or not base.trainable:
            continue
        edges = graph.edges_of(base.agent_id)
        lookahead = [e for e in edges if e.phase is Phase.LOOKAHEAD]
        partner = [e for e in edges if e.phase is Phase.PARTNERPLAY]
        if len(lookahead) != 1:
            findings.append(
                f"base agent {base.agent_id} needs exactly one lookahead edge, has {len(lookahead)}"
            )
            continue
        if any(e.phase is Phase.EVALUATION for e in edges):
            findings.append(f"shaped base agent {base.agent_id} has an evaluation edge")
        epsilon = sum(e.weight for e in partner)
        if abs(lookahead[0].weight - (1.0 - epsilon)) > 1e-9:
            findings.append(
                f"base agent {base.agent_id}: lookahead weight {lookahead[0].weight} "
                f"is not 1 - partner-play weight {epsilon}"
            )
    return findings


def _advantage_rows(
    trajectories: Sequence[Trajectory],
    advantages: Union[AdvantageBatch, Sequence[AdvantageBatch], Sequence[Sequence[float]]],
) -> List[Tuple[float, ...]]:
    if isinstance(advantages, AdvantageBatch):
        rows = list(advantages.values)
    elif advantages and isinstance(advantages[0], AdvantageBatch):
        rows = [row for batch in advantages for row in batch.values]
    else:
        rows = [tuple(row) for row in advantages]
    if len(rows) != len(trajectories):
        raise ContractViolation(
            f"advantages missing: {len(rows)} rows for {len(trajectories)} trajectories"
        )
    for trajectory, row in zip(trajectories, rows):
        if len(row) != len(trajectory.steps):
            raise ContractViolation(f"advantages missing for trajectory {trajectory.episode_id}")
    return rows


def _phase_weights(trajectories: Sequence[Trajectory], epsilon: Optional[float]) -> List[float]:
    """Trajectory weights, rescaled to 1 - epsilon (lookahead) and epsilon (partner-play)."""
    weights = [t.weight for t in trajectories]
    if epsilon is None:
        return weights
    targets = {Phase.LOOKAHEAD: 1.0 - epsilon, Phase.PARTNERPLAY: epsilon}
    for phase, target in targets.items():
        mass = sum(w for w, t in zip(weights, trajectories) if t.phase is phase)
        if mass == 0:
            continue
        weights = [
            w * target / mass if t.phase is phase else w for w, t in zip(weights, trajectories)
        ]
    return weights


def _ref_key(ref: hograd.Scalar):
    return ref.node_id if hograd.is_tape_value(ref) else ("const", float(ref))


def _score_surrogate(
    agent_id: str,
    trajectories: Sequence[Trajectory],
    rows: Sequence[Sequence[float]],
    weights: Sequence[float],
    gamma: float,
) -> hograd.Scalar:
    # sum_e w_e sum_t gamma^t log pi(a_t) A_t, grouped by log-prob node
    coefficients: Dict[object, List] = {}
    for trajectory, row, weight in zip(trajectories, rows, weights):
        seats = [s for s in (Seat.ROW, Seat.COL) if trajectory.pairing[s - 1] == agent_id]
        if not seats:
            raise ContractViolation(
                f"trajectory {trajectory.episode_id} of {trajectory.pairing} excludes {agent_id}"
            )
        for t, (step, advantage) in enumerate(zip(trajectory.steps, row)):
            coefficient = weight * gamma**t * advantage
            for seat in seats:
                if seat not in step.log_probs:
                    raise ContractViolation(
                        f"trajectory {trajectory.episode_id} lacks log-probs for {agent_id}"
                    )
                ref = step.log_probs[seat]
                entry = coefficients.setdefault(_ref_key(ref), [ref, 0.0])
                entry[1] += coefficient
    return hograd.total([ref * c for ref, c in coefficients.values() if c != 0.0])


def _dice_surrogate(
    trajectories: Sequence[Trajectory],
    rows: Sequence[Sequence[float]],
    weights: Sequence[float],
    gamma: float,
    dice_lambda: float,
) -> hograd.Scalar:
    """sum_e w_e sum_t gamma^t box(dep_t) A_t with dep_t = sum_{t'<=t} lambda^(t-t') log-probs.

    Every log-prob reference attached to a step joins the dependency set.
    Trajectories sharing a dependency history share one magic-box node.
    """
    groups: Dict[object, List] = {}
    for trajectory, row, weight in zip(trajectories, rows, weights):
        history: Tuple = ()
        for t, (step, advantage) in enumerate(zip(trajectory.steps, row)):
            refs = tuple(step.log_probs[s] for s in sorted(step.log_probs))
            history = history + (tuple(_ref_key(r) for r in refs),)
            entry = groups.setdefault((trajectory.pairing, history), [trajectory, t, 0.0])
            entry[2] += weight * gamma**t * advantage

    terms = []
    for trajectory, t, coefficient in groups.values():
        if coefficient == 0.0:
            continue
        dependency: hograd.Scalar = 0.0
        for past in range(t + 1):
            step = trajectory.steps[past]
            step_sum = hograd.total([step.log_probs[s] for s in sorted(step.log_probs)])
            decay = dice_lambda ** (t - past)
            dependency = hograd.total([dependency, step_sum if decay == 1.0 else step_sum * decay])
        terms.append(hograd.magic_box(dependency) * coefficient)
    return hograd.total(terms)


def base_loss(
    agent: Union[PolicyParams, Sequence[PolicyParams]],
    trajectories: Sequence[Trajectory],
    advantages: Union[AdvantageBatch, Sequence[AdvantageBatch], Sequence[Sequence[float]]],
    epsilon: Optional[float] = None,
    entropy_coef: float = 0.0,
    gamma: float = 1.0,
    magic: bool = False,
    dice_lambda: float = 1.0,
) -> hograd.Scalar:
    """Surrogate objective of a base agent, to be maximized.

    The plain form is sum_e w_e sum_t gamma^t log pi(a_t) A_t and only depends on
    the agent's own logits. The magic form replaces log pi(a_t) by a magic box over
    every attached log-prob up to t, so that its gradient stays a function of the
    co-players' parameters (used for on-tape lookahead).

    Args:
        agent: The agent's policy, or its policies for every seat it plays.
        trajectories (Sequence[Trajectory]): Rollouts including the agent.
        advantages: Per-trajectory per-step advantages, aligned with `trajectories`.
        epsilon (Optional[float]): If given, lookahead-phase weights are rescaled to
            total 1 - epsilon and partner-play weights to epsilon.
        entropy_coef (float): Weight of the entropy bonus.
        gamma (float): Discount of the per-step terms.
        magic (bool): Use the magic-box form.
        dice_lambda (float): Dependency decay of the magic-box form.

    Returns:
        float or TapeValue: The objective.

    Raises:
        ContractViolation: If advantages are missing or a trajectory excludes the agent.
    """
    policies = [agent] if isinstance(agent, PolicyParams) else list(agent)
    agent_id = policies[0].agent_id
    rows = _advantage_rows(trajectories, advantages)
    weights = _phase_weights(trajectories, epsilon)
    for trajectory in trajectories:
        if agent_id not in trajectory.pairing:
            raise ContractViolation(
                f"trajectory {trajectory.episode_id} of {trajectory.pairing} excludes {agent_id}"
            )
    if magic:
        objective = _dice_surrogate(trajectories, rows, weights, gamma, dice_lambda)
    else:
        objective = _score_surrogate(agent_id, trajectories, rows, weights, gamma)
    if entropy_coef:
        bonus = hograd.total([entropy_bonus(p) for p in policies])
        objective = hograd.total([objective, bonus * entropy_coef])
    return objective


def manipulator_loss(
    manipulator_id: str,
    edges: Sequence[Edge],
    evaluation: Mapping[Seating, Sequence[Trajectory]],
    advantages: Mapping[Tuple[str, Seating], Sequence[Sequence[float]]],
    dice_lambda: float,
    gamma: float = 1.0,
) -> hograd.Scalar:
    """DiCE objective of a manipulator over shared evaluation rollouts.

    Args:
        manipulator_id (str): The manipulator.
        edges (Sequence[Edge]): Its evaluation edges.
        evaluation (Mapping): Trajectories per seating, sampled from the
            lookahead-updated base agents with their log-probs attached.
        advantages (Mapping): Per (edge id, seating) rows of per-step advantages.
        dice_lambda (float): Dependency decay.
        gamma (float): Discount of the per-step terms.

    Returns:
        float or TapeValue: Objective whose forward value equals the weighted
        advantage sum and whose gradient is the higher-order shaping gradient.

    Raises:
        ContractViolation: On foreign edges or missing rollouts.
        StaleDependencyError: If the rollouts' tape was already released.
    """
    trajectories: List[Trajectory] = []
    rows: List[Sequence[float]] = []
    for edge in edges:
        if edge.optimizer != manipulator_id or edge.phase is not Phase.EVALUATION:
            raise ContractViolation(
                f"edge {edge.edge_id} is not an evaluation edge of {manipulator_id}"
            )
        if edge.weight == 0:
            continue
        for seating, share in edge.seatings():
            batch = evaluation.get(seating)
            if not batch:
                raise ContractViolation(f"no evaluation rollouts for seating {seating}")
            weight = edge.weight * share / len(batch)
            trajectories.extend(replace(t, weight=weight) for t in batch)
            rows.extend(advantages[(edge.edge_id, seating)])
    if not trajectories:
        return 0.0
    rows = _advantage_rows(trajectories, rows)
    return _dice_surrogate(trajectories, rows, [t.weight for t in trajectories], gamma, dice_lambda)


class _PolicyView:
    """Probabilities and log-probabilities of a set of logits, computed once per key."""

    def __init__(self, logits: Mapping[PolicyKey, Sequence[hograd.Scalar]]) -> None:
        self._logits = logits
        self._probs: Dict[PolicyKey, List[hograd.Scalar]] = {}
        self._log_probs: Dict[PolicyKey, List[hograd.Scalar]] = {}

    def _logits_of(self, key: PolicyKey) -> Sequence[hograd.Scalar]:
        if key not in self._logits:
            raise ContractViolation(
                f"edge cannot be evaluated: no policy for {key[0]} as {key[1].key}"
            )
        return self._logits[key]

    def probs(self, key: PolicyKey) -> List[hograd.Scalar]:
        if key not in self._probs:
            self._probs[key] = hograd.softmax(self._logits_of(key))
        return self._probs[key]

    def log_probs(self, key: PolicyKey) -> List[hograd.Scalar]:
        if key not in self._log_probs:
            self._log_probs[key] = hograd.log_softmax(self._logits_of(key))
        return self._log_probs[key]


def _seating_utility(
    game: PayoffGame, view: _PolicyView, agent_id: str, seating: Seating
) -> hograd.Scalar:
    row, col = seating
    p = view.probs((row, Seat.ROW))
    q = view.probs((col, Seat.COL))
    seats = reward_seats(agent_id, seating)
    values = [exact_utility(game, p, q, seat) for seat in seats]
    total = hograd.total(values)
    return total * (1.0 / len(values)) if len(values) > 1 else total


def _edge_value(game: PayoffGame, view: _PolicyView, edge: Edge) -> hograd.Scalar:
    terms = []
    for seating, share in edge.seatings():
        value = _seating_utility(game, view, edge.reward_of, seating)
        terms.append(value * share if share != 1.0 else value)
    return hograd.total(terms)


def _exact_objective(
    game: PayoffGame, view: _PolicyView, edges: Sequence[Edge]
) -> Tuple[hograd.Scalar, List[Tuple[Edge, float]]]:
    terms = []
    values = []
    for edge in edges:
        if edge.weight == 0:
            continue
        value = _edge_value(game, view, edge)
        values.append((edge, hograd.value_of(value)))
        terms.append(value * edge.weight if edge.weight != 1.0 else value)
    return hograd.total(terms), values


def _gradient(
    objective: hograd.Scalar, wrt: Sequence[hograd.Scalar], create_graph: bool = False
) -> List[hograd.Scalar]:
    if not hograd.is_tape_value(objective):
        return [0.0] * len(wrt)
    return hograd.tape_backward(objective, wrt, create_graph=create_graph).grads


def _keys(node: AgentNode) -> List[PolicyKey]:
    return [(node.agent_id, seat) for seat in sorted(node.seats)]


def _flat(logits: Mapping[PolicyKey, Sequence[hograd.Scalar]], keys: Sequence[PolicyKey]):
    return [x for key in keys for x in logits[key]]


def _split(values: Sequence, logits: Mapping[PolicyKey, Sequence], keys: Sequence[PolicyKey]):
    parts = {}
    offset = 0
    for key in keys:
        size = len(logits[key])
        parts[key] = list(values[offset : offset + size])
        offset += size
    return parts


def _entropy(node: AgentNode, policies: Mapping[PolicyKey, PolicyParams], logits) -> hograd.Scalar:
    return hograd.total(
        [entropy_bonus(policies[key].with_logits(logits[key])) for key in _keys(node)]
    )


def _require_policies(graph: ObjectiveGraph, policies: Mapping[PolicyKey, PolicyParams]) -> None:
    for node in graph.nodes:
        for key in _keys(node):
            if key not in policies:
                raise ContractViolation(f"no policy for {node.agent_id} as {key[1].key}")


def _check_finite(values: Sequence[float], edges: Sequence[Edge], agent_id: str) -> None:
    if all(math.isfinite(v) for v in values):
        return
    edge_id = ", ".join(e.edge_id for e in edges) or agent_id
    raise NumericalError(f"non-finite gradient for {agent_id} on edge {edge_id}", edge=edge_id)


def _clip(grads: Sequence[float], max_norm: float) -> Tuple[List[float], float]:
    norm = float(np.sqrt(sum(g * g for g in grads)))
    if max_norm > 0 and norm > max_norm:
        return [g * max_norm / norm for g in grads], norm
    return list(grads), norm


def _step_agent(
    node: AgentNode,
    policies: Dict[PolicyKey, PolicyParams],
    grads: Sequence[float],
    lr: float,
) -> None:
    logits = {key: policies[key].logits for key in _keys(node)}
    for key, part in _split(grads, logits, _keys(node)).items():
        policy = policies[key]
        new_logits, state = hograd.optimizer_step(
            list(policy.logits), part, policy.optimizer_state, lr
        )
        policies[key] = policy.with_logits(hograd.values_of(new_logits), state.detached())


@dataclass
class _ManipulatorGradient:
    node: AgentNode
    grads: List[float]
    edge_values: List[Tuple[Edge, float, float]]  # edge, reward mean, loss


def _lookahead_step(
    node: AgentNode,
    objective: hograd.Scalar,
    current: Dict[PolicyKey, List[hograd.Scalar]],
    states: Dict[PolicyKey, hograd.DifferentiableOptimizerState],
    lr: float,
) -> Dict[PolicyKey, List[hograd.Scalar]]:
    keys = _keys(node)
    grads = _gradient(objective, _flat(current, keys), create_graph=True)
    updated = {}
    for key, part in _split(grads, current, keys).items():
        updated[key], states[key] = hograd.optimizer_step(current[key], part, states[key], lr)
    return updated


def _exact_shaping_pass(
    graph: ObjectiveGraph,
    policies: Mapping[PolicyKey, PolicyParams],
    config: LookaheadConfig,
    game: PayoffGame,
    tape: hograd.Tape,
) -> List[_ManipulatorGradient]:
    if not any(node.trainable for node in graph.manipulators):
        return []
    bound = {key: policy.bind(tape) for key, policy in policies.items()}
    current = {key: list(policy.logits) for key, policy in bound.items()}
    states = {key: policy.optimizer_state for key, policy in bound.items()}

    for _ in range(config.lookahead):
        view = _PolicyView(current)
        updates = {}
        for node in graph.lookahead_learners:
            objective, _ = _exact_objective(game, view, graph.edges_of(node.agent_id))
            if config.entropy_coef:
                objective = objective + _entropy(node, bound, current) * config.entropy_coef
            updates.update(
                _lookahead_step(node, objective, current, states, config.lr_base_lookahead)
            )
        current.update(updates)

    view = _PolicyView(current)
    results = []
    for node in graph.manipulators:
        if not node.trainable:
            continue
        edges = graph.edges_of(node.agent_id)
        objective, values = _exact_objective(game, view, edges)
        leaves = _flat({key: bound[key].logits for key in _keys(node)}, _keys(node))
        grads = [hograd.value_of(g) for g in _gradient(objective, leaves)]
        edge_values = [(edge, value, edge.weight * value) for edge, value in values]
        results.append(_ManipulatorGradient(node, grads, edge_values))
    return results


def exact_manipulator_gradients(
    graph: ObjectiveGraph,
    policies: Mapping[PolicyKey, PolicyParams],
    config: LookaheadConfig,
    game: PayoffGame,
) -> Dict[str, List[float]]:
    """Unclipped higher-order gradients of every manipulator, on exact utilities."""
    _require_policies(graph, policies)
    tape = hograd.Tape()
    try:
        passes = _exact_shaping_pass(graph, policies, config, game, tape)
    finally:
        tape.release()
    return {result.node.agent_id: result.grads for result in passes}


def _apply_manipulator_updates(
    passes: Sequence[_ManipulatorGradient],
    policies: Dict[PolicyKey, PolicyParams],
    graph: ObjectiveGraph,
    config: LookaheadConfig,
) -> List[EdgeMetric]:
    metrics = []
    for result in passes:
        agent_id = result.node.agent_id
        _check_finite(result.grads, graph.edges_of(agent_id), agent_id)
        clipped, norm = _clip(result.grads, config.max_grad_norm)
        _step_agent(result.node, policies, clipped, config.lr_manipulator)
        for edge, reward, loss in result.edge_values:
            metrics.append(EdgeMetric(agent_id, edge.edge_id, reward, loss, norm))
    return metrics


def exact_rpg_step(
    graph: ObjectiveGraph,
    policies: Mapping[PolicyKey, PolicyParams],
    config: LookaheadConfig,
    game: PayoffGame,
) -> StepResult:
    """One update step on exact expected utilities.

    Shaped base agents take `config.lookahead` differentiable ascent steps against
    their manipulators, together with any base agent flagged
    `learns_in_lookahead`, which ascends its own edges against the lookahead
    policies; each manipulator ascends its objective evaluated at the
    lookahead parameters, clipped to `config.max_grad_norm`; finally every
    trainable base agent takes one step from its original parameters against
    the updated manipulators.

    Raises:
        ContractViolation: If a policy an edge needs is missing.
        NumericalError: If a gradient is not finite; names the edge.
    """
    _require_policies(graph, policies)
    new_policies = dict(policies)

    tape = hograd.Tape()
    try:
        passes = _exact_shaping_pass(graph, policies, config, game, tape)
    finally:
        tape.release()
    metrics = _apply_manipulator_updates(passes, new_policies, graph, config)

    tape = hograd.Tape()
    try:
        bound = {key: policy.bind(tape) for key, policy in new_policies.items()}
        logits = {key: list(policy.logits) for key, policy in bound.items()}
        view = _PolicyView(logits)
        updates = []
        for node in graph.bases:
            if not node.trainable:
                continue
            edges = graph.edges_of(node.agent_id)
            objective, values = _exact_objective(game, view, edges)
            if config.entropy_coef:
                objective = objective + _entropy(node, bound, logits) * config.entropy_coef
            grads = [hograd.value_of(g) for g in _gradient(objective, _flat(logits, _keys(node)))]
            updates.append((node, grads, values))
    finally:
        tape.release()

    for node, grads, values in updates:
        _check_finite(grads, graph.edges_of(node.agent_id), node.agent_id)
        norm = float(np.sqrt(sum(g * g for g in grads)))
        _step_agent(node, new_policies, grads, config.lr_base)
        for edge, value in values:
            loss = edge.weight * value
            metrics.append(EdgeMetric(node.agent_id, edge.edge_id, value, loss, norm))
    return StepResult(new_policies, {}, metrics)


class _Rollouts:
    """Samples batches and collects the data each critic is trained on."""

    def __init__(
        self,
        game: PayoffGame,
        critics: Mapping[CriticKey, CriticParams],
        config: LookaheadConfig,
        batch_size: int,
        seed: int,
        step: int,
    ) -> None:
        self.game = game
        self.gamma = game.discount
        self.critics = critics
        self.config = config
        self.batch_size = batch_size
        self.seed = seed
        self.step = step
        self.critic_data: Dict[CriticKey, List[Trajectory]] = {}
        self._fitted: set = set()

    def sample(
        self, view: _PolicyView, seating: Seating, phase: Phase, label: str
    ) -> List[Trajectory]:
        row, col = seating
        row_lp = view.log_probs((row, Seat.ROW))
        col_lp = view.log_probs((col, Seat.COL))
        p = [math.exp(v) for v in hograd.values_of(row_lp)]
        q = [math.exp(v) for v in hograd.values_of(col_lp)]
        total_p, total_q = sum(p), sum(q)
        rng = stream_rng(self.seed, self.step, f"{label}:{row}x{col}")
        return sample_batch(
            self.game,
            [x / total_p for x in p],
            [x / total_q for x in q],
            rng,
            self.batch_size,
            pairing=seating,
            phase=phase,
            log_probs={Seat.ROW: row_lp, Seat.COL: col_lp},
        )

    def critic(self, seating: Seating, seats: Tuple[Seat, ...]) -> CriticParams:
        key = (seating[0], seating[1], seats)
        if key not in self.critics:
            return CriticParams.zeros(seating, seats, self.game.horizon, self.config.critic_lr)
        return self.critics[key]

    def advantages(
        self, batch: Sequence[Trajectory], seating: Seating, agent_id: str, owner: str
    ) -> AdvantageBatch:
        seats = reward_seats(agent_id, seating)
        critic = self.critic(seating, seats)
        # shared evaluation batches are reweighted copies; fit each critic on them once
        marker = (critic.key, id(batch[0].steps))
        if marker not in self._fitted:
            self._fitted.add(marker)
            self.critic_data.setdefault(critic.key, []).extend(batch)
        if self.config.dice_mode is DiceMode.RAW:
            rows = tuple(tuple(t.rewards(seats)) for t in batch)
            return AdvantageBatch(owner=owner, pairing=seating, values=rows)
        return gae_batch(batch, critic, self.gamma, self.config.gae_lambda, owner)

    def normalize(self, batches: List[AdvantageBatch]) -> List[AdvantageBatch]:
        if self.config.dice_mode is DiceMode.RAW or not batches:
            return batches
        return normalize_advantages(batches, pooled=not self.config.per_partner_norm)

    def updated_critics(self) -> Dict[CriticKey, CriticParams]:
        critics = dict(self.critics)
        for key, trajectories in self.critic_data.items():
            critic = critics.get(key) or CriticParams.zeros(
                key[:2], key[2], self.game.horizon, self.config.critic_lr
            )
            critics[key], _ = critic_update(
                critic, trajectories, self.gamma, self.config.value_coef
            )
        return critics


def _edge_batches(
    rollouts: _Rollouts,
    view: _PolicyView,
    edges: Sequence[Edge],
    owner: str,
    label: str,
    shared: Optional[Dict[Seating, List[Trajectory]]] = None,
) -> List[Tuple[Edge, Seating, List[Trajectory], AdvantageBatch]]:
    """Rollouts and normalized advantages for every nonzero edge and seating."""
    entries = []
    for edge in edges:
        if edge.weight == 0:
            continue
        for seating, share in edge.seatings():
            if shared is not None:
                if seating not in shared:
                    shared[seating] = rollouts.sample(view, seating, edge.phase, "evaluation")
                batch = shared[seating]
            else:
                batch = rollouts.sample(view, seating, edge.phase, f"{label}:{edge.edge_id}")
            weight = edge.weight * share / len(batch)
            batch = [replace(t, weight=weight) for t in batch]
            advantages = rollouts.advantages(batch, seating, edge.reward_of, owner)
            entries.append((edge, seating, batch, advantages))
    normalized = rollouts.normalize([entry[3] for entry in entries])
    return [(e, s, b, a) for (e, s, b, _), a in zip(entries, normalized)]


def _edge_metrics(
    entries: Sequence[Tuple[Edge, Seating, List[Trajectory], AdvantageBatch]], gamma: float
) -> List[Tuple[Edge, float, float]]:
    summary: Dict[str, List] = {}
    for edge, seating, batch, advantages in entries:
        seats = reward_seats(edge.reward_of, seating)
        share = dict(edge.seatings())[seating]
        reward = share * float(np.mean([np.mean(t.rewards(seats)) for t in batch]))
        loss = sum(
            t.weight * sum(gamma**k * a for k, a in enumerate(row))
            for t, row in zip(batch, advantages.values)
        )
        entry = summary.setdefault(edge.edge_id, [edge, 0.0, 0.0])
        entry[1] += reward
        entry[2] += loss
    return [tuple(entry) for entry in summary.values()]


def _sampled_shaping_pass(
    graph: ObjectiveGraph,
    policies: Mapping[PolicyKey, PolicyParams],
    rollouts: _Rollouts,
    tape: hograd.Tape,
) -> List[_ManipulatorGradient]:
    config = rollouts.config
    if not any(node.trainable for node in graph.manipulators):
        return []
    bound = {key: policy.bind(tape) for key, policy in policies.items()}
    current = {key: list(policy.logits) for key, policy in bound.items()}
    states = {key: policy.optimizer_state for key, policy in bound.items()}

    for iteration in range(config.lookahead):
        view = _PolicyView(current)
        updates = {}
        for node in graph.lookahead_learners:
            entries = _edge_batches(
                rollouts, view, graph.edges_of(node.agent_id), node.agent_id,
                f"lookahead:{iteration}:{node.agent_id}",
            )
            objective = base_loss(
                [bound[key].with_logits(current[key]) for key in _keys(node)],
                [t for entry in entries for t in entry[2]],
                [entry[3] for entry in entries],
                entropy_coef=config.entropy_coef,
                gamma=rollouts.gamma,
                magic=True,
                dice_lambda=config.dice_lambda,
            )
            updates.update(
                _lookahead_step(node, objective, current, states, config.lr_base_lookahead)
            )
        current.update(updates)

    view = _PolicyView(current)
    shared: Dict[Seating, List[Trajectory]] = {}
    dice_lambda = 1.0 if config.dice_mode is DiceMode.RAW else config.dice_lambda
    results = []
    for node in graph.manipulators:
        if not node.trainable:
            continue
        edges = graph.edges_of(node.agent_id)
        entries = _edge_batches(rollouts, view, edges, node.agent_id, "evaluation", shared)
        objective = manipulator_loss(
            node.agent_id,
            edges,
            shared,
            {(edge.edge_id, seating): adv.values for edge, seating, _, adv in entries},
            dice_lambda,
            rollouts.gamma,
        )
        leaves = _flat({key: bound[key].logits for key in _keys(node)}, _keys(node))
        grads = [hograd.value_of(g) for g in _gradient(objective, leaves)]
        results.append(_ManipulatorGradient(node, grads, _edge_metrics(entries, rollouts.gamma)))
    return results


def sampled_manipulator_gradients(
    graph: ObjectiveGraph,
    policies: Mapping[PolicyKey, PolicyParams],
    critics: Mapping[CriticKey, CriticParams],
    config: LookaheadConfig,
    game: PayoffGame,
    batch_size: int,
    seed: int,
    step: int = 0,
) -> Dict[str, List[float]]:
    """Unclipped DiCE estimates of every manipulator's shaping gradient."""
    _require_policies(graph, policies)
    rollouts = _Rollouts(game, critics, config, batch_size, seed, step)
    tape = hograd.Tape()
    try:
        passes = _sampled_shaping_pass(graph, policies, rollouts, tape)
    finally:
        tape.release()
    return {result.node.agent_id: result.grads for result in passes}


def rpg_step(
    graph: ObjectiveGraph,
    policies: Mapping[PolicyKey, PolicyParams],
    critics: Mapping[CriticKey, CriticParams],
    config: LookaheadConfig,
    game: PayoffGame,
    batch_size: int,
    seed: int,
    step: int = 0,
) -> StepResult:
    """One update step on sampled rollouts.

    Follows the control flow of `exact_rpg_step`. Lookahead updates use the
    magic-box surrogate so they remain differentiable in the manipulators;
    manipulators share one evaluation batch per seating; the final base update
    uses the plain surrogate on fresh rollouts; critics are fitted last.

    Args:
        graph (ObjectiveGraph): Validated objective graph.
        policies (Mapping): Policy per (agent id, seat).
        critics (Mapping): Critic per (row agent, column agent, reward seats).
        config (LookaheadConfig): Step settings.
        game (PayoffGame): The game.
        batch_size (int): Episodes per seating and edge.
        seed (int): Root seed of the run.
        step (int): Step counter, keys the random streams.

    Returns:
        StepResult: Updated policies and critics plus per-edge metrics.

    Raises:
        NumericalError: If a gradient is not finite; names the edge.
    """
    if batch_size < 1:
        raise ContractViolation(f"batch size must be positive, got {batch_size}")
    _require_policies(graph, policies)
    new_policies = dict(policies)
    rollouts = _Rollouts(game, critics, config, batch_size, seed, step)

    tape = hograd.Tape()
    try:
        passes = _sampled_shaping_pass(graph, policies, rollouts, tape)
    finally:
        tape.release()
    metrics = _apply_manipulator_updates(passes, new_policies, graph, config)

    tape = hograd.Tape()
    try:
        bound = {key: policy.bind(tape) for key, policy in new_policies.items()}
        view = _PolicyView({key: list(policy.logits) for key, policy in bound.items()})
        updates = []
        for node in graph.bases:
            if not node.trainable:
                continue
            entries = _edge_batches(
                rollouts, view, graph.edges_of(node.agent_id), node.agent_id,
                f"update:{node.agent_id}",
            )
            objective = base_loss(
                [bound[key] for key in _keys(node)],
                [t for entry in entries for t in entry[2]],
                [entry[3] for entry in entries],
                entropy_coef=config.entropy_coef,
                gamma=rollouts.gamma,
            )
            leaves = _flat({key: bound[key].logits for key in _keys(node)}, _keys(node))
            grads = [hograd.value_of(g) for g in _gradient(objective, leaves)]
            updates.append((node, grads, _edge_metrics(entries, rollouts.gamma)))
    finally:
        tape.release()

    for node, grads, edge_values in updates:
        _check_finite(grads, graph.edges_of(node.agent_id), node.agent_id)
        norm = float(np.sqrt(sum(g * g for g in grads)))
        _step_agent(node, new_policies, grads, config.lr_base)
        for edge, reward, loss in edge_values:
            metrics.append(EdgeMetric(node.agent_id, edge.edge_id, reward, loss, norm))
    return StepResult(new_policies, rollouts.updated_critics(), metrics)
