"""
Algorithm family, training loop and evaluation.

Every algorithm is an objective graph. Baselines attach adversarial or diversity
objectives directly to base agents; the RPG variants move those objectives onto
manipulators and let each base agent train only against its manipulator.

Classes:
    AlgorithmKind: The ten algorithms.
    Mode: Exact utilities or sampled rollouts.
    Outcome: How a training run ended.
    AlgorithmSpec: Algorithm choice and its parameters.
    TrainingOptions: Everything `run_training` needs besides the algorithm.
    Checkpoint: Saved policies of one agent.
    ConvergenceMonitor: Sliding-window convergence test with cycling detection.
    MetricRow: One row of the metrics stream.
    TrainingResult: Outcome, policies, checkpoints and metrics of a run.
    CrossPlayGrid: Rewards of every ordered pair of checkpoints.
    AuditEntry: Rationality verdict of one policy.
    AuditReport: Verdicts of a set of checkpoints.

Functions:
    build_graph: Objective graph of an algorithm.
    ad_objective_value: Adversarial-diversity objective of a population.
    initial_policies: Starting policies of a run.
    save_checkpoint / load_checkpoint: Checkpoint files.
    run_training: Runs a step budget with checkpoints and convergence detection.
    crossplay_eval: Cross-play grid of checkpoints.
    sabotage_audit: Flags policies that are not a best response to anything.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import hograd
from .agents import PolicyParams, Role, init_policy
from .exceptions import ContractViolation, NumericalError
from .games import (
    PayoffGame,
    Phase,
    Seat,
    exact_utility,
    min_rational_utility,
    rationality_check,
    sample_batch,
)
from .handlers import get_document_handler
from .shaping import (
    AgentNode,
    CriticKey,
    Edge,
    LookaheadConfig,
    ObjectiveGraph,
    PolicyKey,
    exact_rpg_step,
    rpg_step,
    validate_graph,
)
from .utils import format_probs, stream_rng, total_variation, write_csv

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1
_TINY = 1e-300

VICTIM = "victim"
ADVERSARY = "adversary"
PROTAGONIST = "protagonist"
ANTAGONIST = "antagonist"
PLAYER = "player"


def manipulator_id(base_id: str) -> str:
    return f"{base_id}-manipulator"


def member_id(index: int) -> str:
    return f"member-{index}"


class AlgorithmKind(str, Enum):
    SP = "sp"
    AP = "ap"
    AT = "at"
    PAIRED = "paired"
    AD = "ad"
    AP_RPG = "ap-rpg"
    AT_RPG = "at-rpg"
    PAIRED_RPG = "paired-rpg"
    PAIRED_A_RPG = "paired-a-rpg"
    AD_RPG = "ad-rpg"

    @classmethod
    def parse(cls, text: Union[str, "AlgorithmKind"]) -> "AlgorithmKind":
        """Accepts `at-rpg`, `at_rpg` or `AT_RPG`."""
        if isinstance(text, cls):
            return text
        normalized = str(text).strip().lower().replace("_", "-")
        try:
            return cls(normalized)
        except ValueError:
            known = ", ".join(kind.value for kind in cls)
            raise ContractViolation(f"unknown algorithm '{text}' (known: {known})") from None

    @property
    def is_rpg(self) -> bool:
        return self.value.endswith("-rpg")

    @property
    def is_diversity(self) -> bool:
        return self in (AlgorithmKind.AD, AlgorithmKind.AD_RPG)

    @property
    def needs_victim(self) -> bool:
        return self in (AlgorithmKind.AP, AlgorithmKind.AP_RPG, AlgorithmKind.PAIRED_A_RPG)


class Mode(str, Enum):
    EXACT = "exact"
    SAMPLED = "sampled"


class Outcome(str, Enum):
    CONVERGED = "converged"
    BUDGET_EXHAUSTED = "budget-exhausted"
    DIVERGED = "diverged"


@dataclass(frozen=True)
class AlgorithmSpec:
    """Algorithm and its parameters.

    Attributes:
        kind (AlgorithmKind): Algorithm.
        population (int): Population size of the diversity algorithms.
        diversity_lambda (float): Weight of cross-play in the diversity objective.
        victim (Optional[str]): Checkpoint of the frozen victim (or protagonist).
        seed (int): Seed of the run.
        partnerplay (float): Partner-play weight of the RPG variants.
        sequential (bool): Train diversity members one after another.
    """

    kind: AlgorithmKind
    population: int = 2
    diversity_lambda: float = 0.25
    victim: Optional[str] = None
    seed: int = 0
    partnerplay: float = 0.0
    sequential: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", AlgorithmKind.parse(self.kind))
        if self.kind.needs_victim and not self.victim:
            raise ContractViolation(f"{self.kind.value} needs a victim checkpoint")
        if self.kind.is_diversity and self.population < 2:
            raise ContractViolation(f"{self.kind.value} needs a population of at least 2")
        if not 0.0 <= self.partnerplay <= 1.0:
            raise ContractViolation(f"partnerplay must lie in [0, 1], got {self.partnerplay}")
        if self.diversity_lambda < 0:
            raise ContractViolation("diversity_lambda must be non-negative")


def _node(
    agent_id, seats, trainable=True, role=Role.BASE, shapes=None, learns_in_lookahead=False
) -> AgentNode:
    return AgentNode(agent_id, role, trainable, tuple(seats), shapes, learns_in_lookahead)


def _shaping_edges(
    base: str,
    manipulator: str,
    partners: Sequence[str],
    epsilon: float,
    base_seat: Optional[Seat],
) -> List[Edge]:
    """Lookahead edge to the manipulator plus epsilon-weighted partner-play edges.

    `base_seat` is the seat the base agent plays; None means both seats.
    """
    def pair(other: str) -> Tuple[str, str]:
        return (other, base) if base_seat is Seat.COL else (base, other)

    averaged = base_seat is None
    edges = [Edge(base, pair(manipulator), 1.0 - epsilon, base, Phase.LOOKAHEAD, averaged)]
    if epsilon > 0 and partners:
        share = epsilon / len(partners)
        edges.extend(
            Edge(base, pair(partner), share, base, Phase.PARTNERPLAY, averaged)
            for partner in partners
        )
    return edges


def _self_play_graph(spec: AlgorithmSpec) -> ObjectiveGraph:
    nodes = (_node(PLAYER, (Seat.ROW, Seat.COL)),)
    edges = (Edge(PLAYER, (PLAYER, PLAYER), 1.0, PLAYER, Phase.EVALUATION),)
    return ObjectiveGraph(nodes, edges)


def _adversary_graph(spec: AlgorithmSpec, victim_trainable: bool) -> ObjectiveGraph:
    # a trained victim also takes the lookahead steps
    co_learning = victim_trainable and spec.kind.is_rpg
    nodes = [
        _node(VICTIM, (Seat.ROW,), victim_trainable, learns_in_lookahead=co_learning),
        _node(ADVERSARY, (Seat.COL,)),
    ]
    edges = []
    if victim_trainable:
        edges.append(Edge(VICTIM, (VICTIM, ADVERSARY), 1.0, VICTIM, Phase.EVALUATION))
    if not spec.kind.is_rpg:
        edges.append(Edge(ADVERSARY, (VICTIM, ADVERSARY), -1.0, VICTIM, Phase.EVALUATION))
    else:
        shaper = manipulator_id(ADVERSARY)
        nodes.append(_node(shaper, (Seat.ROW,), role=Role.MANIPULATOR, shapes=ADVERSARY))
        edges.extend(_shaping_edges(ADVERSARY, shaper, [VICTIM], spec.partnerplay, Seat.COL))
        edges.append(Edge(shaper, (VICTIM, ADVERSARY), -1.0, VICTIM, Phase.EVALUATION))
    return ObjectiveGraph(tuple(nodes), tuple(edges))


def _paired_graph(spec: AlgorithmSpec, protagonist_trainable: bool) -> ObjectiveGraph:
    nodes = [
        _node(PROTAGONIST, (Seat.ROW,), protagonist_trainable),
        _node(ANTAGONIST, (Seat.ROW,)),
        _node(ADVERSARY, (Seat.COL,)),
    ]
    edges = [Edge(ANTAGONIST, (ANTAGONIST, ADVERSARY), 1.0, ANTAGONIST, Phase.EVALUATION)]
    if protagonist_trainable:
        edges.insert(
            0, Edge(PROTAGONIST, (PROTAGONIST, ADVERSARY), 1.0, PROTAGONIST, Phase.EVALUATION)
        )
    regret = [
        ((ANTAGONIST, ADVERSARY), 1.0, ANTAGONIST),
        ((PROTAGONIST, ADVERSARY), -1.0, PROTAGONIST),
    ]
    if not spec.kind.is_rpg:
        edges.extend(Edge(ADVERSARY, p, w, r, Phase.EVALUATION) for p, w, r in regret)
    else:
        shaper = manipulator_id(ADVERSARY)
        nodes.append(_node(shaper, (Seat.ROW,), role=Role.MANIPULATOR, shapes=ADVERSARY))
        edges.extend(
            _shaping_edges(
                ADVERSARY, shaper, [PROTAGONIST, ANTAGONIST], spec.partnerplay, Seat.COL
            )
        )
        edges.extend(Edge(shaper, p, w, r, Phase.EVALUATION) for p, w, r in regret)
    return ObjectiveGraph(tuple(nodes), tuple(edges))


def _diversity_graph(spec: AlgorithmSpec, active_member: Optional[int]) -> ObjectiveGraph:
    both = (Seat.ROW, Seat.COL)
    present = spec.population if active_member is None else active_member + 1
    members = [member_id(i) for i in range(present)]
    cross = -spec.diversity_lambda / (present - 1) if present > 1 else 0.0
    nodes, edges = [], []
    for i, member in enumerate(members):
        trainable = active_member is None or i == active_member
        nodes.append(_node(member, both, trainable))
        if not trainable:
            continue
        others = [other for other in members if other != member]
        owner = member
        if spec.kind.is_rpg:
            owner = manipulator_id(member)
            nodes.append(_node(owner, both, role=Role.MANIPULATOR, shapes=member))
            edges.extend(_shaping_edges(member, owner, others, spec.partnerplay, None))
        edges.append(Edge(owner, (member, member), 1.0, member, Phase.EVALUATION))
        # cross-play appears in both members' terms of the population objective;
        # the mirrored edge is the other member's term, so each owner ascends
        # the full objective along its own parameters
        for other in others:
            edges.append(
                Edge(owner, (member, other), cross, member, Phase.EVALUATION, seat_averaged=True)
            )
            edges.append(
                Edge(owner, (other, member), cross, other, Phase.EVALUATION, seat_averaged=True)
            )
    return ObjectiveGraph(tuple(nodes), tuple(edges))


def build_graph(spec: AlgorithmSpec, active_member: Optional[int] = None) -> ObjectiveGraph:
    """Objective graph of `spec`.

    Args:
        spec (AlgorithmSpec): Algorithm.
        active_member (Optional[int]): For sequential diversity training, the
            member being trained; earlier members are frozen, later ones absent.

    Returns:
        ObjectiveGraph: Nodes and edges of the algorithm.

    Raises:
        ContractViolation: For an unknown algorithm.
    """
    kind = spec.kind
    if kind is AlgorithmKind.SP:
        return _self_play_graph(spec)
    elif kind in (AlgorithmKind.AP, AlgorithmKind.AP_RPG):
        return _adversary_graph(spec, victim_trainable=False)
    elif kind in (AlgorithmKind.AT, AlgorithmKind.AT_RPG):
        return _adversary_graph(spec, victim_trainable=True)
    elif kind in (AlgorithmKind.PAIRED, AlgorithmKind.PAIRED_RPG):
        return _paired_graph(spec, protagonist_trainable=True)
    elif kind is AlgorithmKind.PAIRED_A_RPG:
        return _paired_graph(spec, protagonist_trainable=False)
    elif kind.is_diversity:
        return _diversity_graph(spec, active_member)
    else:
        raise ContractViolation(f"Unsupported algorithm: {kind}")


def ad_objective_value(
    population: Sequence[Tuple[Sequence[float], Sequence[float]]],
    game: PayoffGame,
    diversity_lambda: float = 0.25,
) -> float:
    """Self-play minus weighted seat-averaged cross-play, summed over the population.

    Each member is a (row strategy, column strategy) pair.

    Raises:
        ContractViolation: If the game is not cooperative.
    """
    if not game.is_cooperative:
        raise ContractViolation(f"adversarial diversity needs a cooperative game, got {game.name}")
    m = len(population)
    total = 0.0
    for i, (p_i, q_i) in enumerate(population):
        total += exact_utility(game, p_i, q_i, Seat.ROW)
        if m < 2:
            continue
        cross = 0.0
        for j, (p_j, q_j) in enumerate(population):
            if j != i:
                cross += 0.5 * (
                    exact_utility(game, p_i, q_j, Seat.ROW)
                    + exact_utility(game, p_j, q_i, Seat.COL)
                )
        total -= diversity_lambda / (m - 1) * cross
    return float(total)


@dataclass(frozen=True)
class TrainingOptions:
    lookahead: LookaheadConfig = field(default_factory=LookaheadConfig)
    mode: Mode = Mode.EXACT
    batch_size: int = 128
    init_scale: float = 0.5
    checkpoint_interval: int = 500
    window: int = 200
    threshold: float = 0.01
    log_threshold: float = 0.05
    stop_on_convergence: bool = True


@dataclass(frozen=True)
class Checkpoint:
    """Policies of one agent at one step."""

    agent_id: str
    role: Role
    step: int
    policies: Dict[Seat, Tuple[float, ...]]
    path: Optional[str] = None

    @property
    def seats(self) -> Tuple[Seat, ...]:
        return tuple(sorted(self.policies))

    def strategy(self, seat: Seat) -> np.ndarray:
        if seat not in self.policies:
            raise ContractViolation(f"checkpoint of {self.agent_id} has no {Seat(seat).key} policy")
        z = np.asarray(self.policies[seat], dtype=float)
        z = np.exp(z - z.max())
        return z / z.sum()


def save_checkpoint(
    path: str, agent_id: str, role: Role, step: int, policies: Mapping[Seat, Sequence[float]]
) -> str:
    document = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "agent_id": agent_id,
        "role": Role(role).value,
        "step": int(step),
        "policies": {
            Seat(seat).key: [float(x) for x in logits]
            for seat, logits in sorted(policies.items())
        },
    }
    return get_document_handler("yaml").write(path, document)


def load_checkpoint(path: str) -> Checkpoint:
    """Reads a checkpoint file.

    Raises:
        ContractViolation: If the file is missing or malformed.
    """
    if not os.path.isfile(path):
        raise ContractViolation(f"checkpoint not found: {path}")
    document = get_document_handler("yaml").read(path)
    try:
        policies = {
            Seat[name.upper()]: tuple(float(x) for x in logits)
            for name, logits in document["policies"].items()
        }
        return Checkpoint(
            agent_id=str(document["agent_id"]),
            role=Role(document.get("role", Role.BASE.value)),
            step=int(document.get("step", 0)),
            policies=policies,
            path=path,
        )
    except (KeyError, ValueError, AttributeError, TypeError) as exc:
        raise ContractViolation(f"malformed checkpoint {path}: {exc}") from None


def checkpoint_dir(run_dir: str, step: int) -> str:
    return os.path.join(run_dir, "checkpoints", f"step-{step:06d}")


def write_checkpoints(
    run_dir: str, step: int, graph: ObjectiveGraph, policies: Mapping[PolicyKey, PolicyParams]
) -> List[str]:
    paths = []
    directory = checkpoint_dir(run_dir, step)
    for node in graph.nodes:
        logits = {
            seat: hograd.values_of(policies[(node.agent_id, seat)].logits) for seat in node.seats
        }
        path = os.path.join(directory, f"{node.agent_id}.yaml")
        paths.append(save_checkpoint(path, node.agent_id, node.role, step, logits))
    return paths


def _frozen_logits(path: str, game: PayoffGame, seat: Seat) -> Tuple[float, ...]:
    checkpoint = load_checkpoint(path)
    if seat not in checkpoint.policies:
        raise ContractViolation(f"checkpoint {path} has no {seat.key} policy")
    logits = checkpoint.policies[seat]
    if len(logits) != game.action_count(seat):
        raise ContractViolation(
            f"checkpoint/game shape mismatch: {path} has {len(logits)} {seat.key} actions, "
            f"{game.name} has {game.action_count(seat)}"
        )
    return logits


def _starts_from_victim(spec: AlgorithmSpec, node: AgentNode) -> bool:
    # frozen victims and protagonists, or a warm-started adversarial-training victim
    if not spec.victim or node.agent_id not in (VICTIM, PROTAGONIST):
        return False
    return not node.trainable or spec.kind in (AlgorithmKind.AT, AlgorithmKind.AT_RPG)


def initial_policies(
    spec: AlgorithmSpec, game: PayoffGame, options: TrainingOptions, seed: int
) -> Dict[PolicyKey, PolicyParams]:
    """Logits from N(0, init_scale^2) per (agent, seat); victims and frozen
    protagonists start from the victim checkpoint."""
    graph = build_graph(spec)
    optimizer = options.lookahead.optimizer
    policies = {}
    for node in graph.nodes:
        for seat in node.seats:
            rng = stream_rng(seed, 0, f"init:{node.agent_id}:{seat.key}")
            policy = init_policy(
                node.agent_id,
                node.role,
                seat,
                game.action_count(seat),
                rng,
                options.init_scale,
                optimizer,
                trainable=node.trainable,
            )
            if _starts_from_victim(spec, node) and seat is Seat.ROW:
                policy = policy.with_logits(_frozen_logits(spec.victim, game, seat))
            policies[policy.key] = policy
    return policies


class ConvergenceMonitor:
    """Convergence and cycling detection over the trainable distributions.

    A run has converged once, across the last `window` steps, every distribution
    moved less than `threshold` in total variation and no action probability
    changed by more than `log_threshold` in log space. The log test keeps a
    saturated run, whose minority actions are still drifting towards zero, from
    counting as settled.

    Two signs of cycling are tracked for `oscillating`. A switch is a change of
    dominant action, the argmax holding at least `dominance` of the mass. The
    winding of a distribution is the total-variation path it travelled divided
    by how far it ended from its start.

    Attributes:
        converged_step (Optional[int]): First step at which the test passed.
        switches (int): Dominant-action changes so far.
        drift (float): Largest log-probability change over the last window.
    """

    def __init__(
        self,
        window: int = 200,
        threshold: float = 0.01,
        log_threshold: float = 0.05,
        dominance: float = 0.6,
        winding_limit: float = 4.0,
    ) -> None:
        if window < 1:
            raise ContractViolation(f"convergence window must be positive, got {window}")
        if threshold <= 0 or log_threshold <= 0:
            raise ContractViolation("convergence thresholds must be positive")
        self.window = window
        self.threshold = threshold
        self.log_threshold = log_threshold
        self.dominance = dominance
        self.winding_limit = winding_limit
        self.history: List[List[np.ndarray]] = []
        self.converged_step: Optional[int] = None
        self.converged = False
        self.switches = 0
        self.drift = 0.0
        self._start: List[np.ndarray] = []
        self._paths: List[float] = []
        self._dominant: List[Optional[int]] = []

    def _track(self, current: List[np.ndarray]) -> None:
        if not self._start:
            self._start = current
            self._paths = [0.0] * len(current)
            self._dominant = [None] * len(current)
        else:
            previous = self.history[-1]
            for i, (old, new) in enumerate(zip(previous, current)):
                self._paths[i] += total_variation(old, new)
        for i, dist in enumerate(current):
            top = int(np.argmax(dist))
            if dist[top] < self.dominance:
                continue
            if self._dominant[i] is not None and self._dominant[i] != top:
                self.switches += 1
            self._dominant[i] = top

    @property
    def winding(self) -> float:
        """Largest path-to-displacement ratio among the distributions."""
        if not self.history:
            return 0.0
        ratios = [
            path / max(total_variation(start, last), self.threshold)
            for path, start, last in zip(self._paths, self._start, self.history[-1])
        ]
        return max(ratios, default=0.0)

    @property
    def oscillating(self) -> bool:
        if self.converged:
            return False
        return self.switches >= 2 or self.winding >= self.winding_limit

    def update(self, step: int, distributions: Sequence[np.ndarray]) -> bool:
        current = [np.asarray(d, dtype=float) for d in distributions]
        self._track(current)
        self.history.append(current)
        if len(self.history) > self.window + 1:
            self.history.pop(0)
        if len(self.history) < self.window + 1:
            self.converged = False
            return False
        pairs = list(zip(self.history[0], self.history[-1]))
        self.drift = max(
            (float(np.max(np.abs(_safe_log(new) - _safe_log(old)))) for old, new in pairs),
            default=0.0,
        )
        self.converged = self.drift < self.log_threshold and all(
            total_variation(old, new) < self.threshold for old, new in pairs
        )
        if self.converged and self.converged_step is None:
            self.converged_step = step
        return self.converged


def _safe_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, _TINY))


@dataclass(frozen=True)
class MetricRow:
    step: int
    agent: str
    edge: str
    reward_mean: float
    loss: float
    grad_norm: float
    probs: str

    HEADER = ("step", "agent", "edge", "reward_mean", "loss", "grad_norm", "probs")

    def as_row(self) -> Tuple:
        return (
            self.step,
            self.agent,
            self.edge,
            f"{self.reward_mean:.10g}",
            f"{self.loss:.10g}",
            f"{self.grad_norm:.10g}",
            self.probs,
        )


@dataclass
class TrainingResult:
    outcome: Outcome
    steps_run: int
    converged_step: Optional[int]
    policies: Dict[PolicyKey, PolicyParams]
    checkpoints: List[str] = field(default_factory=list)
    metrics: List[MetricRow] = field(default_factory=list)
    error: Optional[str] = None
    oscillating: bool = False
    switches: int = 0

    def probabilities(self, agent_id: str, seat: Seat) -> np.ndarray:
        return self.policies[(agent_id, seat)].probabilities()


def _trainable_distributions(graph: ObjectiveGraph, policies) -> List[np.ndarray]:
    return [
        policies[(node.agent_id, seat)].probabilities()
        for node in graph.nodes
        if node.trainable
        for seat in node.seats
    ]


def _all_finite(policies: Mapping[PolicyKey, PolicyParams]) -> bool:
    return all(
        math.isfinite(x) for policy in policies.values() for x in hograd.values_of(policy.logits)
    )


def _agent_probs(graph: ObjectiveGraph, policies, agent_id: str) -> str:
    node = graph.node(agent_id)
    return format_probs([policies[(agent_id, seat)].probabilities() for seat in sorted(node.seats)])


def run_training(
    spec: AlgorithmSpec,
    game: PayoffGame,
    options: TrainingOptions,
    steps: int,
    seed: Optional[int] = None,
    run_dir: Optional[str] = None,
) -> TrainingResult:
    """Trains `spec` on `game` for up to `steps` update steps.

    Args:
        spec (AlgorithmSpec): Algorithm.
        game (PayoffGame): Game.
        options (TrainingOptions): Step settings, mode and convergence test.
        steps (int): Step budget; sequential diversity training splits it evenly.
        seed (Optional[int]): Seed, defaults to `spec.seed`.
        run_dir (Optional[str]): Directory for checkpoints; none are written without it.

    Returns:
        TrainingResult: Outcome, final policies, checkpoint paths and metric rows.
        A non-finite gradient ends the run as `diverged` with the last checkpoint
        named in `error`.

    Raises:
        ContractViolation: If the graph is invalid or the game does not suit the algorithm.
    """
    if steps < 0:
        raise ContractViolation(f"step budget must be non-negative, got {steps}")
    seed = spec.seed if seed is None else seed
    if spec.kind.is_diversity and not game.is_cooperative:
        raise ContractViolation(f"{spec.kind.value} is only defined for cooperative games")

    full_graph = build_graph(spec)
    if spec.sequential and spec.kind.is_diversity:
        phases = [(build_graph(spec, i), steps // spec.population) for i in range(spec.population)]
    else:
        phases = [(full_graph, steps)]
    for graph, _ in phases:
        violations = validate_graph(graph)
        if violations:
            raise ContractViolation("invalid objective graph: " + "; ".join(violations))

    policies = initial_policies(spec, game, options, seed)
    result = TrainingResult(Outcome.BUDGET_EXHAUSTED, 0, None, policies)
    if run_dir:
        result.checkpoints.extend(write_checkpoints(run_dir, 0, full_graph, policies))

    critics: Dict[CriticKey, object] = {}
    step = 0
    phase_outcomes = []
    for graph, budget in phases:
        monitor = ConvergenceMonitor(options.window, options.threshold, options.log_threshold)
        monitor.update(step, _trainable_distributions(graph, policies))
        outcome = Outcome.BUDGET_EXHAUSTED
        for _ in range(budget):
            try:
                if options.mode is Mode.EXACT:
                    stepped = exact_rpg_step(graph, policies, options.lookahead, game)
                else:
                    stepped = rpg_step(
                        graph, policies, critics, options.lookahead, game,
                        options.batch_size, seed, step,
                    )
                if not _all_finite(stepped.policies):
                    raise NumericalError(f"policy logits became non-finite at step {step + 1}")
            except NumericalError as exc:
                exc.checkpoint = result.checkpoints[-1] if result.checkpoints else None
                logger.warning("run diverged at step %d: %s", step + 1, exc)
                result.outcome = Outcome.DIVERGED
                result.error = f"{exc} (last good checkpoint: {exc.checkpoint})"
                result.steps_run = step
                result.policies = policies
                return result
            policies, critics = stepped.policies, stepped.critics
            step += 1
            for metric in stepped.metrics:
                result.metrics.append(
                    MetricRow(
                        step,
                        metric.agent,
                        metric.edge,
                        metric.reward_mean,
                        metric.loss,
                        metric.grad_norm,
                        _agent_probs(graph, policies, metric.agent),
                    )
                )
            if run_dir and options.checkpoint_interval and step % options.checkpoint_interval == 0:
                result.checkpoints.extend(write_checkpoints(run_dir, step, full_graph, policies))
            if monitor.update(step, _trainable_distributions(graph, policies)):
                if options.stop_on_convergence:
                    break
        if monitor.converged_step is not None:
            result.converged_step = monitor.converged_step
        if monitor.converged:
            outcome = Outcome.CONVERGED
        result.switches += monitor.switches
        result.oscillating = result.oscillating or monitor.oscillating
        phase_outcomes.append(outcome)
        logger.info("phase finished after step %d: %s", step, outcome.value)

    result.steps_run = step
    result.policies = policies
    if phase_outcomes and all(o is Outcome.CONVERGED for o in phase_outcomes):
        result.outcome = Outcome.CONVERGED
    interval = options.checkpoint_interval
    if run_dir and step > 0 and not (interval and step % interval == 0):
        result.checkpoints.extend(write_checkpoints(run_dir, step, full_graph, policies))
    return result


@dataclass
class CrossPlayGrid:
    """Mean reward of the row label when paired with the column label.

    Attributes:
        labels (list): Checkpoint labels, one per row and column.
        values (np.ndarray): Reward of agent i averaged over the seatings both support.
        per_seat (dict): Reward of agent i when it plays the given seat; NaN if unsupported.
        episodes (int): Episodes per seating, 0 for exact utilities.
    """

    labels: List[str]
    values: np.ndarray
    per_seat: Dict[Seat, np.ndarray]
    episodes: int

    @property
    def self_play(self) -> float:
        return float(np.mean(np.diag(self.values)))

    @property
    def cross_play(self) -> float:
        n = len(self.labels)
        if n < 2:
            return float("nan")
        mask = ~np.eye(n, dtype=bool)
        return float(np.mean(self.values[mask]))

    def write_csv(self, path: str) -> str:
        rows = [
            [label] + [f"{v:.10g}" for v in row] for label, row in zip(self.labels, self.values)
        ]
        return write_csv(path, [""] + list(self.labels), rows)


def _check_shapes(checkpoint: Checkpoint, game: PayoffGame) -> None:
    for seat, logits in checkpoint.policies.items():
        if len(logits) != game.action_count(seat):
            raise ContractViolation(
                f"checkpoint/game shape mismatch: {checkpoint.agent_id} has {len(logits)} "
                f"{seat.key} actions, {game.name} has {game.action_count(seat)}"
            )


def crossplay_eval(
    checkpoints: Sequence[Checkpoint],
    game: PayoffGame,
    episodes: int = 0,
    seed: int = 0,
    labels: Optional[Sequence[str]] = None,
) -> CrossPlayGrid:
    """Fills the cross-play grid of `checkpoints`.

    Cell (i, j) is agent i's reward against agent j, averaged over the seatings
    both support: i as row against j as column, and j as row against i as column.

    Args:
        checkpoints (Sequence[Checkpoint]): Agents to evaluate.
        game (PayoffGame): Game.
        episodes (int): Monte-Carlo episodes per seating; 0 uses exact utilities.
        seed (int): Seed of the Monte-Carlo streams.
        labels (Optional[Sequence[str]]): Row and column labels, default agent ids.

    Raises:
        ContractViolation: On shape mismatches or pairs with no compatible seating.
    """
    if not checkpoints:
        raise ContractViolation("cross-play needs at least one checkpoint")
    labels = list(labels) if labels is not None else [c.agent_id for c in checkpoints]
    for checkpoint in checkpoints:
        _check_shapes(checkpoint, game)
    n = len(checkpoints)
    per_seat = {Seat.ROW: np.full((n, n), np.nan), Seat.COL: np.full((n, n), np.nan)}

    for i, first in enumerate(checkpoints):
        for j, second in enumerate(checkpoints):
            for seat in (Seat.ROW, Seat.COL):
                if seat not in first.policies or seat.other not in second.policies:
                    continue
                own, other = first.strategy(seat), second.strategy(seat.other)
                p, q = (own, other) if seat is Seat.ROW else (other, own)
                if episodes:
                    rng = stream_rng(seed, 0, f"crossplay:{i}:{j}:{seat.key}")
                    batch = sample_batch(game, p, q, rng, episodes)
                    value = np.mean([t.discounted_return([seat], game.discount) for t in batch])
                else:
                    value = exact_utility(game, p, q, seat)
                per_seat[seat][i, j] = value

    stacked = np.stack([per_seat[Seat.ROW], per_seat[Seat.COL]])
    if np.any(np.all(np.isnan(stacked), axis=0)):
        raise ContractViolation("cross-play pair without a compatible seating")
    values = np.nanmean(stacked, axis=0)
    return CrossPlayGrid(labels, values, per_seat, episodes)


@dataclass(frozen=True)
class AuditEntry:
    agent_id: str
    seat: Seat
    probabilities: Tuple[float, ...]
    rational: bool
    witness: Optional[Tuple[float, ...]]
    support: Tuple[int, ...]
    min_rational_utility: float

    def line(self, game: PayoffGame) -> str:
        own = game.labels(self.seat)
        support = "{" + ",".join(own[a] for a in self.support) + "}"
        prefix = f"{self.agent_id} ({self.seat.key}) plays {support}"
        if self.rational:
            other = game.labels(self.seat.other)
            witness = " ".join(f"{label}={w:.2f}" for label, w in zip(other, self.witness))
            verdict = f"rational, best response to [{witness}]"
        else:
            verdict = f"IRRATIONAL, no co-strategy makes {support} a best response"
        floor = f"min utility vs rational co-play {self.min_rational_utility:.4f}"
        return f"{prefix}: {verdict}; {floor}"


@dataclass
class AuditReport:
    game: PayoffGame
    entries: List[AuditEntry]

    @property
    def flagged(self) -> List[AuditEntry]:
        return [entry for entry in self.entries if not entry.rational]

    @property
    def lines(self) -> List[str]:
        return [entry.line(self.game) for entry in self.entries]


def sabotage_audit(
    checkpoints: Union[Checkpoint, Sequence[Checkpoint]],
    game: PayoffGame,
    delta: float = 0.01,
    support_tol: float = 0.05,
) -> AuditReport:
    """Checks every policy of `checkpoints` for rationality.

    Softmax policies never put exactly zero mass on an action, so actions below
    `support_tol` are not counted as played.

    Raises:
        OracleLimitError: If an opponent has more actions than the oracle searches.
    """
    if isinstance(checkpoints, Checkpoint):
        checkpoints = [checkpoints]
    entries = []
    for checkpoint in checkpoints:
        _check_shapes(checkpoint, game)
        for seat in checkpoint.seats:
            strategy = checkpoint.strategy(seat)
            verdict = rationality_check(game, strategy, seat, delta, support_tol=support_tol)
            entries.append(
                AuditEntry(
                    agent_id=checkpoint.agent_id,
                    seat=seat,
                    probabilities=tuple(float(x) for x in strategy),
                    rational=verdict.rational,
                    witness=verdict.witness,
                    support=verdict.support,
                    min_rational_utility=min_rational_utility(game, strategy, seat, delta),
                )
            )
    return AuditReport(game, entries)
