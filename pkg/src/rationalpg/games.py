"""
Two-player normal-form and iterated matrix games.

This module holds the payoff games training runs are played on, their exact
expected utilities (differentiable when strategies are tape values), rollouts,
and the best-response and rationality oracles used by audits and checks.

Classes:
    Seat: The row and column seat of a game.
    Phase: Purpose a trajectory was sampled for.
    PayoffGame: Payoff matrices, horizon and discount.
    RationalityVerdict: Result of a rationality check.
    Step: One joint action of a trajectory.
    Trajectory: One sampled episode.

Functions:
    get_game: Looks up a built-in game by name.
    load_game: Reads a game definition document from disk.
    resolve_game: Built-in name or file path.
    exact_utility: Expected discounted return of a seat.
    best_response_set: Pure best responses to an opponent strategy.
    rationality_check: Grid search for a co-strategy that justifies a strategy.
    support_enumeration_check: Independent rationality oracle over support faces.
    min_rational_utility: Worst utility against any rational co-strategy.
    sample_episode: Rolls out one episode.
    sample_batch: Rolls out a batch of episodes.

Example:
    game = get_game("fig2_coop")
    exact_utility(game, [1.0, 0.0], [1.0, 0.0, 0.0], Seat.ROW)  # 1.0
"""

import functools
import itertools
import logging
import string
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Any, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import hograd
from .exceptions import ContractViolation, OracleLimitError
from .handlers import handler_for_path

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9
BEST_RESPONSE_TOL = 1e-9
MAX_ORACLE_ACTIONS = 4


class Seat(IntEnum):
    ROW = 1
    COL = 2

    @property
    def other(self) -> "Seat":
        return Seat.COL if self is Seat.ROW else Seat.ROW

    @property
    def key(self) -> str:
        return self.name.lower()


class Phase(str, Enum):
    LOOKAHEAD = "lookahead"
    EVALUATION = "evaluation"
    PARTNERPLAY = "partnerplay"


def _default_labels(start: int, count: int) -> Tuple[str, ...]:
    return tuple(string.ascii_uppercase[(start + i) % 26] for i in range(count))


@dataclass(frozen=True, eq=False)
class PayoffGame:
    """A two-player general-sum game, optionally repeated for `horizon` steps.

    Policies are memoryless, so the expected return of an iterated game is the
    one-shot utility scaled by the discount mass sum_{t<T} discount^t.

    Attributes:
        name (str): Game name.
        payoff1 (np.ndarray): Row player payoffs, rows x cols.
        payoff2 (np.ndarray): Column player payoffs, rows x cols.
        horizon (int): Number of repetitions, 1 for a one-shot game.
        discount (float): Per-step discount in [0, 1].
        row_actions (tuple): Row action labels.
        col_actions (tuple): Column action labels.
    """

    name: str
    payoff1: np.ndarray
    payoff2: np.ndarray
    horizon: int = 1
    discount: float = 1.0
    row_actions: Tuple[str, ...] = ()
    col_actions: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        payoff1 = np.array(self.payoff1, dtype=float)
        payoff2 = np.array(self.payoff2, dtype=float)
        if payoff1.ndim != 2 or payoff1.size == 0:
            raise ContractViolation(f"game '{self.name}': payoff1 must be a non-empty matrix")
        if payoff1.shape != payoff2.shape:
            raise ContractViolation(
                f"game '{self.name}': payoff shapes differ {payoff1.shape} vs {payoff2.shape}"
            )
        if not (np.all(np.isfinite(payoff1)) and np.all(np.isfinite(payoff2))):
            raise ContractViolation(f"game '{self.name}': payoffs must be finite")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ContractViolation(f"game '{self.name}': horizon must be a positive integer")
        if not 0.0 <= float(self.discount) <= 1.0:
            raise ContractViolation(f"game '{self.name}': discount must lie in [0, 1]")
        payoff1.setflags(write=False)
        payoff2.setflags(write=False)
        rows, cols = payoff1.shape
        row_actions = tuple(self.row_actions) or _default_labels(0, rows)
        col_actions = tuple(self.col_actions) or _default_labels(rows, cols)
        if len(row_actions) != rows or len(col_actions) != cols:
            raise ContractViolation(f"game '{self.name}': action labels do not match payoffs")
        object.__setattr__(self, "payoff1", payoff1)
        object.__setattr__(self, "payoff2", payoff2)
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "discount", float(self.discount))
        object.__setattr__(self, "row_actions", row_actions)
        object.__setattr__(self, "col_actions", col_actions)

    @property
    def rows(self) -> int:
        return self.payoff1.shape[0]

    @property
    def cols(self) -> int:
        return self.payoff1.shape[1]

    @property
    def is_cooperative(self) -> bool:
        return bool(np.array_equal(self.payoff1, self.payoff2))

    @property
    def is_zero_sum(self) -> bool:
        return bool(np.array_equal(self.payoff1, -self.payoff2))

    @property
    def discount_mass(self) -> float:
        if self.horizon == 1:
            return 1.0
        return float(sum(self.discount**t for t in range(self.horizon)))

    def payoff(self, seat: Seat) -> np.ndarray:
        return self.payoff1 if Seat(seat) is Seat.ROW else self.payoff2

    def action_count(self, seat: Seat) -> int:
        return self.rows if Seat(seat) is Seat.ROW else self.cols

    def labels(self, seat: Seat) -> Tuple[str, ...]:
        return self.row_actions if Seat(seat) is Seat.ROW else self.col_actions

    def own_payoffs(self, seat: Seat) -> np.ndarray:
        """Payoffs of `seat` indexed as (own action, opponent action)."""
        return self.payoff1 if Seat(seat) is Seat.ROW else self.payoff2.T

    def with_horizon(self, horizon: Optional[int] = None, discount: Optional[float] = None):
        return replace(
            self,
            horizon=self.horizon if horizon is None else horizon,
            discount=self.discount if discount is None else discount,
        )

    def to_document(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "payoff1": self.payoff1.tolist(),
            "payoff2": self.payoff2.tolist(),
            "horizon": self.horizon,
            "discount": self.discount,
            "row_actions": list(self.row_actions),
            "col_actions": list(self.col_actions),
        }


def _common(name: str, payoff, row_actions, col_actions) -> PayoffGame:
    return PayoffGame(name, payoff, payoff, row_actions=row_actions, col_actions=col_actions)


BUILTIN_GAMES: Dict[str, PayoffGame] = {
    "fig2_coop": _common("fig2_coop", [[1, 0, -1], [0, 1, -1]], "AB", "CDE"),
    "appB_sabotage": _common(
        "appB_sabotage", [[1, 0.9, -1, 0], [0, -1, 0.9, 1]], "AB", "CDEF"
    ),
    "fig9_dominated": _common("fig9_dominated", [[1, 0.9, 0], [0, -1, 1]], "AB", "CDE"),
    "fig10_bach": PayoffGame(
        "fig10_bach",
        [[3, 0, -1], [1, 2, -1]],
        [[2, 0, -1], [1, 3, -1]],
        row_actions=("A", "B"),
        col_actions=("C", "D", "E"),
    ),
    "fig11_coop": _common("fig11_coop", [[0.9, 0, 1], [0, 0.9, 1]], "AB", "CDE"),
    "fig12_chicken": PayoffGame(
        "fig12_chicken",
        [[0, -1], [1, -10]],
        [[0, 1], [-1, -10]],
        row_actions=("A", "B"),
        col_actions=("C", "D"),
    ),
    "fig13_rps": PayoffGame(
        "fig13_rps",
        [[0, -1, 1], [1, 0, -1], [-1, 1, 0]],
        [[0, 1, -1], [-1, 0, 1], [1, -1, 0]],
        row_actions=("R", "P", "S"),
        col_actions=("R", "P", "S"),
    ),
}


def get_game(name: str) -> PayoffGame:
    """Returns the built-in game called `name`.

    Raises:
        ContractViolation: If no built-in game has that name.
    """
    try:
        return BUILTIN_GAMES[name]
    except KeyError:
        known = ", ".join(sorted(BUILTIN_GAMES))
        raise ContractViolation(f"Unsupported game '{name}' (built-in games: {known})") from None


def game_from_document(doc: Mapping[str, Any], source: str = "<document>") -> PayoffGame:
    """Builds a game from a parsed definition document.

    `payoff2` may be a matrix, "common" (copy of payoff1) or "zerosum" (its
    negation).
    """
    if not isinstance(doc, Mapping) or "payoff1" not in doc:
        raise ContractViolation(f"{source}: a game definition needs at least 'payoff1'")
    payoff1 = np.array(doc["payoff1"], dtype=float)
    payoff2 = doc.get("payoff2", "common")
    if payoff2 == "common":
        payoff2 = payoff1
    elif payoff2 == "zerosum":
        payoff2 = -payoff1
    elif isinstance(payoff2, str):
        raise ContractViolation(
            f"{source}: payoff2 must be a matrix, 'common' or 'zerosum', got '{payoff2}'"
        )
    return PayoffGame(
        name=str(doc.get("name", source)),
        payoff1=payoff1,
        payoff2=np.array(payoff2, dtype=float),
        horizon=doc.get("horizon", 1),
        discount=doc.get("discount", 1.0),
        row_actions=tuple(doc.get("row_actions", ())),
        col_actions=tuple(doc.get("col_actions", ())),
    )


def load_game(path: str) -> PayoffGame:
    """Reads a YAML, TOML or JSON game definition."""
    doc = handler_for_path(path).read(path)
    game = game_from_document(doc, source=path)
    logger.debug("loaded game %s (%dx%d) from %s", game.name, game.rows, game.cols, path)
    return game


def resolve_game(
    name_or_path: str, horizon: Optional[int] = None, discount: Optional[float] = None
) -> PayoffGame:
    game = (
        BUILTIN_GAMES[name_or_path]
        if name_or_path in BUILTIN_GAMES
        else load_game(name_or_path)
    )
    if horizon is None and discount is None:
        return game
    return game.with_horizon(horizon, discount)


def _check_simplex(strategy: Sequence[hograd.Scalar], size: int, who: str) -> np.ndarray:
    values = np.asarray(hograd.values_of(strategy), dtype=float)
    if values.shape != (size,):
        raise ContractViolation(f"{who} strategy has {values.size} entries, expected {size}")
    if np.any(values < -SIMPLEX_TOL) or abs(values.sum() - 1.0) > SIMPLEX_TOL:
        raise ContractViolation(f"{who} strategy is not on the probability simplex: {values}")
    return values


def exact_utility(
    game: PayoffGame,
    p: Sequence[hograd.Scalar],
    q: Sequence[hograd.Scalar],
    player: Seat,
) -> hograd.Scalar:
    """Expected discounted return of `player` when row plays `p` and column plays `q`.

    Args:
        game (PayoffGame): The game.
        p (Sequence): Row mixed strategy, floats or tape values.
        q (Sequence): Column mixed strategy, floats or tape values.
        player (Seat): Whose payoff to evaluate.

    Returns:
        float or TapeValue: (sum_t discount^t) * p^T R q; a tape value when any
        entry of `p` or `q` is one.

    Raises:
        ContractViolation: If `p` or `q` is off the simplex.
    """
    p_values = _check_simplex(p, game.rows, "row")
    q_values = _check_simplex(q, game.cols, "column")
    payoff = game.payoff(player)
    mass = game.discount_mass
    if not any(map(hograd.is_tape_value, itertools.chain(p, q))):
        return float(mass * (p_values @ payoff @ q_values))

    result: hograd.Scalar = 0.0
    for i, p_i in enumerate(p):
        if not hograd.is_tape_value(p_i) and p_i == 0.0:
            continue
        inner = hograd.dot(payoff[i], q)
        if not hograd.is_tape_value(inner) and inner == 0.0:
            continue
        result = hograd.total([result, p_i * inner])
    return result * mass if mass != 1.0 else result


def best_response_set(
    game: PayoffGame, opponent: Sequence[float], player: Seat
) -> FrozenSet[int]:
    """All pure actions of `player` that maximize utility against `opponent`."""
    player = Seat(player)
    opponent_values = _check_simplex(
        opponent, game.action_count(player.other), f"{player.other.key} opponent"
    )
    utilities = game.discount_mass * (game.own_payoffs(player) @ opponent_values)
    best = utilities.max()
    return frozenset(int(a) for a in np.flatnonzero(utilities >= best - BEST_RESPONSE_TOL))


@dataclass(frozen=True)
class RationalityVerdict:
    """Whether a strategy is a best response to some co-strategy.

    Attributes:
        rational (bool): A justifying co-strategy was found.
        witness (Optional[tuple]): The co-strategy with the largest margin.
        margin (Optional[float]): Worst support payoff minus best non-support
            payoff at the witness.
        support (tuple): Actions counted as played.
    """

    rational: bool
    witness: Optional[Tuple[float, ...]]
    margin: Optional[float]
    support: Tuple[int, ...]


def _resolution(delta: float) -> int:
    if delta <= 0:
        raise ContractViolation(f"grid resolution must be positive, got {delta}")
    return max(1, int(round(1.0 / delta)))


@functools.lru_cache(maxsize=32)
def _simplex_grid(k: int, n: int) -> np.ndarray:
    """Points of the k-simplex on the 1/n lattice, plus every face barycenter."""
    axes = np.meshgrid(*[np.arange(n + 1)] * (k - 1), indexing="ij")
    counts = np.stack([a.ravel() for a in axes], axis=1) if k > 1 else np.zeros((1, 0), int)
    counts = counts[counts.sum(axis=1) <= n]
    last = n - counts.sum(axis=1, keepdims=True)
    grid = np.hstack([counts, last]).astype(float) / n
    barycenters = []
    for mask in itertools.product((0.0, 1.0), repeat=k):
        if any(mask):
            point = np.array(mask)
            barycenters.append(point / point.sum())
    grid = np.vstack([grid, np.array(barycenters)])
    grid.setflags(write=False)
    return grid


def _support(values: np.ndarray, support_tol: float) -> np.ndarray:
    support = values > support_tol
    if not support.any():
        support[np.argmax(values)] = True
    return support


def rationality_check(
    game: PayoffGame,
    strategy: Sequence[float],
    player: Seat,
    delta: float = 0.01,
    support_tol: float = 1e-6,
    tie_tol: float = 1e-6,
) -> RationalityVerdict:
    """Searches the opponent's strategy simplex for a co-strategy that justifies `strategy`.

    A strategy is rational when some co-strategy makes every support action
    (probability above `support_tol`) pay within `tie_tol` of the best action.

    Args:
        game (PayoffGame): The game.
        strategy (Sequence[float]): Mixed strategy of `player`.
        player (Seat): Seat the strategy is played from.
        delta (float): Grid resolution on the opponent simplex.
        support_tol (float): Probability above which an action counts as played.
        tie_tol (float): Payoff tolerance for ties with the best response.

    Returns:
        RationalityVerdict: Verdict and witness.

    Raises:
        OracleLimitError: If the opponent has more than four actions.
    """
    player = Seat(player)
    own = game.own_payoffs(player)
    values = _check_simplex(strategy, own.shape[0], player.key)
    k = own.shape[1]
    if k > MAX_ORACLE_ACTIONS:
        raise OracleLimitError(
            f"oracle limit: opponent has {k} actions, grid search supports at most "
            f"{MAX_ORACLE_ACTIONS}"
        )
    support = _support(values, support_tol)
    grid = _simplex_grid(k, _resolution(delta))
    utilities = grid @ own.T
    worst_support = utilities[:, support].min(axis=1)
    best = utilities.max(axis=1)
    feasible = worst_support >= best - tie_tol
    support_idx = tuple(int(a) for a in np.flatnonzero(support))
    if not feasible.any():
        return RationalityVerdict(False, None, None, support_idx)

    if support.all():
        margins = worst_support - best
    else:
        margins = worst_support - utilities[:, ~support].max(axis=1)
    margins = np.where(feasible, margins, -np.inf)
    pick = int(np.argmax(margins))
    return RationalityVerdict(
        True, tuple(float(x) for x in grid[pick]), float(margins[pick]), support_idx
    )


def _positive_compositions(total_units: int, parts: int):
    if parts == 1:
        yield (total_units,)
        return
    for first in range(1, total_units - parts + 2):
        for rest in _positive_compositions(total_units - first, parts - 1):
            yield (first,) + rest


def support_enumeration_check(
    game: PayoffGame,
    strategy: Sequence[float],
    player: Seat,
    delta: float = 0.01,
    support_tol: float = 1e-6,
    tie_tol: float = 1e-6,
) -> bool:
    """Rationality oracle that walks the opponent's support faces one at a time.

    For each opponent support set it grid-searches the interior of that face
    (and its barycenter) for a point where the strategy's support actions tie
    with the best response. Shares no search code with `rationality_check`.
    """
    player = Seat(player)
    own = game.own_payoffs(player)
    values = _check_simplex(strategy, own.shape[0], player.key)
    k = own.shape[1]
    if k > MAX_ORACLE_ACTIONS:
        raise OracleLimitError(f"oracle limit: opponent has {k} actions")
    n = _resolution(delta)
    played = [int(a) for a in np.flatnonzero(_support(values, support_tol))]

    for size in range(1, k + 1):
        for face in itertools.combinations(range(k), size):
            points = [tuple(1.0 / size for _ in face)]
            if n >= size:
                compositions = _positive_compositions(n, size)
                points.extend(tuple(c / n for c in comp) for comp in compositions)
            for weights in points:
                co = np.zeros(k)
                co[list(face)] = weights
                payoffs = [float(np.dot(own[a], co)) for a in range(own.shape[0])]
                best = max(payoffs)
                if all(payoffs[a] >= best - tie_tol for a in played):
                    return True
    return False


def min_rational_utility(
    game: PayoffGame, strategy: Sequence[float], player: Seat, delta: float = 0.01
) -> float:
    """Lowest utility `strategy` can get against an opponent who plays rationally.

    Utility is linear in the co-strategy and every support action of a rational
    mixture is itself rational, so the minimum is attained at a rational pure action.
    """
    player = Seat(player)
    opponent = player.other
    count = game.action_count(opponent)
    utilities = []
    for b in range(count):
        pure = [0.0] * count
        pure[b] = 1.0
        if rationality_check(game, pure, opponent, delta).rational:
            p, q = (strategy, pure) if player is Seat.ROW else (pure, strategy)
            utilities.append(exact_utility(game, p, q, player))
    return float(min(utilities))


@dataclass
class Step:
    """One joint action.

    `log_probs` holds tape references only for the seats whose gradients the
    consuming loss needs.
    """

    observation: int
    actions: Tuple[int, int]
    rewards: Tuple[float, float]
    log_probs: Dict[Seat, hograd.Scalar] = field(default_factory=dict)

    def reward(self, seats: Sequence[Seat]) -> float:
        return sum(self.rewards[Seat(s) - 1] for s in seats) / len(seats)


@dataclass
class Trajectory:
    episode_id: int
    pairing: Tuple[str, str]
    phase: Phase
    steps: List[Step]
    weight: float = 1.0

    def rewards(self, seats: Sequence[Seat]) -> List[float]:
        return [step.reward(seats) for step in self.steps]

    def discounted_return(self, seats: Sequence[Seat], gamma: float) -> float:
        return float(sum(gamma**t * r for t, r in enumerate(self.rewards(seats))))


def _as_generator(rng: Union[int, np.random.Generator]) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.Generator(np.random.Philox(int(rng)))


def _distribution(strategy: Sequence[hograd.Scalar], size: int, who: str) -> np.ndarray:
    values = _check_simplex(strategy, size, who).clip(min=0.0)
    return values / values.sum()


def sample_batch(
    game: PayoffGame,
    p: Sequence[hograd.Scalar],
    q: Sequence[hograd.Scalar],
    rng: Union[int, np.random.Generator],
    episodes: int,
    pairing: Tuple[str, str] = ("row", "col"),
    phase: Phase = Phase.EVALUATION,
    log_probs: Optional[Mapping[Seat, Sequence[hograd.Scalar]]] = None,
    weight: float = 1.0,
) -> List[Trajectory]:
    """Samples `episodes` trajectories with joint actions drawn i.i.d. per step.

    Args:
        game (PayoffGame): The game.
        p (Sequence): Row policy probabilities.
        q (Sequence): Column policy probabilities.
        rng (int or np.random.Generator): Seed or generator.
        episodes (int): Batch size.
        pairing (tuple): Agent ids in the row and column seats.
        phase (Phase): Phase tag of the batch.
        log_probs (Mapping, optional): Per-seat log-probabilities of every action;
            the sampled entries are attached to each step.
        weight (float): Weight stored on each trajectory.

    Returns:
        List[Trajectory]: One trajectory per episode, ids 0..episodes-1.
    """
    generator = _as_generator(rng)
    p_dist = _distribution(p, game.rows, "row")
    q_dist = _distribution(q, game.cols, "column")
    shape = (episodes, game.horizon)
    row_actions = generator.choice(game.rows, size=shape, p=p_dist)
    col_actions = generator.choice(game.cols, size=shape, p=q_dist)
    log_probs = dict(log_probs or {})

    batch = []
    for e in range(episodes):
        steps = []
        for t in range(game.horizon):
            a, b = int(row_actions[e, t]), int(col_actions[e, t])
            refs = {}
            if Seat.ROW in log_probs:
                refs[Seat.ROW] = log_probs[Seat.ROW][a]
            if Seat.COL in log_probs:
                refs[Seat.COL] = log_probs[Seat.COL][b]
            steps.append(
                Step(0, (a, b), (float(game.payoff1[a, b]), float(game.payoff2[a, b])), refs)
            )
        batch.append(Trajectory(e, tuple(pairing), Phase(phase), steps, weight))
    return batch


def sample_episode(
    game: PayoffGame,
    p: Sequence[hograd.Scalar],
    q: Sequence[hograd.Scalar],
    rng: Union[int, np.random.Generator],
    **kwargs,
) -> Trajectory:
    """Samples a single episode; deterministic for an integer seed."""
    return sample_batch(game, p, q, rng, 1, **kwargs)[0]
