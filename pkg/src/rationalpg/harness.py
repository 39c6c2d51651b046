"""
Experiment orchestration for rationalpg.

This module turns an `ExperimentConfig` into runs on disk: one directory per
seed with checkpoints, a metrics CSV and a `run.yaml` record. Sweeps fan the
Cartesian product of a parameter grid out over a process pool. The check
suites compare the engine against independent oracles.

Classes:
    RunRecord: What a single run produced.
    SweepResult: Records of a sweep plus its summary CSV.
    CheckOutcome: Result of one oracle comparison.
    CheckReport: Results of the selected check suites.

Functions:
    run_experiment: Runs one seed of a configuration.
    run_experiments: Runs every seed of a configuration.
    run_sweep: Runs a parameter grid in parallel.
    run_crossplay: Cross-play grid of checkpoint files.
    run_audit: Sabotage audit of checkpoint files.
    run_checks: Runs the grad, oracle and dice suites.

Example:
    config = load_config().with_overrides(algorithm="at-rpg", lookahead=4)
    for record in run_experiments(config):
        print(record.outcome, record.metrics_path)
"""

import glob
import itertools
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import hograd
from .algorithms import (
    ADVERSARY,
    VICTIM,
    AlgorithmKind,
    AlgorithmSpec,
    AuditReport,
    CrossPlayGrid,
    MetricRow,
    Outcome,
    TrainingOptions,
    build_graph,
    crossplay_eval,
    initial_policies,
    load_checkpoint,
    manipulator_id,
    run_training,
    sabotage_audit,
)
from .config import ExperimentConfig, config_hash
from .exceptions import ContractViolation
from .games import (
    BUILTIN_GAMES,
    PayoffGame,
    Seat,
    exact_utility,
    get_game,
    rationality_check,
    support_enumeration_check,
)
from .handlers import get_document_handler
from .shaping import LookaheadConfig, exact_manipulator_gradients, sampled_manipulator_gradients
from .utils import stream_rng, write_csv

logger = logging.getLogger(__name__)

RUN_RECORD_SCHEMA_VERSION = 1
GRAD_TOLERANCE = 1e-5
MAGIC_BOX_TOLERANCE = 1e-8
CHECK_SUITES = ("grad", "oracle", "dice")
SUMMARY_COLUMNS = ("seed", "outcome", "oscillating", "converged_step", "steps_run", "run_dir")


@dataclass
class RunRecord:
    """What a single run produced.

    Attributes:
        config_hash (str): Hash of the configuration, seeds and output excluded.
        seed (int): Seed of the run.
        outcome (Outcome): Converged, budget exhausted or diverged.
        steps_run (int): Update steps taken.
        converged_step (Optional[int]): Step at which convergence was first detected.
        wall_clock (float): Seconds spent training.
        run_dir (str): Directory holding the run's files.
        checkpoints (list): Checkpoint paths, oldest first.
        metrics_path (str): Metrics CSV.
        metrics (list): Metric rows, one per agent and edge per step.
        error (Optional[str]): Diagnostic of a diverged run.
        oscillating (bool): The run did not converge and its policies kept cycling.
        switches (int): Dominant-action changes seen during training.
    """

    config_hash: str
    seed: int
    outcome: Outcome
    steps_run: int
    converged_step: Optional[int]
    wall_clock: float
    run_dir: str
    checkpoints: List[str] = field(default_factory=list)
    metrics_path: str = ""
    metrics: List[MetricRow] = field(default_factory=list)
    error: Optional[str] = None
    oscillating: bool = False
    switches: int = 0

    @property
    def final_checkpoints(self) -> List[str]:
        if not self.checkpoints:
            return []
        last = os.path.dirname(self.checkpoints[-1])
        return [path for path in self.checkpoints if os.path.dirname(path) == last]

    def to_document(self) -> Dict[str, Any]:
        return {
            "schema_version": RUN_RECORD_SCHEMA_VERSION,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "outcome": self.outcome.value,
            "steps_run": self.steps_run,
            "converged_step": self.converged_step,
            "oscillating": self.oscillating,
            "switches": self.switches,
            "wall_clock": round(self.wall_clock, 3),
            "checkpoints": list(self.checkpoints),
            "metrics_path": self.metrics_path,
            "error": self.error,
        }


def default_run_dir(config: ExperimentConfig, seed: int) -> str:
    name = os.path.splitext(os.path.basename(config.game))[0]
    experiment = f"{config.algorithm}-{name}-{config_hash(config)}"
    return os.path.join(config.output, experiment, f"seed-{seed}")


def run_experiment(
    config: ExperimentConfig, seed: int, run_dir: Optional[str] = None
) -> RunRecord:
    """Trains one seed of `config` and writes its metrics, checkpoints and record.

    Args:
        config (ExperimentConfig): Validated configuration.
        seed (int): Seed of this run.
        run_dir (Optional[str]): Output directory, derived from the config by default.

    Returns:
        RunRecord: The record also written to `<run_dir>/run.yaml`.
    """
    run_dir = run_dir or default_run_dir(config, seed)
    game = config.resolve_game()
    spec = config.algorithm_spec(seed)
    logger.info("run %s on %s, seed %d -> %s", spec.kind.value, game.name, seed, run_dir)

    start = time.perf_counter()
    result = run_training(spec, game, config.training_options(), config.steps, seed, run_dir)
    elapsed = time.perf_counter() - start

    metrics_path = write_csv(
        os.path.join(run_dir, "metrics.csv"),
        MetricRow.HEADER,
        (row.as_row() for row in result.metrics),
    )
    record = RunRecord(
        config_hash=config_hash(config),
        seed=seed,
        outcome=result.outcome,
        steps_run=result.steps_run,
        converged_step=result.converged_step,
        wall_clock=elapsed,
        run_dir=run_dir,
        checkpoints=result.checkpoints,
        metrics_path=metrics_path,
        metrics=result.metrics,
        error=result.error,
        oscillating=result.oscillating,
        switches=result.switches,
    )
    get_document_handler("yaml").write(os.path.join(run_dir, "run.yaml"), record.to_document())
    logger.info("seed %d finished: %s after %d steps", seed, record.outcome.value, record.steps_run)
    return record


def run_experiments(config: ExperimentConfig) -> List[RunRecord]:
    return [run_experiment(config, seed) for seed in config.seeds]


@dataclass
class SweepResult:
    records: List[RunRecord]
    summary_path: str
    parameters: List[str]


def _run_job(job: Tuple[ExperimentConfig, int, str]) -> RunRecord:
    config, seed, run_dir = job
    record = run_experiment(config, seed, run_dir)
    # rows are already in metrics.csv
    record.metrics = []
    return record


def _combination_dir(combination: Mapping[str, Any]) -> str:
    if not combination:
        return "base"
    return "_".join(f"{name.replace('.', '-')}={value}" for name, value in combination.items())


def run_sweep(
    config: ExperimentConfig,
    grid: Mapping[str, Sequence[Any]],
    workers: Optional[int] = None,
    output: Optional[str] = None,
) -> SweepResult:
    """Runs every combination of `grid` for every seed of `config`.

    Each run writes into its own directory, so workers share no files. An empty
    grid runs the base configuration once per seed.

    Args:
        config (ExperimentConfig): Base configuration.
        grid (Mapping): Field name to the values it takes.
        workers (Optional[int]): Process count; 1 runs in this process.
        output (Optional[str]): Sweep directory, derived from the config by default.

    Returns:
        SweepResult: Records in grid order and the summary CSV path.

    Raises:
        ConfigError: If a grid value is invalid; raised before any run starts.
    """
    names = list(grid)
    sweep_dir = output or os.path.join(config.output, f"sweep-{config_hash(config)}")
    jobs, combinations = [], []
    for values in itertools.product(*(grid[name] for name in names)):
        combination = dict(zip(names, values))
        variant = config.with_overrides(**combination)
        for seed in variant.seeds:
            run_dir = os.path.join(sweep_dir, _combination_dir(combination), f"seed-{seed}")
            jobs.append((variant, seed, run_dir))
            combinations.append(combination)

    logger.info("sweep of %d runs into %s", len(jobs), sweep_dir)
    if workers == 1 or len(jobs) <= 1:
        records = [_run_job(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            records = list(executor.map(_run_job, jobs))

    rows = []
    for combination, record in zip(combinations, records):
        rows.append(
            [combination[name] for name in names]
            + [
                record.seed,
                record.outcome.value,
                str(record.oscillating).lower(),
                "" if record.converged_step is None else record.converged_step,
                record.steps_run,
                record.run_dir,
            ]
        )
    summary_path = write_csv(
        os.path.join(sweep_dir, "summary.csv"), names + list(SUMMARY_COLUMNS), rows
    )
    return SweepResult(records, summary_path, names)


def expand_checkpoints(patterns: Sequence[str]) -> List[str]:
    """Expands glob patterns; a plain path that does not exist is an error naming it."""
    paths: List[str] = []
    for pattern in patterns:
        if glob.has_magic(pattern):
            matches = sorted(glob.glob(pattern, recursive=True))
            if not matches:
                raise ContractViolation(f"no checkpoint matches {pattern}")
            paths.extend(matches)
        elif not os.path.isfile(pattern):
            raise ContractViolation(f"checkpoint not found: {pattern}")
        else:
            paths.append(pattern)
    return paths


def _labels(paths: Sequence[str], agent_ids: Sequence[str]) -> List[str]:
    if len(set(agent_ids)) == len(agent_ids):
        return list(agent_ids)
    return [os.path.splitext(path)[0] for path in paths]


def run_crossplay(
    patterns: Sequence[str],
    game: PayoffGame,
    episodes: int = 0,
    seed: int = 0,
    output: Optional[str] = None,
) -> Tuple[CrossPlayGrid, str]:
    """Evaluates every pair of the matched checkpoints and writes the grid CSV.

    Returns:
        Tuple[CrossPlayGrid, str]: The grid and the CSV path.
    """
    paths = expand_checkpoints(patterns)
    checkpoints = [load_checkpoint(path) for path in paths]
    labels = _labels(paths, [c.agent_id for c in checkpoints])
    grid = crossplay_eval(checkpoints, game, episodes, seed, labels)
    output = output or os.path.join(os.path.dirname(paths[0]) or ".", "crossplay.csv")
    return grid, grid.write_csv(output)


def run_audit(
    patterns: Sequence[str], game: PayoffGame, delta: float = 0.01, support_tol: float = 0.05
) -> AuditReport:
    checkpoints = [load_checkpoint(path) for path in expand_checkpoints(patterns)]
    return sabotage_audit(checkpoints, game, delta, support_tol)


@dataclass(frozen=True)
class CheckOutcome:
    suite: str
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.suite}: {self.name} ({self.detail})"


@dataclass
class CheckReport:
    outcomes: List[CheckOutcome] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(outcome.passed for outcome in self.outcomes)

    def failures(self, suite: Optional[str] = None) -> List[CheckOutcome]:
        return [
            outcome
            for outcome in self.outcomes
            if not outcome.passed and (suite is None or outcome.suite == suite)
        ]

    @property
    def lines(self) -> List[str]:
        return self.notes + [outcome.line() for outcome in self.outcomes]


def _utility_function(game: PayoffGame, seat: Seat):
    def utility(leaves):
        p = hograd.softmax(leaves[: game.rows])
        q = hograd.softmax(leaves[game.rows:])
        return exact_utility(game, p, q, seat)

    return utility


def _lookahead_objective(
    game: PayoffGame,
    victim_logits: Sequence[float],
    adversary_logits: Sequence[float],
    states: Tuple[Any, hograd.DifferentiableOptimizerState],
    lr: float,
    steps: int = 1,
    victim_learns: bool = False,
):
    """Victim loss after `steps` ascent steps of the adversary against the manipulator.

    With `victim_learns` the victim ascends its own utility in the same steps.
    Written directly against the tape so it shares no code with the shaping module.
    """
    def objective(manipulator):
        tape = manipulator[0].tape
        victim = tape.leaves(victim_logits)
        adversary = tape.leaves(adversary_logits)
        victim_state, adversary_state = states
        for _ in range(steps):
            inner = exact_utility(
                game, hograd.softmax(manipulator), hograd.softmax(adversary), Seat.COL
            )
            adversary_grads = hograd.grad(inner, adversary, create_graph=True)
            if victim_learns:
                own = exact_utility(
                    game, hograd.softmax(victim), hograd.softmax(adversary), Seat.ROW
                )
                victim_grads = hograd.grad(own, victim, create_graph=True)
                victim, victim_state = hograd.optimizer_step(
                    victim, victim_grads, victim_state, lr
                )
            adversary, adversary_state = hograd.optimizer_step(
                adversary, adversary_grads, adversary_state, lr
            )
        return -exact_utility(game, hograd.softmax(victim), hograd.softmax(adversary), Seat.ROW)

    return objective


def _relative_error(analytic: Sequence[float], numeric: Sequence[float]) -> float:
    return max(
        (abs(a - n) / (abs(a) + abs(n) + 1e-12) for a, n in zip(analytic, numeric)), default=0.0
    )


def _grad_suite(h: float, seed: int) -> Tuple[List[CheckOutcome], List[str]]:
    tolerance = max(GRAD_TOLERANCE, 10.0 * h * h)
    notes = []
    if tolerance > GRAD_TOLERANCE:
        notes.append(f"grad: h={h:g} degrades the tolerance to {tolerance:.1e}")
    rng = stream_rng(seed, 0, "check:grad")
    outcomes = []

    def record(name: str, error: float) -> None:
        outcomes.append(
            CheckOutcome("grad", name, error < tolerance, f"max relative error {error:.2e}")
        )

    for name, game in sorted(BUILTIN_GAMES.items()):
        params = rng.normal(0.0, 1.0, size=game.rows + game.cols)
        for seat in (Seat.ROW, Seat.COL):
            report = hograd.finite_diff_check(_utility_function(game, seat), params, h)
            record(f"utility {name} {seat.key}", report.max_relative_error)

    game = get_game("fig2_coop")
    victim = rng.dirichlet(np.ones(game.rows))
    adversary = rng.normal(0.0, 1.0, size=game.cols)
    for kind in hograd.OptimizerKind:
        state = hograd.DifferentiableOptimizerState.create(kind, game.cols)
        if kind is hograd.OptimizerKind.ADAM:
            # a warm Adam state keeps the update smooth in the gradient
            _, state = hograd.optimizer_step(
                list(adversary), list(rng.normal(size=game.cols)), state, 0.1
            )
        objective = _lookahead_objective(game, np.log(victim), adversary, (None, state), 0.1)
        report = hograd.finite_diff_check(objective, rng.normal(size=game.rows), h)
        record(f"one-step lookahead with {kind.value}", report.max_relative_error)

    spec = AlgorithmSpec(AlgorithmKind.AT_RPG, seed=seed)
    config = LookaheadConfig()
    policies = initial_policies(spec, game, TrainingOptions(config, init_scale=1.0), seed)
    shaper = manipulator_id(ADVERSARY)
    analytic = exact_manipulator_gradients(build_graph(spec), policies, config, game)[shaper]
    victim, adversary = policies[(VICTIM, Seat.ROW)], policies[(ADVERSARY, Seat.COL)]
    objective = _lookahead_objective(
        game,
        hograd.values_of(victim.logits),
        hograd.values_of(adversary.logits),
        (victim.optimizer_state, adversary.optimizer_state),
        config.lr_base_lookahead,
        steps=config.lookahead,
        victim_learns=True,
    )
    numeric = hograd.finite_diff_check(
        objective, hograd.values_of(policies[(shaper, Seat.ROW)].logits), h
    ).numeric
    record("exact manipulator gradient of at-rpg", _relative_error(analytic, numeric))
    return outcomes, notes


def _oracle_cases(seed: int, strategies: int) -> List[Tuple[PayoffGame, Seat, np.ndarray]]:
    cases = []
    for game in BUILTIN_GAMES.values():
        for seat in (Seat.ROW, Seat.COL):
            n = game.action_count(seat)
            cases.extend((game, seat, row) for row in np.eye(n))
            cases.append((game, seat, np.full(n, 1.0 / n)))
    rng = stream_rng(seed, 0, "check:oracle")
    games = [BUILTIN_GAMES[name] for name in sorted(BUILTIN_GAMES)]
    for _ in range(strategies):
        game = games[int(rng.integers(len(games)))]
        seat = Seat(int(rng.integers(1, 3)))
        n = game.action_count(seat)
        mask = rng.random(n) < 0.6
        if not mask.any():
            mask[int(rng.integers(n))] = True
        weights = rng.dirichlet(np.ones(n)) * mask
        cases.append((game, seat, weights / weights.sum()))
    return cases


def _oracle_suite(seed: int, strategies: int, delta: float) -> List[CheckOutcome]:
    disagreements: Dict[str, int] = {}
    counts: Dict[str, int] = {}
    for game, seat, strategy in _oracle_cases(seed, strategies):
        counts[game.name] = counts.get(game.name, 0) + 1
        grid = rationality_check(game, strategy, seat, delta).rational
        faces = support_enumeration_check(game, strategy, seat, delta)
        if grid != faces:
            disagreements[game.name] = disagreements.get(game.name, 0) + 1
            logger.warning(
                "oracles disagree on %s %s %s: grid=%s faces=%s",
                game.name, seat.key, np.round(strategy, 4), grid, faces,
            )
    return [
        CheckOutcome(
            "oracle",
            f"rationality oracles agree on {name}",
            disagreements.get(name, 0) == 0,
            f"{counts[name] - disagreements.get(name, 0)}/{counts[name]} strategies",
        )
        for name in sorted(counts)
    ]


def _magic_box_outcome(seed: int) -> CheckOutcome:
    rng = stream_rng(seed, 0, "check:magic-box")
    tape = hograd.Tape()
    try:
        logits = tape.leaves(rng.normal(size=3))
        log_probs = hograd.log_softmax(logits)
        forward, identity = 0.0, 0.0
        for log_prob in log_probs + [log_probs[0] + log_probs[2]]:
            box = hograd.magic_box(log_prob)
            forward = max(forward, abs(hograd.value_of(box) - 1.0))
            score = hograd.grad(log_prob, logits)
            through_box = hograd.grad(box, logits)
            for a, b in zip(through_box, score):
                identity = max(identity, abs(hograd.value_of(a) - hograd.value_of(b)))
    finally:
        tape.release()
    passed = forward < MAGIC_BOX_TOLERANCE and identity < MAGIC_BOX_TOLERANCE
    detail = f"forward error {forward:.1e}, score identity error {identity:.1e}"
    return CheckOutcome("dice", "magic box forward value and score identity", passed, detail)


def _estimator_outcome(seed: int, trials: int, batch_size: int) -> CheckOutcome:
    game = get_game("fig2_coop")
    # one lookahead step; every sampled iteration draws its own batch of `batch_size`
    config = LookaheadConfig(lookahead=1, lr_base_lookahead=0.1)
    shaper = manipulator_id(ADVERSARY)
    positive = 0
    for trial in range(trials):
        spec = AlgorithmSpec(AlgorithmKind.AT_RPG, seed=seed + trial)
        graph = build_graph(spec)
        options = TrainingOptions(config, init_scale=1.0)
        policies = initial_policies(spec, game, options, spec.seed)
        exact = exact_manipulator_gradients(graph, policies, config, game)[shaper]
        sampled = sampled_manipulator_gradients(
            graph, policies, {}, config, game, batch_size, spec.seed
        )[shaper]
        if float(np.dot(exact, sampled)) > 0:
            positive += 1
    required = math.ceil(0.95 * trials)
    return CheckOutcome(
        "dice",
        f"sampled manipulator gradient aligns with the exact gradient at batch {batch_size}",
        positive >= required,
        f"{positive}/{trials} positive inner products, {required} required",
    )


def run_checks(
    suites: Optional[Sequence[str]] = None,
    h: float = 1e-5,
    seed: int = 0,
    trials: int = 20,
    batch_size: int = 10_000,
    strategies: int = 100,
    delta: float = 0.01,
) -> CheckReport:
    """Runs the selected oracle suites.

    Args:
        suites (Optional[Sequence[str]]): Any of "grad", "oracle", "dice"; all by default.
        h (float): Central-difference step of the grad suite.
        seed (int): Seed of the random test points.
        trials (int): Estimator comparisons in the dice suite.
        batch_size (int): Episodes per sampled estimate in the dice suite.
        strategies (int): Random strategies in the oracle suite.
        delta (float): Grid resolution of both rationality oracles.

    Returns:
        CheckReport: One outcome per comparison, plus notes such as degraded tolerances.

    Raises:
        ContractViolation: For an unknown suite name.
    """
    suites = list(suites or CHECK_SUITES)
    unknown = [suite for suite in suites if suite not in CHECK_SUITES]
    if unknown:
        raise ContractViolation(f"unknown check suite(s): {', '.join(unknown)}")
    report = CheckReport()
    if "grad" in suites:
        outcomes, notes = _grad_suite(h, seed)
        report.outcomes.extend(outcomes)
        report.notes.extend(notes)
    if "oracle" in suites:
        report.outcomes.extend(_oracle_suite(seed, strategies, delta))
    if "dice" in suites:
        report.outcomes.append(_magic_box_outcome(seed))
        report.outcomes.append(_estimator_outcome(seed, trials, batch_size))
    logger.info(
        "checks finished: %d outcomes, %d failed", len(report.outcomes), len(report.failures())
    )
    return report
