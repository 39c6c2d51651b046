"""
Reverse-mode differentiation tape with nested gradients.

Every arithmetic operation on a `TapeValue` appends a node to its `Tape`. Asking
for a gradient with `create_graph=True` records the backward pass on the same
tape, so the returned gradients can be differentiated again. This is what lets a
manipulator differentiate through its base agent's optimizer steps.

Parameters are flat lists of scalars. The problem sizes handled here are a few
dozen logits, so the tape works on Python floats.

Classes:
    Tape: Append-only list of nodes, released after each update step.
    TapeValue: A scalar node on a tape.
    GradientResult: Gradients plus disconnected-leaf flags.
    OptimizerKind: SGD or Adam.
    DifferentiableOptimizerState: Step count and Adam moments.
    FiniteDiffReport: Outcome of a finite-difference comparison.

Functions:
    tape_backward: Gradients of a scalar node with respect to parameters.
    stop_gradient: Copy of a value that blocks gradient flow.
    magic_box: The DiCE operator exp(tau - stop_gradient(tau)).
    optimizer_step: Differentiable SGD or Adam ascent step.
    finite_diff_check: Compare tape gradients to central differences.

Example:
    tape = Tape()
    x = tape.leaf(3.0)
    (dx,) = tape_backward(x * x, [x], create_graph=True).grads
    (ddx,) = tape_backward(dx, [x]).grads  # 2.0
"""

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from .exceptions import ContractViolation, NonFiniteError, StaleDependencyError

Scalar = Union[float, "TapeValue"]


class Tape:
    """Append-only record of scalar operations.

    A node's parents always precede it, so insertion order is a topological
    order of the graph.
    """

    def __init__(self) -> None:
        self.nodes: List["TapeValue"] = []
        self.alive = True

    def __len__(self) -> int:
        return len(self.nodes)

    def check_alive(self) -> None:
        if not self.alive:
            raise StaleDependencyError("stale dependency: the tape holding this node was released")

    def leaf(self, value: float) -> "TapeValue":
        return self._record(float(value), "leaf", (), ())

    def constant(self, value: float) -> "TapeValue":
        return self._record(float(value), "const", (), ())

    def leaves(self, values: Sequence[float]) -> List["TapeValue"]:
        return [self.leaf(v) for v in values]

    def constants(self, values: Sequence[float]) -> List["TapeValue"]:
        return [self.constant(v) for v in values]

    def release(self) -> None:
        """Free the graph. Any later use of its nodes raises `StaleDependencyError`."""
        self.alive = False
        self.nodes = []

    def _record(
        self,
        value: float,
        op: str,
        parents: Tuple["TapeValue", ...],
        partials: Tuple[float, ...],
        data: Optional[float] = None,
    ) -> "TapeValue":
        self.check_alive()
        node = TapeValue(self, len(self.nodes), value, parents, partials, op, data)
        self.nodes.append(node)
        return node


class TapeValue:
    """A scalar node on a tape.

    Attributes:
        tape (Tape): Owning tape.
        node_id (int): Position on the tape.
        value (float): Forward value.
        parents (tuple): Input nodes.
        partials (tuple): Local partial derivatives with respect to each parent.
        op (str): Operation tag.
        data (Optional[float]): Constant operand of the operation, if any.
    """

    __slots__ = ("tape", "node_id", "value", "parents", "partials", "op", "data")

    def __init__(self, tape, node_id, value, parents, partials, op, data=None) -> None:
        self.tape = tape
        self.node_id = node_id
        self.value = value
        self.parents = parents
        self.partials = partials
        self.op = op
        self.data = data

    def __repr__(self) -> str:
        return f"TapeValue(id={self.node_id}, value={self.value!r}, op={self.op!r})"

    def __float__(self) -> float:
        return self.value

    def _other(self, other: "TapeValue") -> "TapeValue":
        if other.tape is not self.tape:
            raise ContractViolation("cannot combine nodes that live on different tapes")
        return other

    def __add__(self, other: Scalar) -> "TapeValue":
        if isinstance(other, TapeValue):
            other = self._other(other)
            return self.tape._record(self.value + other.value, "add", (self, other), (1.0, 1.0))
        c = float(other)
        return self.tape._record(self.value + c, "shift", (self,), (1.0,), c)

    __radd__ = __add__

    def __sub__(self, other: Scalar) -> "TapeValue":
        if isinstance(other, TapeValue):
            other = self._other(other)
            return self.tape._record(self.value - other.value, "sub", (self, other), (1.0, -1.0))
        return self + (-float(other))

    def __rsub__(self, other: Scalar) -> "TapeValue":
        return (-self) + float(other)

    def __neg__(self) -> "TapeValue":
        return self.tape._record(-self.value, "neg", (self,), (-1.0,))

    def __mul__(self, other: Scalar) -> "TapeValue":
        if isinstance(other, TapeValue):
            other = self._other(other)
            return self.tape._record(
                self.value * other.value, "mul", (self, other), (other.value, self.value)
            )
        c = float(other)
        return self.tape._record(self.value * c, "scale", (self,), (c,), c)

    __rmul__ = __mul__

    def __truediv__(self, other: Scalar) -> "TapeValue":
        if isinstance(other, TapeValue):
            other = self._other(other)
            b = other.value
            return self.tape._record(
                self.value / b, "div", (self, other), (1.0 / b, -self.value / (b * b))
            )
        return self * (1.0 / float(other))

    def __rtruediv__(self, other: Scalar) -> "TapeValue":
        return self.reciprocal() * float(other)

    def __pow__(self, exponent: float) -> "TapeValue":
        if isinstance(exponent, TapeValue):
            raise ContractViolation("only constant exponents are supported on the tape")
        n = float(exponent)
        partial = n * self.value ** (n - 1.0) if n != 0.0 else 0.0
        return self.tape._record(self.value**n, "pow", (self,), (partial,), n)

    def reciprocal(self) -> "TapeValue":
        a = self.value
        return self.tape._record(1.0 / a, "recip", (self,), (-1.0 / (a * a),))

    def exp(self) -> "TapeValue":
        v = math.exp(self.value)
        return self.tape._record(v, "exp", (self,), (v,))

    def log(self) -> "TapeValue":
        return self.tape._record(math.log(self.value), "log", (self,), (1.0 / self.value,))

    def sqrt(self) -> "TapeValue":
        v = math.sqrt(self.value)
        # subgradient 0 at the kink keeps zero-gradient Adam steps finite
        partial = 0.5 / v if v > 0.0 else 0.0
        return self.tape._record(v, "sqrt", (self,), (partial,))


def is_tape_value(x: object) -> bool:
    return isinstance(x, TapeValue)


def value_of(x: Scalar) -> float:
    return x.value if isinstance(x, TapeValue) else float(x)


def values_of(xs: Sequence[Scalar]) -> List[float]:
    return [value_of(x) for x in xs]


def exp(x: Scalar) -> Scalar:
    return x.exp() if isinstance(x, TapeValue) else math.exp(x)


def log(x: Scalar) -> Scalar:
    return x.log() if isinstance(x, TapeValue) else math.log(x)


def sqrt(x: Scalar) -> Scalar:
    return x.sqrt() if isinstance(x, TapeValue) else math.sqrt(x)


def total(xs: Sequence[Scalar]) -> Scalar:
    """Sum without seeding the tape with a constant zero node."""
    result: Scalar = 0.0
    for x in xs:
        result = _accumulate(result, x)
    return result


def dot(coeffs: Sequence[float], xs: Sequence[Scalar]) -> Scalar:
    """Linear combination sum_k coeffs[k] * xs[k], skipping zero coefficients."""
    result: Scalar = 0.0
    for c, x in zip(coeffs, xs):
        c = float(c)
        if c == 0.0:
            continue
        result = _accumulate(result, x if c == 1.0 else x * c)
    return result


def log_softmax(logits: Sequence[Scalar]) -> List[Scalar]:
    """Log-probabilities of a softmax policy, shifted by the (constant) max logit."""
    shift = max(values_of(logits))
    lse = log(total([exp(z - shift) for z in logits])) + shift
    return [z - lse for z in logits]


def softmax(logits: Sequence[Scalar]) -> List[Scalar]:
    shift = max(values_of(logits))
    weights = [exp(z - shift) for z in logits]
    norm = total(weights)
    return [w / norm for w in weights]


def stop_gradient(x: Scalar) -> Scalar:
    """Return a node with the same value and no route back to `x`.

    Example:
        tape = Tape()
        x = tape.leaf(3.0)
        tape_backward(x * stop_gradient(x), [x]).grads  # [3.0]
    """
    if isinstance(x, TapeValue):
        return x.tape._record(x.value, "stop", (), ())
    return float(x)


def magic_box(log_prob_sum: Scalar) -> Scalar:
    """DiCE operator: evaluates to exactly 1, differentiates like `log_prob_sum`."""
    return exp(log_prob_sum - stop_gradient(log_prob_sum))


def _symbolic_partials(node: TapeValue) -> Tuple[Scalar, ...]:
    """Local partials as tape values, so the backward pass is itself differentiable."""
    op = node.op
    if op == "add":
        return (1.0, 1.0)
    if op == "sub":
        return (1.0, -1.0)
    if op == "shift":
        return (1.0,)
    if op == "neg":
        return (-1.0,)
    if op == "scale":
        return (node.data,)
    if op == "mul":
        a, b = node.parents
        return (b, a)
    if op == "div":
        b = node.parents[1]
        rb = b.reciprocal()
        return (rb, -(node * rb))
    if op == "recip":
        return (-(node * node),)
    if op == "exp":
        return (node,)
    if op == "log":
        return (node.parents[0].reciprocal(),)
    if op == "pow":
        a = node.parents[0]
        n = node.data
        if n == 0.0:
            return (0.0,)
        if n == 1.0:
            return (1.0,)
        if n == 2.0:
            return (a * 2.0,)
        return ((a ** (n - 1.0)) * n,)
    if op == "sqrt":
        return (node.reciprocal() * 0.5,) if node.value > 0.0 else (0.0,)
    return ()


def _times(adjoint: Scalar, partial: Scalar) -> Scalar:
    if isinstance(adjoint, TapeValue):
        if isinstance(partial, TapeValue):
            return adjoint * partial
        if partial == 0.0:
            return 0.0
        return adjoint if partial == 1.0 else adjoint * partial
    if isinstance(partial, TapeValue):
        if adjoint == 0.0:
            return 0.0
        return partial if adjoint == 1.0 else partial * adjoint
    return adjoint * partial


def _accumulate(acc: Optional[Scalar], contribution: Scalar) -> Scalar:
    if acc is None:
        return contribution
    if not isinstance(contribution, TapeValue) and contribution == 0.0:
        return acc
    if not isinstance(acc, TapeValue) and acc == 0.0:
        return contribution
    return acc + contribution


@dataclass(frozen=True)
class GradientResult:
    """Gradients of one root.

    Attributes:
        grads (list): One gradient per requested parameter; tape values when
            requested with `create_graph`, floats otherwise.
        disconnected (tuple): True where the parameter is not on the root's tape
            or the root does not depend on it. Such gradients are zero.
    """

    grads: List[Scalar]
    disconnected: Tuple[bool, ...]

    @property
    def any_disconnected(self) -> bool:
        return any(self.disconnected)


def tape_backward(
    root: TapeValue, wrt: Sequence[Scalar], create_graph: bool = False
) -> GradientResult:
    """Differentiate a scalar node with respect to parameters on its tape.

    Only nodes lying on a path from some `wrt` node to `root` are visited, so the
    cost of a nested gradient grows with the part of the tape it depends on.

    Args:
        root (TapeValue): Scalar output.
        wrt (Sequence): Parameters to differentiate against.
        create_graph (bool): Record the backward pass on the tape so the result
            can be differentiated again.

    Returns:
        GradientResult: Gradients and disconnected-leaf flags.

    Raises:
        ContractViolation: If `root` is not a tape node.
        StaleDependencyError: If the root's tape was released.
    """
    if not isinstance(root, TapeValue):
        raise ContractViolation(
            f"gradient root must be a scalar tape node, got {type(root).__name__}"
        )
    tape = root.tape
    tape.check_alive()
    wrt = list(wrt)
    targets = {
        w.node_id
        for w in wrt
        if isinstance(w, TapeValue) and w.tape is tape and w.node_id <= root.node_id
    }

    adjoints: Dict[int, Scalar] = {}
    if targets:
        segment = tape.nodes[min(targets) : root.node_id + 1]
        live = set()
        for node in segment:
            if node.node_id in targets or any(p.node_id in live for p in node.parents):
                live.add(node.node_id)
        if root.node_id in live:
            adjoints[root.node_id] = 1.0
            for node in reversed(segment):
                adjoint = adjoints.get(node.node_id)
                if adjoint is None or not node.parents or node.node_id not in live:
                    continue
                if not isinstance(adjoint, TapeValue) and adjoint == 0.0:
                    continue
                partials = _symbolic_partials(node) if create_graph else node.partials
                for parent, partial in zip(node.parents, partials):
                    if parent.node_id not in live:
                        continue
                    adjoints[parent.node_id] = _accumulate(
                        adjoints.get(parent.node_id), _times(adjoint, partial)
                    )

    grads: List[Scalar] = []
    flags: List[bool] = []
    for w in wrt:
        connected = (
            isinstance(w, TapeValue) and w.node_id in targets and w.node_id in adjoints
        )
        g = adjoints[w.node_id] if connected else 0.0
        if create_graph and not isinstance(g, TapeValue):
            g = tape.constant(g)
        elif not create_graph:
            g = value_of(g)
        grads.append(g)
        flags.append(not connected)
    return GradientResult(grads, tuple(flags))


def grad(root: TapeValue, wrt: Sequence[Scalar], create_graph: bool = False) -> List[Scalar]:
    return tape_backward(root, wrt, create_graph=create_graph).grads


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class DifferentiableOptimizerState:
    """State of a differentiable optimizer.

    Adam moments may be tape values while a lookahead copy is being updated;
    `detached()` turns them back into floats for storage between steps.
    """

    kind: OptimizerKind = OptimizerKind.SGD
    step_count: int = 0
    first_moment: Tuple[Scalar, ...] = ()
    second_moment: Tuple[Scalar, ...] = ()
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, kind: Union[str, OptimizerKind], size: int) -> "DifferentiableOptimizerState":
        kind = OptimizerKind(kind)
        if kind is OptimizerKind.ADAM:
            zeros = tuple(0.0 for _ in range(size))
            return cls(kind=kind, first_moment=zeros, second_moment=zeros)
        return cls(kind=kind)

    def detached(self) -> "DifferentiableOptimizerState":
        return replace(
            self,
            first_moment=tuple(values_of(self.first_moment)),
            second_moment=tuple(values_of(self.second_moment)),
        )


def optimizer_step(
    params: Sequence[Scalar],
    grads: Sequence[Scalar],
    state: DifferentiableOptimizerState,
    lr: float,
) -> Tuple[List[Scalar], DifferentiableOptimizerState]:
    """Take one ascent step, expressed in tape operations when inputs are nodes.

    Args:
        params (Sequence): Current parameters.
        grads (Sequence): Gradients aligned with `params`.
        state (DifferentiableOptimizerState): Optimizer state.
        lr (float): Learning rate, non-negative. Zero returns the inputs unchanged.

    Returns:
        Tuple[List, DifferentiableOptimizerState]: New parameters and state.

    Raises:
        ContractViolation: On length mismatches or a negative learning rate.
    """
    if len(params) != len(grads):
        raise ContractViolation(
            f"gradient length {len(grads)} does not match parameter length {len(params)}"
        )
    if lr < 0:
        raise ContractViolation(f"learning rate must be non-negative, got {lr}")
    if lr == 0:
        return list(params), state

    if state.kind is OptimizerKind.SGD:
        new_params = [p + g * lr if isinstance(g, TapeValue) else p + lr * g
                      for p, g in zip(params, grads)]
        return new_params, replace(state, step_count=state.step_count + 1)

    if len(state.first_moment) != len(params) or len(state.second_moment) != len(params):
        raise ContractViolation("Adam moments must match the parameter vector length")
    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    m = [b1 * m_i + (1.0 - b1) * g for m_i, g in zip(state.first_moment, grads)]
    v = [b2 * v_i + (1.0 - b2) * (g * g) for v_i, g in zip(state.second_moment, grads)]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params = [
        p + lr * (m_i / c1) / (sqrt(v_i / c2) + state.eps) for p, m_i, v_i in zip(params, m, v)
    ]
    return new_params, replace(
        state, step_count=t, first_moment=tuple(m), second_moment=tuple(v)
    )


@dataclass(frozen=True)
class FiniteDiffReport:
    """Per-parameter analytic and central-difference gradients."""

    max_relative_error: float
    analytic: Tuple[float, ...]
    numeric: Tuple[float, ...]
    h: float

    def within(self, tolerance: float) -> bool:
        return self.max_relative_error < tolerance


def _evaluate(f: Callable[[List[TapeValue]], Scalar], values: Sequence[float]) -> float:
    tape = Tape()
    try:
        return value_of(f(tape.leaves(values)))
    finally:
        tape.release()


def finite_diff_check(
    f: Callable[[List[TapeValue]], Scalar], params: Sequence[float], h: float = 1e-5
) -> FiniteDiffReport:
    """Compare tape gradients of `f` against central differences.

    `f` receives fresh leaf nodes for every evaluation and must return a scalar.
    A disagreement is reported, never asserted: functions containing
    `stop_gradient` legitimately differ from their finite differences.

    Args:
        f (Callable): Scalar function of a list of leaves.
        params (Sequence[float]): Point of evaluation.
        h (float): Central-difference step, positive.

    Returns:
        FiniteDiffReport: Maximum of |a - n| / (|a| + |n| + 1e-12) over parameters.

    Raises:
        ContractViolation: If `h` is not positive.
        NonFiniteError: If `f` evaluates to NaN or infinity.
    """
    if h <= 0:
        raise ContractViolation(f"finite-difference step must be positive, got {h}")
    base = [float(p) for p in params]

    tape = Tape()
    leaves = tape.leaves(base)
    out = f(leaves)
    if not math.isfinite(value_of(out)):
        raise NonFiniteError(f"function value is not finite at {base}")
    if isinstance(out, TapeValue):
        analytic = [value_of(g) for g in tape_backward(out, leaves).grads]
    else:
        analytic = [0.0] * len(base)
    tape.release()

    numeric = []
    for i in range(len(base)):
        plus = list(base)
        minus = list(base)
        plus[i] += h
        minus[i] -= h
        f_plus = _evaluate(f, plus)
        f_minus = _evaluate(f, minus)
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteError(f"function value is not finite when perturbing parameter {i}")
        numeric.append((f_plus - f_minus) / (2.0 * h))

    errors = [abs(a - n) / (abs(a) + abs(n) + 1e-12) for a, n in zip(analytic, numeric)]
    return FiniteDiffReport(
        max_relative_error=max(errors, default=0.0),
        analytic=tuple(analytic),
        numeric=tuple(numeric),
        h=h,
    )
