# tests/test_hograd.py
import math

import pytest
from src.rationalpg import hograd
from src.rationalpg.exceptions import ContractViolation, NonFiniteError, StaleDependencyError
from src.rationalpg.hograd import (
    DifferentiableOptimizerState,
    OptimizerKind,
    Tape,
    finite_diff_check,
    grad,
    magic_box,
    optimizer_step,
    stop_gradient,
    tape_backward,
)


def test_first_order_gradient():
    tape = Tape()
    x, y = tape.leaves([3.0, 2.0])
    f = x * y + x**2
    assert grad(f, [x, y]) == pytest.approx([8.0, 3.0])


def test_nested_gradient_with_create_graph():
    tape = Tape()
    x = tape.leaf(2.0)
    (dx,) = grad(x**3, [x], create_graph=True)
    assert hograd.value_of(dx) == pytest.approx(12.0)
    (ddx,) = grad(dx, [x])
    assert ddx == pytest.approx(12.0)


def test_cross_derivative_through_product():
    tape = Tape()
    x, y = tape.leaves([1.5, -0.5])
    (dx,) = grad(hograd.exp(x * y), [x], create_graph=True)
    (dxdy,) = grad(dx, [y])
    # d/dy (y e^{xy}) = e^{xy} (1 + xy)
    expected = math.exp(-0.75) * (1.0 - 0.75)
    assert dxdy == pytest.approx(expected)


def test_non_tape_root_is_a_contract_violation():
    tape = Tape()
    x = tape.leaf(1.0)
    with pytest.raises(ContractViolation):
        tape_backward(1.0, [x])


def test_released_tape_raises_stale_dependency():
    tape = Tape()
    x = tape.leaf(1.0)
    tape.release()
    with pytest.raises(StaleDependencyError, match="stale dependency"):
        x + 1.0


def test_disconnected_parameter_gets_zero_and_flag():
    tape = Tape()
    x, y = tape.leaves([2.0, 5.0])
    result = tape_backward(x * x, [x, y])
    assert result.grads == pytest.approx([4.0, 0.0])
    assert result.disconnected == (False, True)
    assert result.any_disconnected


def test_disconnected_parameter_under_create_graph_is_a_constant_node():
    tape = Tape()
    x, y = tape.leaves([2.0, 5.0])
    grads = grad(x * 3.0, [x, y], create_graph=True)
    assert all(hograd.is_tape_value(g) for g in grads)
    assert hograd.values_of(grads) == pytest.approx([3.0, 0.0])


def test_stop_gradient_blocks_the_path():
    tape = Tape()
    x = tape.leaf(3.0)
    assert grad(x * stop_gradient(x), [x]) == pytest.approx([3.0])


def test_magic_box_is_one_and_differentiates_like_its_argument():
    tape = Tape()
    x = tape.leaf(0.7)
    tau = x * 2.0
    box = magic_box(tau)
    assert hograd.value_of(box) == pytest.approx(1.0, abs=1e-12)
    assert grad(box, [x]) == pytest.approx([2.0])


def test_magic_box_second_derivative():
    tape = Tape()
    x = tape.leaf(0.3)
    box = magic_box(x * x)
    (first,) = grad(box, [x], create_graph=True)
    (second,) = grad(first, [x])
    # d2/dx2 exp(x^2 - c) at the point where it equals 1: 2 + (2x)^2
    assert second == pytest.approx(2.0 + 4 * 0.09)


def test_log_softmax_and_softmax_are_consistent():
    tape = Tape()
    logits = tape.leaves([1.0, -2.0, 0.5])
    log_probs = hograd.log_softmax(logits)
    probs = hograd.softmax(logits)
    assert sum(math.exp(hograd.value_of(lp)) for lp in log_probs) == pytest.approx(1.0)
    for lp, p in zip(log_probs, probs):
        assert math.exp(hograd.value_of(lp)) == pytest.approx(hograd.value_of(p))


def test_sqrt_at_zero_has_zero_subgradient():
    tape = Tape()
    x = tape.leaf(0.0)
    assert grad(hograd.sqrt(x), [x]) == pytest.approx([0.0])


def test_sgd_step_ascends():
    state = DifferentiableOptimizerState.create(OptimizerKind.SGD, 2)
    params, state = optimizer_step([1.0, 2.0], [0.5, -1.0], state, 0.1)
    assert params == pytest.approx([1.05, 1.9])
    assert state.step_count == 1


def test_adam_first_step_matches_scalar_reference():
    state = DifferentiableOptimizerState.create(OptimizerKind.ADAM, 1)
    g, lr = 0.3, 0.1
    (param,), state = optimizer_step([1.0], [g], state, lr)

    m = (1 - state.beta1) * g
    v = (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1)
    v_hat = v / (1 - state.beta2)
    expected = 1.0 + lr * m_hat / (math.sqrt(v_hat) + state.eps)
    assert param == pytest.approx(expected)
    assert param == pytest.approx(1.1, abs=1e-6)


def test_adam_step_is_differentiable():
    tape = Tape()
    x = tape.leaf(0.5)
    state = DifferentiableOptimizerState.create(OptimizerKind.ADAM, 1)
    _, state = optimizer_step([0.0], [0.2], state, 0.1)
    (updated,), _ = optimizer_step([tape.constant(0.0)], [x * x], state, 0.1)
    (dx,) = grad(updated, [x])
    assert math.isfinite(dx)
    assert dx != 0.0


def test_zero_learning_rate_returns_inputs_unchanged():
    tape = Tape()
    params = tape.leaves([1.0, 2.0])
    state = DifferentiableOptimizerState.create(OptimizerKind.SGD, 2)
    before = len(tape)
    new_params, new_state = optimizer_step(params, [tape.leaf(1.0), 0.5], state, 0.0)
    assert new_params[0] is params[0]
    assert new_params[1] is params[1]
    assert new_state is state
    assert len(tape) == before + 1


def test_optimizer_step_rejects_bad_input():
    state = DifferentiableOptimizerState.create(OptimizerKind.SGD, 2)
    with pytest.raises(ContractViolation):
        optimizer_step([1.0, 2.0], [1.0], state, 0.1)
    with pytest.raises(ContractViolation):
        optimizer_step([1.0], [1.0], state, -0.1)


def test_finite_diff_check_agrees_with_tape():
    def f(xs):
        return xs[0] * xs[1] + hograd.exp(xs[0]) - hograd.log(xs[1])

    report = finite_diff_check(f, [0.3, 1.7])
    assert report.within(1e-5)
    assert report.analytic == pytest.approx(report.numeric, rel=1e-6)


def test_finite_diff_check_reports_stop_gradient_disagreement():
    report = finite_diff_check(lambda xs: xs[0] * stop_gradient(xs[0]), [2.0])
    assert report.analytic == pytest.approx((2.0,))
    assert report.numeric[0] == pytest.approx(4.0)
    assert not report.within(1e-5)


def test_finite_diff_check_rejects_non_finite_values():
    with pytest.raises(NonFiniteError):
        finite_diff_check(lambda xs: xs[0] * float("inf"), [1.0])


def test_finite_diff_check_rejects_non_positive_step():
    with pytest.raises(ContractViolation):
        finite_diff_check(lambda xs: xs[0], [1.0], h=0.0)
