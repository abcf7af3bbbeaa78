"""Gradient tape: every primitive against central finite differences.

Run with: pytest tests/test_tape.py -v
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
import pytest

from bondedit.errors import NonFiniteError, ShapeError, TapeError
from bondedit.params import ParamStore
from bondedit.tape import (
    PRIMITIVES,
    Tape,
    Tensor,
    add,
    concat,
    exp,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    softplus,
    stack,
    sub,
    sum_,
    take,
    tanh,
    transpose,
)

from conftest import FD_STEP, PRIMITIVE_TOLERANCE

pytestmark = [pytest.mark.numerics]


def _identity(x: np.ndarray) -> np.ndarray:
    return x


def _positive(x: np.ndarray) -> np.ndarray:
    return np.abs(x) + 0.5


# op[-variant] -> (function of tensors, input shapes, input domain)
CASES: dict[str, tuple[Callable[..., Tensor], list[tuple[int, ...]], Callable[[np.ndarray], np.ndarray]]] = {
    "matmul": (matmul, [(3, 4), (4, 2)], _identity),
    "matmul-vector": (matmul, [(4,), (4, 3)], _identity),
    "add": (add, [(3, 4), (4,)], _identity),
    "sub": (sub, [(3, 1), (3, 4)], _identity),
    "mul": (mul, [(3, 4), (1, 4)], _identity),
    "scale": (lambda a: scale(a, -2.5), [(5,)], _identity),
    "concat": (lambda a, b: concat([a, b], axis=1), [(2, 3), (2, 2)], _identity),
    "stack": (lambda a, b: stack([a, b]), [(3,), (3,)], _identity),
    "slice": (lambda a: a[1], [(3, 4)], _identity),
    "slice-repeated": (lambda a: a[np.array([0, 2, 2])], [(4, 3)], _identity),
    "take": (lambda a: take(a, [1, 1, 0]), [(3, 2)], _identity),
    "reshape": (lambda a: reshape(a, (3, 2)), [(2, 3)], _identity),
    "transpose": (transpose, [(2, 3)], _identity),
    "sum": (lambda a: sum_(a, 0), [(3, 4)], _identity),
    "sum-all": (sum_, [(3, 4)], _identity),
    "mean": (lambda a: mean(a, 1), [(3, 4)], _identity),
    "relu": (relu, [(6,)], _identity),
    "sigmoid": (sigmoid, [(6,)], _identity),
    "tanh": (tanh, [(6,)], _identity),
    "exp": (exp, [(6,)], _identity),
    "log": (log, [(6,)], _positive),
    "softplus": (softplus, [(6,)], _identity),
    "softmax": (lambda a: softmax(a, axis=-1), [(2, 4)], _identity),
    "log_softmax": (lambda a: log_softmax(a, axis=1), [(2, 4)], _identity),
    "logsumexp": (logsumexp, [(5,)], _identity),
}


def _weighted_loss(fn: Callable[..., Tensor], values: list[np.ndarray], weights: np.ndarray) -> tuple[Tape, list[Tensor], Tensor]:
    tape = Tape()
    xs = [tape.variable(v) for v in values]
    return tape, xs, sum_(mul(fn(*xs), weights))


def _numeric_grad(fn: Callable[..., Tensor], values: list[np.ndarray], weights: np.ndarray, k: int) -> np.ndarray:
    grad = np.zeros_like(values[k])
    for index in np.ndindex(values[k].shape):
        shifted = [v.copy() for v in values]
        shifted[k][index] += FD_STEP
        upper = _weighted_loss(fn, shifted, weights)[2].item()
        shifted[k][index] -= 2 * FD_STEP
        lower = _weighted_loss(fn, shifted, weights)[2].item()
        grad[index] = (upper - lower) / (2 * FD_STEP)
    return grad


# =============================================================================
# Primitive gradients
# =============================================================================


class TestPrimitiveGradients:
    """Tape gradients of each primitive match central differences."""

    def test_every_primitive_has_a_case(self):
        assert {name.split("-")[0] for name in CASES} == set(PRIMITIVES)

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_matches_finite_differences(self, name, rng):
        fn, shapes, domain = CASES[name]
        values = [domain(rng.normal(size=s)) for s in shapes]
        scratch = Tape()
        weights = rng.normal(size=fn(*[scratch.variable(v) for v in values]).shape)

        tape, xs, loss = _weighted_loss(fn, values, weights)
        grads = tape.backward(loss)
        for k, x in enumerate(xs):
            analytic = grads.get(x.node, np.zeros_like(values[k]))
            numeric = _numeric_grad(fn, values, weights, k)
            np.testing.assert_allclose(analytic, numeric, rtol=PRIMITIVE_TOLERANCE, atol=PRIMITIVE_TOLERANCE)


# =============================================================================
# Values
# =============================================================================


class TestValues:
    """Forward values with known answers."""

    def test_uniform_softmax(self):
        tape = Tape()
        np.testing.assert_allclose(softmax(tape.variable([0.0, 0.0, 0.0])).value, [1 / 3, 1 / 3, 1 / 3])

    def test_log_softmax_is_stable(self):
        tape = Tape()
        out = log_softmax(tape.variable([1000.0, 0.0]))
        np.testing.assert_allclose(out.value, [0.0, -1000.0])

    def test_sigmoid_extremes(self):
        tape = Tape()
        np.testing.assert_allclose(sigmoid(tape.variable([-800.0, 0.0, 800.0])).value, [0.0, 0.5, 1.0])

    def test_logsumexp(self):
        tape = Tape()
        assert logsumexp(tape.variable([0.0, 0.0])).item() == pytest.approx(np.log(2.0))

    def test_constants_are_untracked(self):
        tape = Tape()
        out = add(tape.constant([1.0]), np.array([2.0]))
        assert out.node is None
        assert len(tape) == 0

    def test_dtype_follows_tape(self):
        tape = Tape("float32")
        assert (tape.variable([1.0]) * 2.0).value.dtype == np.float32


# =============================================================================
# Parameters and backward
# =============================================================================


class TestBackward:
    """Gradient accumulation into a ParamStore and misuse of the tape."""

    @pytest.fixture
    def store(self, rng):
        store = ParamStore()
        store.add("W", (3, 4), rng)
        return store

    def test_sum_gives_ones(self, store):
        tape = Tape()
        tape.backward(sum_(tape.param(store, "W")), store)
        np.testing.assert_array_equal(store.grad("W"), np.ones((3, 4)))

    def test_reuse_doubles_gradient(self, store):
        """A parameter read twice gets the sum of both contributions."""
        tape = Tape()
        w = tape.param(store, "W")
        assert tape.param(store, "W") is w
        tape.backward(sum_(add(w, w)), store)
        np.testing.assert_array_equal(store.grad("W"), np.full((3, 4), 2.0))

    def test_backward_calls_accumulate(self, store):
        for _ in range(2):
            tape = Tape()
            tape.backward(sum_(tape.param(store, "W")), store)
        np.testing.assert_array_equal(store.grad("W"), np.full((3, 4), 2.0))
        store.zero_grads()
        assert not store.grad("W").any()

    def test_inference_tape_refuses_backward(self, store):
        tape = Tape(record=False)
        loss = sum_(tape.param(store, "W"))
        assert len(tape) == 0
        with pytest.raises(TapeError):
            tape.backward(loss, store)

    def test_non_scalar_loss(self):
        tape = Tape()
        with pytest.raises(TapeError, match="scalar"):
            tape.backward(scale(tape.variable([1.0, 2.0]), 2.0))

    def test_tensors_from_another_tape(self):
        a, b = Tape(), Tape()
        with pytest.raises(TapeError):
            add(a.variable([1.0]), b.variable([1.0]))

    def test_non_finite_names_the_op(self):
        tape = Tape()
        with pytest.raises(NonFiniteError) as exc_info:
            log(tape.variable([0.0, 1.0]))
        assert exc_info.value.op == "log"
        with pytest.raises(NonFiniteError, match="exp"):
            exp(tape.variable([1000.0]))

    def test_shape_errors(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            matmul(tape.variable(np.ones((3, 4))), tape.variable(np.ones((3, 4))))
        with pytest.raises(ShapeError):
            take(tape.variable(np.ones((2, 2))), [2])
