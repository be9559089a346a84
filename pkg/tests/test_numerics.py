import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ucad import numerics as nx
from ucad.numerics import (
    GradTape,
    NonFiniteError,
    Tensor,
    UnsupportedOperationError,
    finite_diff_grad,
    grad,
)


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b))))


def test_grad_of_constant_is_zero():
    (g,) = grad(lambda p: 3.0, [np.ones((2, 3))])
    assert g.shape == (2, 3)
    assert np.all(g == 0)


def test_grad_of_square_sum():
    (g,) = grad(lambda p: (p * p).sum(), [np.array([1.0, -2.0])])
    np.testing.assert_array_equal(g, [2.0, -4.0])


def test_grad_of_sum():
    (g,) = grad(lambda p: p.sum(), [np.array([5.0, 7.0])])
    np.testing.assert_array_equal(g, [1.0, 1.0])


def test_finite_diff_examples():
    (g,) = finite_diff_grad(lambda p: (p * p).sum(), [np.array([1.0])], h=1e-5)
    assert abs(g[0] - 2.0) < 1e-8
    (g,) = finite_diff_grad(lambda p: 4.0, [np.array([1.0, 2.0])])
    assert np.allclose(g, 0.0)
    (g,) = finite_diff_grad(lambda p: (p * p * p).sum(), [np.array([2.0])], h=1e-4)
    assert abs(g[0] - 12.0) < 1e-6


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda p: p.sum(), [np.ones(2)], h=0.0)


PRIMITIVES = {
    "add_broadcast": lambda a, b: (a + b[0]).sum(),
    "mul": lambda a, b: (a * b).sum(),
    "matmul": lambda a, b: nx.tanh(a @ b.transpose()).sum(),
    "softmax": lambda a, b: (nx.softmax(a) * b).sum(),
    "layer_norm": lambda a, b: (nx.layer_norm(a) * b).sum(),
    "gelu": lambda a, b: (nx.gelu(a) * b).sum(),
    "tanh": lambda a, b: nx.tanh(a * b).sum(),
    "cosine": lambda a, b: (nx.cosine_matrix(a) * nx.cosine_matrix(a, b)).sum(),
    "concat_mean": lambda a, b: (nx.concat([a, b], axis=0) * nx.concat([b, a], axis=0)).mean(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(7)
    fn = PRIMITIVES[name]
    for _ in range(5):
        a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        analytic = grad(fn, [a, b])
        numeric = finite_diff_grad(fn, [a, b], h=1e-5)
        for x, y in zip(analytic, numeric):
            assert _rel_err(x, y) <= 1e-5


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-3, 3)))
def test_composite_gradient_property(a):
    fn = lambda p: (nx.gelu(nx.layer_norm(p)) * nx.tanh(p)).sum()
    if a.shape[-1] < 2:
        a = np.concatenate([a, a + 0.5], axis=-1)
    (g,) = grad(fn, [a])
    (f,) = finite_diff_grad(fn, [a])
    assert _rel_err(g, f) <= 1e-5


def test_grad_is_bit_deterministic():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 3))
    fn = lambda p: nx.cosine_matrix(nx.gelu(p)).sum()
    g1, g2 = grad(fn, [a])[0], grad(fn, [a])[0]
    assert g1.tobytes() == g2.tobytes()


def test_non_finite_input_is_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_intermediate_names_the_op():
    big = np.array([1e300, 1e300])
    with pytest.raises(NonFiniteError, match="mul"):
        grad(lambda p: (p * p).sum(), [big])


def test_unsupported_primitive_raises_at_tape_time():
    with pytest.raises(UnsupportedOperationError):
        grad(lambda p: np.exp(p).sum(), [np.ones(3)])
    with pytest.raises(UnsupportedOperationError):
        grad(lambda p: np.sort(p), [np.ones(3)])


def test_tape_visits_each_op_once():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        y = (x * x + x).sum()
    tape.gradient(y, [x])
    assert tape.visited == len(tape.ops) == 3


def test_zero_vector_cosine_is_zero():
    sim = nx.cosine_matrix(Tensor(np.array([[0.0, 0.0], [1.0, 0.0]]))).data
    assert sim[0, 1] == 0.0
