import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rcp import tensor as T
from rcp.tensor import MaskedRowError, NumericError, ShapeError, Tensor


def leaf(x):
    return T.parameter(np.asarray(x, dtype=np.float64))


def test_matmul_examples():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    assert np.array_equal(out.data, [[3, 4], [5, 6]])
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient_matches_finite_differences():
    gen = np.random.default_rng(0)
    a, b = leaf(gen.normal(size=(4, 5))), leaf(gen.normal(size=(5, 3)))
    err = T.finite_diff_check(lambda: T.matmul(a, b).sum(), [a, b], h=1e-5)
    assert err <= 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_softmax_examples():
    assert np.allclose(T.softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert T.softmax_lastdim(Tensor([0.0, -np.inf])).data.tolist() == [1.0, 0.0]
    np.testing.assert_allclose(T.softmax_lastdim(Tensor([1.0, 2.0, 3.0])).data, [0.09003, 0.24473, 0.66524],
                               atol=5e-6)


def test_softmax_all_masked_row_raises():
    with pytest.raises(MaskedRowError):
        T.softmax_lastdim(Tensor([[0.0, 1.0], [-np.inf, -np.inf]]))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax_lastdim(Tensor(x)).data
    assert np.all(y >= 0)
    assert np.all(np.abs(y.sum(-1) - 1.0) <= 1e-12)


def test_logistic_noise_median_and_moments():
    assert T.logistic_from_uniform(0.5) == 0.0
    draws = T.logistic_noise(T.Rng(3).stream("mc"), 100_000)
    assert abs(draws.mean()) <= 0.02
    assert abs(draws.var() - math.pi**2 / 3) <= 0.1


def test_logistic_noise_is_finite_at_clamped_extremes():
    v = T.logistic_from_uniform(np.array([T.UNIFORM_CLAMP, 1 - T.UNIFORM_CLAMP]))
    assert np.all(np.isfinite(v))


def test_straight_through_forward_values():
    out = T.straight_through(Tensor([0.7, 0.3, 0.5]))
    assert out.data.tolist() == [1.0, 0.0, 0.0]


def test_straight_through_gradient_equals_soft_gradient():
    gen = np.random.default_rng(1)
    z = leaf(gen.normal(size=7))
    w = gen.normal(size=7)
    (T.straight_through(T.sigmoid(z)) * Tensor(w)).sum().backward()
    g_hard = z.grad.copy()
    z.zero_grad()
    (T.sigmoid(z) * Tensor(w)).sum().backward()
    assert np.max(np.abs(g_hard - z.grad)) <= 1e-12


def test_finite_diff_quadratic_is_exact():
    x = leaf(3.0)
    assert T.finite_diff_check(lambda: x * x, [x]) <= 1e-9


def test_finite_diff_nonfinite_raises():
    x = leaf(-1.0)
    with pytest.raises(NumericError), np.errstate(invalid="ignore"):
        T.finite_diff_check(lambda: T.sqrt(x), [x])


def test_stop_gradient_contributes_nothing():
    x = leaf([0.3, -1.2, 2.0])
    g = x + T.stop_gradient(T.exp(x) * x)
    g.sum().backward()
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_rng_streams_are_reproducible_and_distinct():
    a = T.Rng(7).stream("gumbel", 3, 1).random(5)
    b = T.Rng(7).stream("gumbel", 3, 1).random(5)
    c = T.Rng(7).stream("gumbel", 3, 2).random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_precision_context_switches_dtype():
    with T.precision(np.float32):
        assert Tensor([1.0]).data.dtype == np.float32
        assert T.parameter([1.0]).data.dtype == np.float32
    assert Tensor([1.0]).data.dtype == np.float64


def test_backward_needs_scalar_seed():
    with pytest.raises(ShapeError):
        leaf([1.0, 2.0]).backward()


# every differentiable op, 100 randomised trials each


def _pos(gen, shape):
    return gen.uniform(0.5, 2.0, size=shape)


OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)], False),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)], False),
    "mul": (lambda a, b: a * b, [(3, 4), (3, 4)], False),
    "div": (lambda a, b: a / b, [(3, 4), (4,)], True),
    "pow": (lambda a: a**3, [(5,)], True),
    "neg": (lambda a: -a, [(5,)], False),
    "exp": (lambda a: T.exp(a), [(2, 3)], False),
    "log": (lambda a: T.log(a), [(2, 3)], True),
    "sqrt": (lambda a: T.sqrt(a), [(2, 3)], True),
    "tanh": (lambda a: T.tanh(a), [(2, 3)], False),
    "sigmoid": (lambda a: T.sigmoid(a), [(2, 3)], False),
    "gelu": (lambda a: T.gelu(a), [(2, 3)], False),
    "abs": (lambda a: T.abs_(a), [(2, 3)], True),
    "maximum": (lambda a: T.maximum(a, 1.0), [(2, 3)], True),
    "matmul": (lambda a, b: a @ b, [(2, 3, 4), (4, 2)], False),
    "sum_axis": (lambda a: a.sum(axis=1), [(3, 4)], False),
    "mean_axis": (lambda a: a.mean(axis=0), [(3, 4)], False),
    "masked_mean": (lambda a: T.masked_mean(a, Tensor([[1.0], [0.0], [1.0]]), axis=0), [(3, 4)], False),
    "layer_norm": (lambda a, g, b: T.layer_norm(a, g, b), [(3, 5), (5,), (5,)], False),
    "broadcast_rows": (lambda a: T.broadcast_rows(a, 3), [(4,)], False),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)], False),
    "gather_rows": (lambda a: T.gather_rows(a, [2, 0, 2]), [(2, 3, 4)], False),
    "getitem": (lambda a: a[:, 1:3], [(3, 4)], False),
    "reshape_transpose": (lambda a: a.reshape(4, 3).transpose(1, 0).swapaxes(0, 1), [(3, 4)], False),
    "scatter": (lambda a: T.scatter(a, [3, 0], 5), [(2, 2)], False),
    "select": (lambda a, b: T.select(np.array([[True, False, True]]), a, b), [(2, 3), (2, 3)], False),
    "masked_fill": (lambda a: T.masked_fill(a, np.array([False, True, False]), -5.0), [(2, 3)], False),
    "softmax": (lambda a: T.softmax(a, axis=0), [(3, 4)], False),
    "weighted_softmax": (
        lambda s, w: T.weighted_softmax(s, w, blocked=np.triu(np.ones((3, 3), bool), 1)),
        [(2, 3, 3), (2, 1, 3)],
        True,
    ),
    "log_softmax": (lambda a: T.log_softmax(a), [(3, 4)], False),
    "cross_entropy": (lambda a: T.cross_entropy(a, np.array([0, 3, 1])), [(3, 4)], False),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_over_random_trials(name):
    fn, shapes, positive = OPS[name]
    gen = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        args = [leaf(_pos(gen, s) if positive else gen.normal(size=s)) for s in shapes]
        weights = None

        def f(args=args):
            nonlocal weights
            out = fn(*args)
            if weights is None:
                weights = Tensor(gen.normal(size=out.shape))
            return (out * weights).sum()

        worst = max(worst, T.finite_diff_check(f, args, h=1e-6))
    assert worst <= 1e-4, f"{name}: {worst}"


def test_determinism_bitwise():
    def run():
        gen = T.Rng(11).stream("init")
        a = leaf(gen.normal(size=(3, 3)))
        out = T.gelu(a @ a).sum()
        out.backward()
        return out.data, a.grad

    (o1, g1), (o2, g2) = run(), run()
    assert o1.tobytes() == o2.tobytes()
    assert g1.tobytes() == g2.tobytes()
