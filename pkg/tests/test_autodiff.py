import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hypseek.autodiff import Tape


def _numeric(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        g[idx] = (f(up) - f(down)) / (2 * h)
    return g


def _check(build, x, rtol=1e-6, atol=1e-8):
    """Compare tape gradient of ``sum(build(tape, var))`` with central differences."""
    tape = Tape()
    v = tape.variable(x)
    out = tape.sum(build(tape, v))
    (g,) = tape.gradient(out, [v])

    def f(arr):
        t = Tape()
        return float(t.sum(build(t, t.variable(arr))).value)

    np.testing.assert_allclose(g, _numeric(f, x), rtol=rtol, atol=atol)


positive = arrays(np.float64, (2, 3), elements=st.floats(0.2, 3.0))
anything = arrays(np.float64, (2, 3), elements=st.floats(-3.0, 3.0))


@settings(max_examples=25)
@given(anything)
def test_smooth_unary_ops(x):
    for op in ("exp", "tanh", "square", "asinh"):
        _check(lambda t, v: getattr(t, op)(v), x)


@settings(max_examples=25)
@given(positive)
def test_positive_domain_ops(x):
    _check(lambda t, v: t.log(v), x)
    _check(lambda t, v: t.sqrt(v), x)
    _check(lambda t, v: t.acosh(v + 1.5), x)
    _check(lambda t, v: t.sinhc_of_sqrt(v), x)


def test_sinhc_series_branch_gradient():
    x = np.array([0.0, 1e-6, 1e-3, 0.009, 0.011, 0.5])
    tape = Tape()
    v = tape.variable(x)
    (g,) = tape.gradient(tape.sum(tape.sinhc_of_sqrt(v)), [v])
    s = np.sqrt(x[1:])
    exact = (s * np.cosh(s) - np.sinh(s)) / (2 * s ** 3)
    np.testing.assert_allclose(g[1:], exact, rtol=1e-7)
    assert g[0] == pytest.approx(1 / 6)


@settings(max_examples=25)
@given(arrays(np.float64, (2, 3), elements=st.floats(-0.9, 0.9)))
def test_inverse_trig(x):
    _check(lambda t, v: t.arccos(v), x)
    _check(lambda t, v: t.arcsin_capped(t.square(v)), x)


def test_clamps_have_zero_gradient_outside():
    tape = Tape()
    v = tape.variable(np.array([-1.0, 2.0, 0.5]))
    out = tape.sum(tape.relu(v) + tape.minimum(v, 1.0) + tape.acosh(v))
    (g,) = tape.gradient(out, [v])
    # relu: 0, 1, 1; minimum: 1, 0, 1; acosh: 0 (clamped), 1/sqrt(3), 0 (clamped)
    np.testing.assert_allclose(g, [1.0, 1.0 + 1 / np.sqrt(3.0), 2.0])


@settings(max_examples=25)
@given(anything, arrays(np.float64, (3, 4), elements=st.floats(-2, 2)))
def test_matmul_and_broadcast(x, w):
    bias = np.array([0.1, -0.2, 0.3, 0.0])
    _check(lambda t, v: t.tanh(v @ w + bias), x)
    _check(lambda t, v: (v * v[0]).sum(axis=1), x)


@settings(max_examples=25)
@given(anything)
def test_reductions_and_logsumexp(x):
    _check(lambda t, v: t.logsumexp(v, axis=1), x)
    _check(lambda t, v: t.logsumexp(v, axis=0) * 2.0, x)
    _check(lambda t, v: t.concatenate([v, v * 3.0], axis=0).sum(axis=0), x)
    _check(lambda t, v: 1.0 / (t.square(v) + 1.0) - v.T[1:2].T, x)


def test_where_routes_gradient():
    tape = Tape()
    a = tape.variable(np.array([1.0, 2.0]))
    b = tape.variable(np.array([3.0, 4.0]))
    out = tape.sum(tape.where([True, False], a * 2.0, b * 5.0))
    ga, gb = tape.gradient(out, [a, b])
    np.testing.assert_array_equal(ga, [2.0, 0.0])
    np.testing.assert_array_equal(gb, [0.0, 5.0])


def test_gradient_needs_scalar():
    tape = Tape()
    v = tape.variable(np.ones(2))
    with pytest.raises(ValueError):
        tape.gradient(v * 2.0, [v])


def test_unused_variable_gets_zero_gradient():
    tape = Tape()
    a, b = tape.variable(np.ones(3)), tape.variable(np.ones(2))
    ga, gb = tape.gradient(tape.sum(a), [a, b])
    np.testing.assert_array_equal(ga, np.ones(3))
    np.testing.assert_array_equal(gb, np.zeros(2))
