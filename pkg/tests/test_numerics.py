import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from questlab.numerics import (
    Rng,
    cross_entropy,
    derive_seed,
    finite_diff_grad,
    gelu,
    gelu_grad,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    layer_norm,
    layer_norm_backward,
    matmul,
    rel_error,
    row_entropy,
    row_softmax,
    row_softmax_backward,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def matrices(max_rows=6, max_cols=6, elements=finite):
    shapes = st.tuples(st.integers(1, max_rows), st.integers(1, max_cols))
    return shapes.flatmap(lambda s: arrays(np.float64, s, elements=elements))


# matmul ---------------------------------------------------------------------


def test_matmul_identity():
    m = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(matmul(np.eye(3), m), m)


def test_matmul_scalar_case():
    assert matmul([[2.0]], [[3.0]]).tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    gen = np.random.default_rng(0)
    a, b = gen.normal(size=(7, 5)), gen.normal(size=(5, 4))
    ref = np.zeros((7, 4))
    for i in range(7):
        for j in range(4):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(a, b), ref, rtol=0, atol=1e-14)


def test_matmul_rejects_mismatch():
    with pytest.raises(ValueError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


# softmax --------------------------------------------------------------------


def test_softmax_equal_logits():
    np.testing.assert_allclose(row_softmax([[4.0, 4.0, 4.0]]), [[1 / 3] * 3], atol=1e-15)


def test_softmax_ln3():
    np.testing.assert_allclose(row_softmax([[math.log(3), 0.0]]), [[0.75, 0.25]], atol=1e-15)


def test_softmax_no_overflow():
    p = row_softmax([[1000.0, 0.0]])
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [[1.0, 0.0]], atol=1e-300)


def test_softmax_rejects_nan():
    with pytest.raises(ValueError):
        row_softmax([[np.nan, 0.0]])


@settings(max_examples=1000, deadline=None)
@given(matrices())
def test_softmax_rows_sum_to_one(m):
    np.testing.assert_allclose(row_softmax(m).sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=300, deadline=None)
@given(matrices(), st.floats(-100, 100))
def test_softmax_shift_invariance(m, c):
    np.testing.assert_allclose(row_softmax(m + c), row_softmax(m), atol=1e-12)


def test_softmax_backward_zero_upstream():
    p = row_softmax(np.random.default_rng(1).normal(size=(3, 4)))
    np.testing.assert_array_equal(row_softmax_backward(p, np.zeros_like(p)), 0.0)


def test_softmax_backward_analytic():
    np.testing.assert_allclose(row_softmax_backward([[0.5, 0.5]], [[1.0, 0.0]]), [[0.25, -0.25]], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(matrices(elements=st.floats(-5, 5)), st.integers(0, 2**32 - 1))
def test_softmax_backward_rows_sum_to_zero(m, seed):
    g = np.random.default_rng(seed).normal(size=m.shape)
    np.testing.assert_allclose(row_softmax_backward(row_softmax(m), g).sum(axis=-1), 0.0, atol=1e-12)


def test_softmax_backward_finite_differences():
    gen = np.random.default_rng(2)
    x, g = gen.normal(size=(4, 5)), gen.normal(size=(4, 5))
    fd = finite_diff_grad(lambda a: np.sum(row_softmax(a) * g), x)
    assert rel_error(row_softmax_backward(row_softmax(x), g), fd) < 1e-6


def test_entropy_bounds():
    p = row_softmax(np.random.default_rng(3).normal(size=(5, 7)))
    h = row_entropy(p)
    assert np.all(h >= 0) and np.all(h <= math.log(7) + 1e-12)
    assert row_entropy(np.array([[1.0, 0.0]]))[0] == 0.0


# l2 normalization -------------------------------------------------------------


def test_l2_three_four_five():
    y, n = l2_normalize_rows([[3.0, 4.0]])
    np.testing.assert_allclose(y, [[0.6, 0.8]], atol=1e-12)
    assert n[0] == 5.0


def test_l2_unit_row_unchanged():
    y, _ = l2_normalize_rows([[0.0, 1.0, 0.0]])
    np.testing.assert_allclose(y, [[0.0, 1.0, 0.0]], atol=1e-11)


def test_l2_zero_row():
    y, n = l2_normalize_rows(np.zeros((1, 3)))
    assert n[0] == 0.0 and np.all(y == 0.0)


def test_l2_rejects_nonpositive_epsilon():
    with pytest.raises(ValueError):
        l2_normalize_rows([[1.0]], epsilon=0.0)


@settings(max_examples=300, deadline=None)
@given(matrices(elements=st.floats(-1e3, 1e3)))
def test_l2_norm_one_sided(m):
    y, n = l2_normalize_rows(m)
    big = n >= 1.0
    out = np.linalg.norm(y, axis=-1)[big]
    assert np.all(out >= 1 - 1e-9) and np.all(out <= 1.0)


def test_l2_backward_finite_differences_and_projection():
    gen = np.random.default_rng(4)
    m, g = gen.normal(size=(5, 4)), gen.normal(size=(5, 4))
    y, n = l2_normalize_rows(m)
    an = l2_normalize_rows_backward(m, n, g)
    fd = finite_diff_grad(lambda a: np.sum(l2_normalize_rows(a)[0] * g), m)
    assert rel_error(an, fd) < 1e-5
    # gradient is orthogonal to the row it normalizes
    np.testing.assert_allclose(np.sum(an * m, axis=-1), 0.0, atol=1e-10)


# layer norm -------------------------------------------------------------------


def test_layer_norm_constant_row():
    y, _ = layer_norm(np.full((1, 4), 3.0), np.ones(4), np.zeros(4))
    np.testing.assert_array_equal(y, 0.0)


def test_layer_norm_standardized_row():
    y, _ = layer_norm([[-1.0, 1.0]], np.ones(2), np.zeros(2))
    np.testing.assert_allclose(y, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_backward_finite_differences():
    gen = np.random.default_rng(5)
    x, g = gen.normal(size=(3, 6)), gen.normal(size=(3, 6))
    gain, bias = gen.normal(size=6), gen.normal(size=6)
    _, cache = layer_norm(x, gain, bias)
    dx, dg, db = layer_norm_backward(cache, g)
    assert rel_error(dx, finite_diff_grad(lambda a: np.sum(layer_norm(a, gain, bias)[0] * g), x)) < 1e-5
    assert rel_error(dg, finite_diff_grad(lambda a: np.sum(layer_norm(x, a, bias)[0] * g), gain)) < 1e-5
    assert rel_error(db, finite_diff_grad(lambda a: np.sum(layer_norm(x, gain, a)[0] * g), bias)) < 1e-5


def test_gelu_known_values_and_grad():
    assert gelu(np.array(0.0)) == 0.0
    np.testing.assert_allclose(gelu(np.array(1.0)), 0.8413447460685429, rtol=1e-14)
    x = np.linspace(-4, 4, 17)
    fd = finite_diff_grad(lambda a: np.sum(gelu(a)), x)
    assert rel_error(gelu_grad(x), fd) < 1e-8


# cross entropy ----------------------------------------------------------------


def test_cross_entropy_uniform():
    loss, grad = cross_entropy(np.zeros(10), 0)
    assert abs(loss - math.log(10)) < 1e-12
    np.testing.assert_allclose(grad, [0.1 - 1] + [0.1] * 9, atol=1e-15)


def test_cross_entropy_finite_differences():
    gen = np.random.default_rng(6)
    z = gen.normal(size=10)
    _, grad = cross_entropy(z, 3)
    assert rel_error(grad, finite_diff_grad(lambda a: cross_entropy(a, 3)[0], z)) < 1e-6


def test_cross_entropy_stack_and_bad_label():
    z = np.random.default_rng(7).normal(size=(2, 3, 10))
    labels = np.array([[0, 1, 2], [3, 4, 9]])
    loss, _ = cross_entropy(z, labels)
    assert loss.shape == (2, 3)
    assert loss[1, 2] == pytest.approx(cross_entropy(z[1, 2], 9)[0], abs=1e-15)
    with pytest.raises(ValueError):
        cross_entropy(np.zeros(10), 10)


# finite differences -------------------------------------------------------------


def test_fd_square():
    assert abs(finite_diff_grad(lambda x: x[0] ** 2, np.array([3.0]))[0] - 6.0) < 1e-6


def test_fd_sin():
    assert abs(finite_diff_grad(lambda x: np.sin(x[0]), np.array([0.0]))[0] - 1.0) < 1e-9


def test_fd_quadratic():
    gen = np.random.default_rng(8)
    a = gen.normal(size=(5, 5))
    a = a + a.T
    b, x = gen.normal(size=5), gen.normal(size=5)
    fd = finite_diff_grad(lambda v: 0.5 * v @ a @ v + b @ v, x)
    np.testing.assert_allclose(fd, a @ x + b, atol=1e-8)


def test_fd_rejects_nonfinite():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: np.inf if x[0] > 0 else 0.0, np.array([0.0]))


# rng ------------------------------------------------------------------------------


def test_rng_split_is_path_addressed():
    a = Rng(5)
    first = a.split("data").normal(size=3)
    a.normal(size=100)
    np.testing.assert_array_equal(a.split("data").normal(size=3), first)
    assert not np.array_equal(a.split("weights").normal(size=3), first)
    assert not np.array_equal(a.split(1).normal(size=3), a.split(2).normal(size=3))


def test_derive_seed_stable():
    assert derive_seed(0, "data", 1) == derive_seed(0, "data", 1)
    assert derive_seed(0, "data", 1) != derive_seed(0, "data", 2)
    assert 0 <= derive_seed("x") < 2**64
