import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ttformer.numerics import (
    ContractError,
    DegenerateRowError,
    DiffGraph,
    ShapeError,
    backward,
    grad_check,
    layer_norm_rows,
    make_rng,
    matmul,
    softmax_rows,
)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def test_matmul_identity_and_hand_case():
    a = make_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(matmul(np.eye(3), a), a)
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])


def test_matmul_against_triple_loop():
    rng = make_rng(1)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match="2x3.*2x3"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_matmul_associative(n, k, m, p, seed):
    rng = make_rng(seed)
    a, b, c = rng.normal(size=(n, k)), rng.normal(size=(k, m)), rng.normal(size=(m, p))
    left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
    assert np.max(np.abs(left - right)) <= 1e-9 * max(1.0, np.max(np.abs(left)))


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows([[3.0, 3.0, 3.0, 3.0]]), [[0.25] * 4], atol=1e-15)
    np.testing.assert_allclose(softmax_rows([[0.0, math.log(2)]]), [[1 / 3, 2 / 3]], atol=1e-15)
    out = softmax_rows([[5.0, 1.0, 3.0]], mask=[[True, False, True]])
    z = math.exp(5) + math.exp(3)
    np.testing.assert_allclose(out, [[math.exp(5) / z, 0.0, math.exp(3) / z]], atol=1e-15)
    assert out[0, 1] == 0.0


def test_softmax_fully_masked_row():
    with pytest.raises(DegenerateRowError):
        softmax_rows([[1.0, 2.0], [3.0, 4.0]], mask=[[True, False], [False, False]])


finite_rows = arrays(np.float64, (3, 5), elements=st.floats(-50, 50))


@settings(max_examples=60, deadline=None)
@given(finite_rows, st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(m, c):
    s = softmax_rows(m)
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(softmax_rows(m + c), s, atol=1e-9)


def test_layer_norm_examples():
    np.testing.assert_array_equal(layer_norm_rows([[4.0, 4.0, 4.0]], np.ones(3), np.zeros(3)), [[0.0, 0.0, 0.0]])
    np.testing.assert_allclose(layer_norm_rows([[1.0, 3.0]], np.ones(2), np.zeros(2), eps=1e-15), [[-1.0, 1.0]], atol=1e-7)


def test_layer_norm_direct_formula():
    rng = make_rng(2)
    m = rng.normal(size=(4, 6))
    gain, bias = rng.normal(size=6), rng.normal(size=6)
    out = layer_norm_rows(m, gain, bias, eps=1e-5)
    for i in range(4):
        row = m[i]
        mu = sum(row) / 6
        var = sum((x - mu) ** 2 for x in row) / 6
        expect = [(x - mu) / math.sqrt(var + 1e-5) * g + b for x, g, b in zip(row, gain, bias)]
        np.testing.assert_allclose(out[i], expect, atol=1e-10)
    z = layer_norm_rows(m, np.ones(6), np.zeros(6), eps=1e-12)
    assert np.all(np.abs(z.mean(axis=1)) < 1e-9)
    np.testing.assert_allclose(z.var(axis=1), 1.0, atol=1e-6)


def test_backward_linear_sum():
    g = DiffGraph()
    w = g.param(np.array([[1.0, -2.0], [0.5, 3.0]]), "w")
    grads = backward(g, w.sum())
    np.testing.assert_array_equal(grads["w"], np.ones((2, 2)))


def test_backward_least_squares_matches_hand_gradient():
    rng = make_rng(3)
    W0, x, y = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    g = DiffGraph()
    w = g.param(W0, "w")
    r = w @ x - y
    grads = backward(g, g.square(r).sum())
    np.testing.assert_allclose(grads["w"], 2 * (W0 @ x - y) @ x.T, atol=1e-10)


def test_backward_rejects_non_scalar():
    g = DiffGraph()
    w = g.param(np.ones((2, 2)), "w")
    with pytest.raises(ContractError):
        backward(g, w * 2.0)


def test_grad_check_quadratic():
    rng = make_rng(4)
    g = DiffGraph()
    w = g.param(rng.normal(size=(3, 3)), "w")
    a = g.constant(rng.normal(size=(3, 3)))
    loss = g.square(w @ a).sum()
    assert grad_check(g, loss, 1e-5) < 1e-8


def test_grad_check_softmax_cross_entropy():
    rng = make_rng(5)
    g = DiffGraph()
    w = g.param(rng.normal(size=(4, 3)), "w")
    x = g.constant(rng.normal(size=(6, 4)))
    onehot = np.eye(3)[rng.integers(0, 3, size=6)]
    p = g.softmax(x @ w)
    loss = -(g.log(p) * onehot).sum() * (1.0 / 6)
    assert grad_check(g, loss, 1e-6) < 1e-6


def test_grad_check_every_op():
    rng = make_rng(6)
    g = DiffGraph()
    w = g.param(rng.normal(size=(2, 4, 5)), "w")
    gain = g.param(1.0 + 0.1 * rng.normal(size=5), "gain")
    bias = g.param(0.1 * rng.normal(size=5), "bias")
    v = g.param(rng.normal(size=(5, 3)), "v")
    mask = np.tril(np.ones((4, 4), dtype=bool))
    h = g.layer_norm(w, gain, bias)
    att = g.softmax(h @ h.transpose(0, 2, 1) * 0.5, mask)
    h2 = g.concat([(att @ h).tanh(), h.relu()], axis=-1)
    out = (h2[:, 1:, :5] @ v).mean(axis=1) - g.reshape(w[:, :3, :3], (2, 3, 3)).sum(axis=2)
    loss = g.square(out).sum() + (w * w).mean()
    assert grad_check(g, loss, 1e-6) < 1e-6


def test_grad_check_step_range():
    g = DiffGraph()
    w = g.param(np.ones(2), "w")
    with pytest.raises(ContractError):
        grad_check(g, w.sum(), 1e-2)


def test_rng_determinism_and_key_independence():
    a = make_rng(42, "init", "w").normal(size=10)
    b = make_rng(42, "init", "w").normal(size=10)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, make_rng(42, "init", "v").normal(size=10))
