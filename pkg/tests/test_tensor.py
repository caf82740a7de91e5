import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eidetic import tensor as T
from eidetic.errors import DomainError, GraphError, ShapeError
from eidetic.gradcheck import check_gradients, numeric_grad, relative_error
from eidetic.tensor import Tensor


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def test_extents_and_values():
    t = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    assert t.shape == (2, 3)
    assert np.prod(t.shape) == t.values.size
    np.testing.assert_array_equal(t.values, [1, 2, 3, 4, 5, 6])
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((eye @ m).data, m.data)
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_is_ones_times_b_transpose():
    rng = np.random.default_rng(0)
    a, b = leaf(rng, 3, 4), Tensor(rng.standard_normal((4, 5)))
    (a @ b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 5)) @ b.data.T, rtol=1e-14)
    num = numeric_grad(lambda: (a @ b).sum(), a)
    assert relative_error(a.grad, num).max() < 1e-6


def test_softmax_temp_examples():
    np.testing.assert_allclose(T.softmax_temp(Tensor([0.0, 0.0, 0.0]), 1.0).data, [1 / 3] * 3, rtol=1e-15)
    e = np.exp([1.0, 2.0, 3.0])
    expected = e / e.sum()
    np.testing.assert_allclose(expected, [0.090031, 0.244728, 0.665241], atol=5e-7)
    np.testing.assert_allclose(T.softmax_temp(Tensor([1.0, 2.0, 3.0]), 1.0).data, expected, rtol=1e-14)
    sharp = T.softmax_temp(Tensor([1.0, 2.0, 3.0]), 0.01).data
    assert np.argmax(sharp) == 2 and sharp[2] > 1 - 1e-8


def test_softmax_temp_rejects_nonpositive_tau():
    with pytest.raises(DomainError):
        T.softmax_temp(Tensor([1.0, 2.0]), 0.0)
    with pytest.raises(DomainError):
        T.softmax_temp(Tensor([[1.0, 2.0]]), Tensor([[-1.0]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one_under_extreme_logits(logits):
    y = T.softmax_temp(Tensor(logits), 0.3).data
    assert np.all(y >= 0)
    assert np.abs(y.sum(axis=-1) - 1.0).max() <= 1e-12


def test_layer_norm_examples():
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_array_equal(T.layer_norm(Tensor([[2.5, 2.5, 2.5]]), g, b).data, 0.0)
    out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    expected = 1.0 / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out, [[-expected, expected]], rtol=1e-15)
    np.testing.assert_allclose(out, [[-0.999995, 0.999995]], atol=1e-6)


def test_layer_norm_gradients():
    rng = np.random.default_rng(1)
    x, g, b = leaf(rng, 4, 5), leaf(rng, 5), leaf(rng, 5)
    r = Tensor(rng.standard_normal((4, 5)))
    results = check_gradients(lambda: (T.layer_norm(x, g, b) * r).sum(), [("x", x), ("g", g), ("b", b)])
    assert max(res.max_rel_error for res in results) < 1e-6


def test_backward_examples():
    rng = np.random.default_rng(2)
    x = leaf(rng, 2, 3)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    x.zero_grad()
    ((x * x).sum() / 2.0).backward()
    np.testing.assert_allclose(x.grad, x.data, rtol=1e-15)


def test_backward_contract_errors():
    rng = np.random.default_rng(3)
    x = leaf(rng, 3)
    with pytest.raises(GraphError):
        (x * 2.0).backward()
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_released_graph_cannot_be_reused_by_a_new_loss():
    rng = np.random.default_rng(4)
    x = leaf(rng, 3)
    hidden = T.exp(x)
    hidden.sum().backward()
    with pytest.raises(GraphError):
        (hidden * 2.0).sum().backward()


def test_gradients_accumulate_until_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    x.sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])
    T.zero_grad([x])
    assert x.grad is None


def test_shared_subexpression_accumulates():
    x = Tensor([0.5, -1.5], requires_grad=True)
    y = x * x
    (y + y * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, 8.0 * x.data)


UNARY = {
    "exp": lambda a: T.exp(a),
    "log": lambda a: T.log(T.exp(a) + 1.0),
    "sqrt": lambda a: T.sqrt(a * a + 1.0),
    "gelu": T.gelu,
    "pow3": lambda a: a ** 3,
    "transpose": lambda a: a.T,
    "reshape": lambda a: a.reshape(a.size),
    "mean0": lambda a: a.mean(axis=0),
    "sum1k": lambda a: a.sum(axis=1, keepdims=True),
    "sum_points": T.sum_points,
    "softmax": lambda a: T.softmax_temp(a, 0.7),
    "take": lambda a: a[1:, ::2],
    # floor chosen away from every input so the stencil never straddles the kink
    "clamp": lambda a: T.clamp_min(a, 0.6),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a = leaf(rng, 3, 4)
    op = UNARY[name]
    r = Tensor(rng.standard_normal(op(a).shape))
    (res,) = check_gradients(lambda: (op(a) * r).sum(), [("a", a)])
    assert res.max_rel_error < 1e-4


BINARY = {
    "add_broadcast": lambda a, b: a + b[0],
    "sub": lambda a, b: a - b,
    "mul_broadcast": lambda a, b: a * b[:, :1],
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: a @ b.T,
    "linear": lambda a, b: T.linear(a, b.T, b[0, :3]),
    "concat": lambda a, b: T.concat([a, b], axis=1),
    "stack": lambda a, b: T.stack([a, b], axis=0),
    "softmax_tau": lambda a, b: T.softmax_temp(a, T.exp(b[:, :1])),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_op_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    op = BINARY[name]
    r = Tensor(rng.standard_normal(op(a, b).shape))
    results = check_gradients(lambda: (op(a, b) * r).sum(), [("a", a), ("b", b)])
    assert max(res.max_rel_error for res in results) < 1e-4


def test_softmax_temperature_gradient_against_fd():
    rng = np.random.default_rng(5)
    logits, tau = leaf(rng, 6, 4), Tensor(rng.uniform(0.2, 1.5, (6, 1)), requires_grad=True)
    r = Tensor(rng.standard_normal((6, 4)))
    results = check_gradients(lambda: (T.softmax_temp(logits, tau) * r).sum(),
                              [("logits", logits), ("tau", tau)])
    assert max(res.max_rel_error for res in results) < 1e-4


def test_sum_points_is_permutation_invariant_bitwise():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((101, 3, 2)) * 10.0 ** rng.integers(-6, 6, (101, 1, 1))
    perm = rng.permutation(101)
    a = T.sum_points(Tensor(x)).data
    b = T.sum_points(Tensor(x[perm])).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, x.sum(axis=0), rtol=1e-10, atol=1e-10)


CHAIN_OPS = [UNARY["exp"], UNARY["gelu"], UNARY["softmax"], UNARY["sqrt"], lambda a: a * a, lambda a: a @ a.T]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, len(CHAIN_OPS) - 1), st.integers(0, len(CHAIN_OPS) - 1), st.integers(0, 2**31))
def test_two_op_chain_matches_composed_vjps(i, j, seed):
    rng = np.random.default_rng(seed)
    f, g = CHAIN_OPS[i], CHAIN_OPS[j]
    x0 = rng.standard_normal((3, 3)) * 0.5
    x = Tensor(x0, requires_grad=True)
    r = rng.standard_normal(g(f(Tensor(x0))).shape)
    (g(f(x)) * Tensor(r)).sum().backward()
    # composing separately: VJP of g at y=f(x), then VJP of f seeded with it
    y = Tensor(f(Tensor(x0)).data, requires_grad=True)
    (g(y) * Tensor(r)).sum().backward()
    x2 = Tensor(x0, requires_grad=True)
    (f(x2) * Tensor(y.grad)).sum().backward()
    np.testing.assert_allclose(x.grad, x2.grad, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k,m", [(32, 1), (32, 2), (8, 1), (3, 32)])
def test_matmul_rows_independent_of_position_and_count(k, m):
    rng = np.random.default_rng(k * 100 + m)
    W = T.Tensor(rng.standard_normal((k, m)))
    for n in (5, 17, 33, 70):
        A = rng.standard_normal((n, k))
        full = (T.Tensor(A) @ W).data
        perm = rng.permutation(n)
        np.testing.assert_array_equal((T.Tensor(A[perm]) @ W).data, full[perm])
        np.testing.assert_array_equal((T.Tensor(A[n // 3:]) @ W).data, full[n // 3:])
