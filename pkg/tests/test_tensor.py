import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stsun import _kernels as K
from stsun import tensor as T
from stsun.gradcheck import grad_check
from stsun.tensor import GraphError, NonFiniteError, ParameterStore, Tensor, no_grad


def test_matmul_hand_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_identity(rng):
    x = rng.standard_normal((2, 5))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_of_sum_is_row_sums_of_b(rng):
    b = rng.standard_normal((3, 4))
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    T.sum_(T.matmul(a, Tensor(b))).backward()
    expected = np.ones((2, 4)) @ b.T
    np.testing.assert_allclose(a.grad, expected, atol=1e-14)
    assert grad_check(lambda x: T.sum_(T.matmul(x, Tensor(b))), a) < 1e-8


def test_softmax_examples():
    out = T.softmax_rows(Tensor([[0.0, 0.0], [1.0, 0.0], [1000.0, 0.0]])).data
    e = math.e
    np.testing.assert_allclose(out[0], [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(out[1], [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    np.testing.assert_array_equal(out[2], [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
              elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax_rows(Tensor(x)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_layernorm_examples():
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    # mean 2, population std 1; the default epsilon sits inside the square root
    np.testing.assert_allclose(T.layernorm(Tensor([[1.0, 3.0]]), g, b, eps=0.0).data, [[-1.0, 1.0]], atol=1e-12)
    expected = np.array([[-1.0, 1.0]]) / math.sqrt(1.0 + T.LN_EPS)
    np.testing.assert_allclose(T.layernorm(Tensor([[1.0, 3.0]]), g, b).data, expected, atol=1e-12)
    np.testing.assert_array_equal(T.layernorm(Tensor([[5.0, 5.0]]), g, b).data, [[0.0, 0.0]])


def test_elementwise_basics(rng):
    assert T.sigmoid(Tensor([0.0])).item() == 0.5
    x = Tensor(rng.standard_normal((2, 3, 4, 5)))
    np.testing.assert_array_equal(x.reshape(6, 20).reshape(2, 3, 4, 5).data, x.data)
    y = x.permute(1, 0, 2, 3).permute(1, 0, 2, 3)
    np.testing.assert_array_equal(y.data, x.data)
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    with pytest.raises(ValueError):
        x.reshape(7, 3)


def test_zero_extent_rejected():
    with pytest.raises(ValueError):
        Tensor(np.zeros((0, 3)))


def test_non_finite_surfaces_as_error():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1e4]))


def test_backward_twice_is_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.sum_(T.square(x))
    y.backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])
    with pytest.raises(GraphError):
        y.backward()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = T.square(x)
    assert not y.requires_grad


def test_backward_reverse_topological_order():
    # diamond graph: x feeds two branches that meet again
    x = Tensor([3.0], requires_grad=True)
    a = x * 2.0
    b = T.square(x)
    (a * b).sum().backward()
    # d/dx (2x * x^2) = 6 x^2
    np.testing.assert_allclose(x.grad, [54.0])


def test_grad_check_sum_of_squares(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    assert grad_check(lambda t: T.sum_(T.square(t)), x) < 1e-8


def test_grad_check_rejects_non_scalar():
    with pytest.raises(ValueError):
        grad_check(lambda t: T.square(t), Tensor([1.0, 2.0]))


def test_grad_check_negative_control(rng):
    def broken_square(x):
        # backward claims d/dx x^2 = x instead of 2x
        return T._make(x.data ** 2, (x,), lambda g: (g * x.data,), "broken")

    x = Tensor(rng.standard_normal(5) + 2.0)
    assert grad_check(lambda t: T.sum_(broken_square(t)), x) > 1e-2


def test_sdpa_matches_naive(rng):
    x = rng.standard_normal((2, 5, 12))
    out = T.sdpa(Tensor(x), heads=2).data
    q, k, v = np.split(x, 3, axis=-1)
    ref = []
    for h in range(2):
        sl = slice(2 * h, 2 * h + 2)
        s = q[..., sl] @ np.swapaxes(k[..., sl], -1, -2) / math.sqrt(2)
        p = np.exp(s - s.max(-1, keepdims=True))
        p /= p.sum(-1, keepdims=True)
        ref.append(p @ v[..., sl])
    np.testing.assert_allclose(out, np.concatenate(ref, axis=-1), atol=1e-13)


def test_parameter_store_sorted_and_seeded():
    a, b = ParameterStore(3), ParameterStore(3)
    for s in (a, b):
        s.normal("z", (3,))
        s.normal("a", (2, 2))
    assert list(a) == ["a", "z"]
    for (n1, t1), (n2, t2) in zip(a.items(), b.items()):
        assert n1 == n2
        np.testing.assert_array_equal(t1.data, t2.data)
    with pytest.raises(KeyError):
        a.normal("a", (1,))


def test_parameter_values_independent_of_creation_order():
    a, b = ParameterStore(0), ParameterStore(0)
    a.normal("x", (4,)); a.normal("y", (4,))
    b.normal("y", (4,)); b.normal("x", (4,))
    np.testing.assert_array_equal(a["x"].data, b["x"].data)


# numpy and numba kernels must agree

@pytest.mark.skipif(not K.NUMBA_AVAILABLE, reason="numba not importable")
def test_kernel_backends_agree(rng):
    x = rng.standard_normal((37, 19))
    g = rng.standard_normal(x.shape)
    gamma, beta = rng.standard_normal(19), rng.standard_normal(19)
    np.testing.assert_allclose(K.softmax_rows_numba(x), K.softmax_rows_numpy(x), rtol=1e-13, atol=1e-15)
    y = K.softmax_rows_numpy(x)
    np.testing.assert_allclose(K.softmax_rows_grad_numba(y, g), K.softmax_rows_grad_numpy(y, g), atol=1e-13)
    ln_a, ln_b = K.layernorm_rows_numba(x, gamma, beta, 1e-5), K.layernorm_rows_numpy(x, gamma, beta, 1e-5)
    for u, v in zip(ln_a, ln_b):
        np.testing.assert_allclose(u, v, atol=1e-12)
    _, xhat, rstd = ln_b
    for u, v in zip(K.layernorm_rows_grad_numba(g, xhat, rstd, gamma),
                    K.layernorm_rows_grad_numpy(g, xhat, rstd, gamma)):
        np.testing.assert_allclose(u, v, atol=1e-12)
    flat = x.reshape(-1)
    np.testing.assert_allclose(K.gelu_numba(flat), K.gelu_numpy(flat), atol=1e-14)
    np.testing.assert_allclose(K.gelu_grad_numba(flat, g.reshape(-1)), K.gelu_grad_numpy(flat, g.reshape(-1)),
                               atol=1e-14)
    rows = rng.standard_normal((3, 9, 4))
    idx = rng.integers(0, 9, 14)
    w = rng.random(14)
    np.testing.assert_array_equal(K.gather_rows_numba(rows, idx), K.gather_rows_numpy(rows, idx))
    ys = rng.standard_normal((3, 14, 4))
    np.testing.assert_allclose(K.scatter_rows_numba(ys, idx, w, 9), K.scatter_rows_numpy(ys, idx, w, 9),
                               atol=1e-14)


def test_backend_flag_selects_numpy():
    out = subprocess.run([sys.executable, "-c", "from stsun import _kernels as K; print(K.BACKEND)"],
                         env={**os.environ, "STSUN_NUMBA": "0"}, capture_output=True, text=True)
    assert out.stdout.strip() == "numpy"


def test_ops_deterministic(rng):
    x = rng.standard_normal((2, 6, 18))
    a = T.sdpa(Tensor(x), 3).data
    b = T.sdpa(Tensor(x), 3).data
    assert a.tobytes() == b.tobytes()
