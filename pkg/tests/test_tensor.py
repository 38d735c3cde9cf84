import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moe_workbench.exceptions import ShapeError
from moe_workbench.tensor import linear, matmul, rmsnorm, silu, softmax_rows, topk_row, topk_rows


def naive_matmul(a, b):
    n, m = a.shape
    p = b.shape[1]
    out = np.zeros((n, p), dtype=np.float32)
    for i in range(n):
        for j in range(p):
            acc = np.float32(0)
            for k in range(m):
                acc = np.float32(acc + np.float32(a[i, k] * b[k, j]))
            out[i, j] = acc
    return out


def test_matmul_matches_naive_loop_bitwise(rng):
    a = rng.standard_normal((5, 7)).astype(np.float32)
    b = rng.standard_normal((7, 3)).astype(np.float32)
    assert np.array_equal(matmul(a, b), naive_matmul(a, b))


def test_matmul_small_example():
    a = np.array([[1, 2], [3, 4]], dtype=np.float32)
    b = np.array([[5, 6], [7, 8]], dtype=np.float32)
    assert matmul(a, b).tolist() == [[19, 22], [43, 50]]


def test_matmul_rows_independent_of_batch(rng):
    a = rng.standard_normal((9, 16)).astype(np.float32)
    b = rng.standard_normal((16, 4)).astype(np.float32)
    full = matmul(a, b)
    for i in range(9):
        assert np.array_equal(matmul(a[i : i + 1], b)[0], full[i])


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.ones(3), np.ones((3, 1)))
    with pytest.raises(ShapeError):
        matmul(np.ones((0, 3)), np.ones((3, 1)))


def test_linear_is_x_wt(rng):
    x = rng.standard_normal((4, 6)).astype(np.float32)
    w = rng.standard_normal((3, 6)).astype(np.float32)
    np.testing.assert_allclose(linear(x, w), x @ w.T, rtol=1e-5, atol=1e-5)


def test_softmax_rows_known_values():
    s = softmax_rows(np.array([[0.0, 0.0], [0.0, np.log(3.0)]]))
    np.testing.assert_allclose(s, [[0.5, 0.5], [0.25, 0.75]], rtol=1e-6)
    assert s.dtype == np.float32


def test_softmax_large_logits_stable():
    s = softmax_rows(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.isfinite(s).all()
    np.testing.assert_allclose(s[0], [1, 0, 0], atol=1e-7)


def test_topk_ties_go_to_lowest_index():
    assert topk_row([0.5, 0.9, 0.9, 0.1], 2) == [1, 2]
    assert topk_rows(np.array([[1.0, 1.0, 1.0]]), 2).tolist() == [[0, 1]]
    with pytest.raises(ValueError):
        topk_rows(np.zeros((1, 3)), 4)


def test_rmsnorm_example():
    y = rmsnorm(np.array([3.0, 4.0]), np.ones(2), eps=0.0)
    np.testing.assert_allclose(y, np.array([3, 4]) / np.sqrt(12.5), rtol=1e-6)


def test_rmsnorm_zero_vector_stays_zero():
    assert np.array_equal(rmsnorm(np.zeros((2, 4)), np.ones(4), eps=0.0), np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        rmsnorm(np.ones(3), np.ones(4))


def test_silu_values():
    np.testing.assert_allclose(silu(np.array([0.0, 1.0, -1.0])), [0.0, 1 / (1 + np.exp(-1)), -1 / (1 + np.exp(1))], rtol=1e-6)
    assert np.isfinite(silu(np.array([-200.0, 200.0]))).all()


finite = st.floats(-50, 50, allow_nan=False, width=32)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 9)), elements=finite))
def test_softmax_rows_sum_to_one(m):
    s = softmax_rows(m)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=1e-5)
    assert (s >= 0).all()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=st.integers(-3, 3).map(np.float32)))
def test_topk_matches_sorted_reference(m):
    k = m.shape[1] // 2
    idx = topk_rows(m, k)
    for row, got in zip(m, idx):
        ref = sorted(range(len(row)), key=lambda i: (-row[i], i))[:k]
        assert got.tolist() == ref
