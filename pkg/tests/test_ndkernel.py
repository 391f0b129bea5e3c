import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pandora import _jit
from pandora import ndkernel as nk
from pandora.errors import AllExcluded, ShapeError


def triple_loop(a, b):
    n, m = a.shape
    p = b.shape[1]
    out = [[0.0] * p for _ in range(n)]
    for i in range(n):
        for j in range(p):
            acc = 0.0
            for k in range(m):
                acc += float(a[i, k]) * float(b[k, j])
            out[i][j] = acc
    return np.array(out)


def test_matmul_identity():
    assert np.array_equal(nk.matmul([[1, 0], [0, 1]], [[3, 1], [2, 0]]), [[3, 1], [2, 0]])


def test_matmul_dot():
    assert np.array_equal(nk.matmul([[1, 2]], [[3], [4]]), [[11.0]])


def test_matmul_random_matches_loop(rng):
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    # same accumulation order as the scalar loop, so equality is exact
    assert np.array_equal(nk.matmul(a, b), triple_loop(a, b))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        nk.matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_matmul_integer_inputs_exact(n, m, p, seed):
    r = np.random.default_rng(seed)
    a = r.integers(-50, 50, (n, m)).astype(float)
    b = r.integers(-50, 50, (m, p)).astype(float)
    assert np.array_equal(nk.matmul(a, b), triple_loop(a, b))


@pytest.mark.parametrize("n", [1, 16, 64])
def test_matmul_relative_error_up_to_64(n, rng):
    a, b = rng.normal(size=(n, n)), rng.normal(size=(n, n))
    ref = triple_loop(a, b)
    assert np.max(np.abs(nk.matmul(a, b) - ref) / np.maximum(np.abs(ref), 1e-300)) <= 1e-10


def test_matmul_deterministic(rng):
    a, b = rng.normal(size=(33, 17)), rng.normal(size=(17, 29))
    assert nk.matmul(a, b).tobytes() == nk.matmul(a, b).tobytes()


def test_softmax_uniform():
    np.testing.assert_allclose(nk.softmax_row([0, 0, 0]), [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_with_sentinels():
    out = nk.softmax_row([-np.inf, 1, 2, -np.inf])
    # e/(e+e^2) and e^2/(e+e^2)
    np.testing.assert_allclose(out, [0.0, 0.2689414213699951, 0.7310585786300048, 0.0], rtol=0, atol=1e-15)
    assert out[0] == 0.0 and out[3] == 0.0


def test_softmax_all_excluded():
    with pytest.raises(AllExcluded):
        nk.softmax_row([-np.inf, -np.inf])


def test_softmax_rows_names_bad_row():
    with pytest.raises(AllExcluded) as info:
        nk.softmax_rows([[0.0, 1.0], [-np.inf, -np.inf]])
    assert info.value.row == 1


def test_softmax_rejects_nan():
    with pytest.raises(ValueError):
        nk.softmax_row([0.0, np.nan])


def test_softmax_large_logits_stable():
    out = nk.softmax_row([1000.0, 999.0, -np.inf])
    assert np.all(np.isfinite(out))
    assert out[0] > out[1] > out[2] == 0.0


rows_with_sentinels = arrays(
    np.float64,
    st.integers(1, 64),
    elements=st.one_of(st.floats(-50, 50), st.just(-np.inf)),
).filter(lambda r: np.any(r != -np.inf))


@settings(max_examples=200, deadline=None)
@given(rows_with_sentinels)
def test_softmax_sums_to_one(row):
    out = nk.softmax_row(row)
    assert np.all(out >= 0.0)
    assert abs(math.fsum(out) - 1.0) <= 1e-12
    assert np.all(out[row == -np.inf] == 0.0)


@settings(max_examples=200, deadline=None)
@given(rows_with_sentinels, st.floats(-100, 100))
def test_softmax_shift_invariant(row, c):
    shifted = np.where(row == -np.inf, row, row + c)
    np.testing.assert_allclose(nk.softmax_row(shifted), nk.softmax_row(row), rtol=0, atol=1e-10)


def test_scale_examples():
    assert np.array_equal(nk.scale([[2, 4]], 0.5), [[1, 2]])
    assert np.array_equal(nk.scale([[-np.inf, 3]], 2), [[-np.inf, 6]])
    assert np.array_equal(nk.scale([[-np.inf, 3]], -2), [[-np.inf, -6]])


def test_scale_matches_loop(rng):
    a = rng.normal(size=(3, 3))
    s = 1 / math.sqrt(64)
    out = nk.scale(a, s)
    for i in range(3):
        for j in range(3):
            assert out[i, j] == a[i, j] * s


@pytest.mark.parametrize("s", [0.0, np.inf, np.nan])
def test_scale_rejects_bad_factor(s):
    with pytest.raises(ValueError):
        nk.scale([[1.0]], s)


def test_topk_row_basic():
    assert nk.topk_row(np.array([0.1, 0.6, 0.3]), 1).tolist() == [1]
    assert nk.topk_row(np.full(4, 0.25), 2).tolist() == [0, 1]
    assert nk.topk_row(np.array([1.0, 2.0]), 0).tolist() == []


def test_dissolve_rows_reports_dead_row():
    s = np.zeros((2, 2))
    # top-1 of a tied row is key 0, already excluded, so key 1 survives
    _, _, bad = nk.dissolve_rows(s, np.array([1]), np.array([True, False]), 1)
    assert bad == -1
    _, _, bad = nk.dissolve_rows(s, np.array([1]), np.array([True, False]), 2)
    assert bad == 1


@pytest.mark.skipif(not _jit.HAVE_NUMBA, reason="numba not installed")
class TestBackendsAgree:
    def test_matmul_bitwise(self, rng):
        a, b = rng.normal(size=(20, 13)), rng.normal(size=(13, 9))
        assert np.array_equal(nk._matmul_nb(a, b), nk._matmul_np(a, b))

    def test_softmax(self, rng):
        x = rng.normal(0, 4, size=(30, 40))
        x[rng.random(x.shape) < 0.3] = -np.inf
        x[:, 0] = 0.0
        a, bad_a = nk._softmax_rows_nb(x)
        b, bad_b = nk._softmax_rows_np(x)
        assert bad_a == bad_b == -1
        np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-300)

    def test_topk(self, rng):
        for _ in range(50):
            row = rng.integers(0, 4, 37) / 3.0
            k = int(rng.integers(0, 38))
            nb = nk._topk_row_nb(row, np.int64(k)) if k else np.empty(0, np.int64)
            assert nb.tolist() == nk._topk_row_np(row, k).tolist()

    def test_dissolve(self, rng):
        s = rng.normal(size=(25, 25))
        rows = np.array([0, 3, 4, 20])
        excl = rng.random(25) < 0.2
        a = nk._dissolve_rows_nb(s, rows, excl, np.int64(3))
        b = nk._dissolve_rows_np(s, rows, excl, 3)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) and a[2] == b[2]
