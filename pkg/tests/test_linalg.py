import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dern.errors import DimensionError
from dern.linalg import cosine, cosine_matrix, dot, l2_norm, linf_norm, matvec


def naive_dot(a, b):
    total = 0.0
    for x, y in zip(a, b):
        total += float(x) * float(y)
    return total


def test_dot_examples():
    assert dot([1, 0], [0, 1]) == 0.0
    assert dot([1, 2, 3], [1, 2, 3]) == 14.0


def test_dot_matches_loop(rng):
    a = rng.standard_normal(64).astype(np.float32)
    b = rng.standard_normal(64).astype(np.float32)
    assert dot(a, b) == pytest.approx(naive_dot(a, b), rel=1e-6)


def test_dot_length_mismatch():
    with pytest.raises(DimensionError):
        dot([1, 2], [1, 2, 3])


def test_l2_norm_examples(rng):
    assert l2_norm([0, 0, 0]) == 0.0
    assert l2_norm([3, 4]) == 5.0
    a = rng.standard_normal(50).astype(np.float32)
    assert l2_norm(a) == pytest.approx(math.sqrt(naive_dot(a, a)), rel=1e-6)


def test_cosine_examples():
    v = np.array([0.3, -1.2, 2.0], dtype=np.float32)
    assert cosine(v, v) == pytest.approx(1.0, abs=1e-12)
    assert cosine([1, 0], [-1, 0]) == -1.0
    assert cosine([1, 0], [0, 0]) == 0.0
    with pytest.raises(DimensionError):
        cosine([1, 0], [1, 0, 0])


def test_linf_norm(rng):
    assert linf_norm([-5, 2, 3]) == 5.0
    assert linf_norm([0, 0]) == 0.0
    a = rng.standard_normal(33).astype(np.float32)
    best = 0.0
    for x in a:
        best = max(best, abs(float(x)))
    assert linf_norm(a) == best


def test_matvec_examples(rng):
    np.testing.assert_array_equal(matvec(np.eye(3), [1, 2, 3]), [1, 2, 3])
    np.testing.assert_array_equal(matvec(np.zeros((2, 3)), [1, 2, 3]), [0, 0])
    m = rng.standard_normal((8, 4)).astype(np.float32)
    x = rng.standard_normal(4).astype(np.float32)
    expected = [naive_dot(row, x) for row in m]
    np.testing.assert_allclose(matvec(m, x), expected, rtol=1e-6)
    with pytest.raises(DimensionError):
        matvec(m, np.ones(5))


def test_cosine_matrix_matches_scalar(rng):
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((4, 7))
    b[2] = 0
    cm = cosine_matrix(a, b)
    for i in range(5):
        for j in range(4):
            assert cm[i, j] == pytest.approx(cosine(a[i], b[j]), abs=1e-6)


finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)
pairs = st.integers(1, 16).flatmap(
    lambda n: st.tuples(arrays(np.float32, n, elements=finite), arrays(np.float32, n, elements=finite))
)


@given(pairs, st.floats(1e-3, 1e3))
@settings(max_examples=200, deadline=None)
def test_cosine_properties(ab, c):
    a, b = ab
    s = cosine(a, b)
    assert -1.0 <= s <= 1.0
    assert s == cosine(b, a)
    if l2_norm(a) > 1e-3 and l2_norm(b) > 1e-3:
        assert cosine(np.float32(c) * a, b) == pytest.approx(s, abs=1e-5)


@given(arrays(np.float32, st.integers(1, 16), elements=finite))
def test_zero_norm_iff_zero_vector(a):
    assert (l2_norm(a) == 0.0) == (not np.any(a))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=50)
def test_matvec_distributes(seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((6, 5)).astype(np.float32)
    x = rng.standard_normal(5).astype(np.float32)
    y = rng.standard_normal(5).astype(np.float32)
    lhs = matvec(m, x + y)
    rhs = matvec(m, x) + matvec(m, y)
    scale = np.abs(m).astype(np.float64) @ (np.abs(x) + np.abs(y))
    assert np.all(np.abs(lhs - rhs) <= 1e-5 * scale)
