import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from topksgd.vecmath import (
    InvalidParameterError,
    SparseVector,
    aggregate_fixed_order,
    densify,
    gamma,
    residual,
    sparsify,
    top_k,
)


def sort_topk(v, K):
    """Reference: stable sort by descending magnitude, drop zeros."""
    order = sorted(range(len(v)), key=lambda i: (-abs(v[i]), i))
    keep = [i for i in order[:K] if v[i] != 0]
    return sorted((i, float(v[i])) for i in keep)


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def test_top_k_examples():
    assert top_k([3, -5, 1, 0], 2).entries() == [(0, 3.0), (1, -5.0)]
    assert top_k([2, -2, 1], 1).entries() == [(0, 2.0)]
    v = np.array([0.5, 0.0, -2.0, 7.0])
    np.testing.assert_array_equal(densify(top_k(v, 4)), v)


def test_top_k_never_emits_zero():
    assert top_k([0, 0, 4, 0], 3).entries() == [(2, 4.0)]
    assert top_k(np.zeros(5), 2).nnz == 0


@pytest.mark.parametrize("K", [0, 5])
def test_top_k_rejects_bad_k(K):
    with pytest.raises(InvalidParameterError):
        top_k([1.0, 2.0, 3.0, 4.0], K)


def test_top_k_rejects_nonfinite():
    with pytest.raises(InvalidParameterError):
        top_k([1.0, np.nan], 1)


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, st.integers(1, 24), elements=st.sampled_from([0.0, 1.0, -1.0, 2.0, -2.5, 3.0])), st.data())
def test_top_k_matches_stable_sort_with_ties(v, data):
    K = data.draw(st.integers(1, v.size))
    assert top_k(v, K).entries() == sort_topk(v, K)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 64), elements=finite), st.data())
def test_top_k_idempotent(v, data):
    K = data.draw(st.integers(1, v.size))
    once = top_k(v, K)
    assert top_k(densify(once), K) == once


def test_residual_examples():
    np.testing.assert_array_equal(residual([3, -5, 1, 0], 2), [0, 0, 1, 0])
    np.testing.assert_array_equal(residual(np.zeros(6), 3), np.zeros(6))


def test_residual_tight_on_uniform_vectors():
    # brute force over small uniform vectors, all sign patterns
    for n in range(1, 7):
        for signs in itertools.product((1.0, -1.0), repeat=n):
            v = 1.7 * np.array(signs)
            for K in range(1, n + 1):
                r = residual(v, K)
                assert np.linalg.norm(r) == pytest.approx(gamma(n, K) * np.linalg.norm(v), rel=1e-14)
    v = np.ones(4)
    assert np.linalg.norm(residual(v, 1)) == pytest.approx(np.sqrt(3))


def test_residual_bounds_random():
    g = np.random.default_rng(0)
    for _ in range(2000):
        n = int(g.integers(1, 257))
        K = int(g.integers(1, n + 1))
        v = g.standard_normal(n) * g.exponential(size=n)
        r = residual(v, K)
        assert np.linalg.norm(r) <= gamma(n, K) * np.linalg.norm(v) + 1e-12
        assert np.abs(r).sum() <= (n - K) / n * np.abs(v).sum() + 1e-12


def test_residual_monotone_in_k():
    v = np.random.default_rng(1).standard_normal(50)
    norms = [np.linalg.norm(residual(v, K)) for K in range(1, 51)]
    assert all(a >= b for a, b in zip(norms, norms[1:]))
    assert norms[-1] == 0.0


def test_gamma():
    assert gamma(4, 4) == 0.0
    assert gamma(4, 3) == 0.5
    assert 0 <= gamma(1000, 1) < 1


def test_sparse_vector_invariants():
    with pytest.raises(InvalidParameterError):
        SparseVector([2, 1], [1.0, 1.0], 4)
    with pytest.raises(InvalidParameterError):
        SparseVector([1, 1], [1.0, 1.0], 4)
    with pytest.raises(InvalidParameterError):
        SparseVector([4], [1.0], 4)
    with pytest.raises(InvalidParameterError):
        SparseVector([0], [0.0], 4)
    sv = SparseVector([0, 3], [1.5, -2.0], 4)
    assert sparsify(densify(sv)) == sv


def test_aggregate_examples():
    sv = SparseVector([1], [4.0], 3)
    np.testing.assert_array_equal(aggregate_fixed_order([sv], 1), [0, 4, 0])
    a = SparseVector([0], [-1001.0], 2)
    b = SparseVector([0], [1001.0], 2)
    np.testing.assert_array_equal(aggregate_fixed_order([a, b], 2), [0.0, 0.0])
    np.testing.assert_array_equal(aggregate_fixed_order([sv] * 5, 5), densify(sv))


def test_aggregate_errors():
    with pytest.raises(InvalidParameterError):
        aggregate_fixed_order([SparseVector([0], [1.0], 2), SparseVector([0], [1.0], 3)], 2)
    with pytest.raises(InvalidParameterError):
        aggregate_fixed_order([SparseVector([0], [1.0], 2)], 2)


def test_aggregate_reproducible():
    g = np.random.default_rng(5)
    ups = [top_k(g.standard_normal(100) * 1e3, 17) for _ in range(8)]
    a = aggregate_fixed_order(ups, 8)
    b = aggregate_fixed_order(ups, 8)
    assert a.tobytes() == b.tobytes()
