"""Dense/sparse vector helpers and the TopK truncation operator.

Dense vectors are plain 1-D float64 numpy arrays. Sparse vectors carry sorted
unique indices and nonzero values alongside their ambient dimension.
"""

from dataclasses import dataclass

import numpy as np


class InvalidParameterError(ValueError):
    """Raised when an operator receives an argument outside its domain."""


def as_dense(v, n=None):
    """Validate ``v`` as a finite 1-D float64 vector (optionally of length n)."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidParameterError(f"expected a 1-D vector, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise InvalidParameterError(f"expected length {n}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError("vector contains NaN or Inf")
    return arr


@dataclass(frozen=True, eq=False)
class SparseVector:
    """Index/value pairs over an ambient dimension.

    Indices are strictly increasing and no stored value is exactly zero.
    """

    indices: np.ndarray
    values: np.ndarray
    dim: int

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64).reshape(-1)
        val = np.array(self.values, dtype=np.float64).reshape(-1)
        dim = int(self.dim)
        if idx.shape != val.shape:
            raise InvalidParameterError("indices and values differ in length")
        if dim < 1:
            raise InvalidParameterError(f"ambient dimension must be >= 1, got {dim}")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= dim:
                raise InvalidParameterError("index out of range")
            if np.any(np.diff(idx) <= 0):
                raise InvalidParameterError("indices must be strictly increasing")
        if np.any(val == 0.0):
            raise InvalidParameterError("sparse vectors never store exact zeros")
        if not np.all(np.isfinite(val)):
            raise InvalidParameterError("sparse vector contains NaN or Inf")
        idx.setflags(write=False)
        val.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)
        object.__setattr__(self, "dim", dim)

    @classmethod
    def _trusted(cls, indices, values, dim):
        """Build without validation; callers guarantee the invariants."""
        sv = object.__new__(cls)
        object.__setattr__(sv, "indices", indices)
        object.__setattr__(sv, "values", values)
        object.__setattr__(sv, "dim", dim)
        return sv

    @property
    def nnz(self):
        return int(self.indices.size)

    def entries(self):
        return list(zip(self.indices.tolist(), self.values.tolist()))

    def to_dense(self):
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def __eq__(self, other):
        if not isinstance(other, SparseVector):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self):
        return f"SparseVector(dim={self.dim}, entries={self.entries()})"


def densify(sv):
    return sv.to_dense()


def sparsify(v):
    """All nonzero entries of a dense vector."""
    v = as_dense(v)
    idx = np.flatnonzero(v)
    return SparseVector(idx, v[idx], v.shape[0])


def gamma(n, K):
    """Contraction factor sqrt((n - K) / n) of the TopK residual."""
    _check_k(n, K)
    return float(np.sqrt((n - K) / n))


def _check_k(n, K):
    if isinstance(K, (bool, np.bool_)) or int(K) != K:
        raise InvalidParameterError(f"K must be an integer, got {K!r}")
    if not 1 <= K <= n:
        raise InvalidParameterError(f"K must satisfy 1 <= K <= n={n}, got {K}")


def top_k_indices(v, K):
    """Sorted indices of the K largest-magnitude nonzero entries of ``v``.

    Equal magnitudes keep the lower index. Selection uses a partition around
    the K-th order statistic; the result matches a stable full sort.
    """
    n = v.shape[0]
    _check_k(n, K)
    mag = np.abs(v)
    nz = np.flatnonzero(mag)
    if nz.size <= K:
        return nz
    # K-th largest magnitude among all entries; it is > 0 because nnz > K
    thr = np.partition(mag, n - K)[n - K]
    above = np.flatnonzero(mag > thr)
    ties = np.flatnonzero(mag == thr)[: K - above.size]
    return np.sort(np.concatenate([above, ties]))


def top_k(v, K):
    """Keep the K largest-magnitude components of ``v`` as a SparseVector."""
    v = as_dense(v)
    idx = top_k_indices(v, K)
    return SparseVector._trusted(idx, v[idx], v.shape[0])


def residual(v, K):
    """``v - densify(top_k(v, K))``."""
    v = as_dense(v)
    out = v.copy()
    out[top_k_indices(v, K)] = 0.0
    return out


def aggregate_fixed_order(updates, P):
    """Average of P sparse updates, summed in ascending node order.

    The summation order is fixed so results are bit-identical regardless of
    how the updates were produced.
    """
    updates = list(updates)
    if P < 1 or len(updates) != P:
        raise InvalidParameterError(f"expected {P} updates, got {len(updates)}")
    dim = updates[0].dim
    if any(u.dim != dim for u in updates):
        raise InvalidParameterError("updates have mismatched ambient dimensions")
    total = np.zeros(dim)
    for u in updates:
        # indices are unique within an update, so fancy += is safe
        total[u.indices] += u.values
    return total / P
