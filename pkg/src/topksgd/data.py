"""Synthetic problems, LIBSVM ingestion, and node partitioning."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import rng as rngmod
from .objectives import LeastSquaresProblem, LogisticProblem
from .vecmath import InvalidParameterError


class LibSVMParseError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = str(path)
        self.lineno = lineno


@dataclass(frozen=True)
class Shard:
    node_id: int
    sample_indices: np.ndarray

    def __len__(self):
        return int(self.sample_indices.size)


def synth_regression(m=10000, n=1024, noise_sigma=0.1, seed=42, l2_reg=0.0):
    """Gaussian design, Gaussian ground truth, Gaussian label noise."""
    if m < 1 or n < 1:
        raise InvalidParameterError("m and n must be >= 1")
    if noise_sigma < 0:
        raise InvalidParameterError("noise_sigma must be >= 0")
    g = rngmod.stream(seed, lane=0, domain=rngmod.DATA)
    A = g.standard_normal((m, n))
    x_true = g.standard_normal(n)
    b = A @ x_true + noise_sigma * g.standard_normal(m)
    problem = LeastSquaresProblem(A, b, l2_reg, x_true=x_true)
    problem.seed = seed
    problem.noise_sigma = noise_sigma
    return problem


def partition(m, P, seed=0, mode="contiguous"):
    """Split ``range(m)`` into P balanced disjoint shards.

    Sizes differ by at most one; the lowest-numbered shards take the
    remainder. ``shuffled`` permutes the indices with the seeded stream first.
    """
    if not 1 <= P <= m:
        raise InvalidParameterError(f"need 1 <= P <= m, got P={P}, m={m}")
    if mode == "contiguous":
        order = np.arange(m)
    elif mode == "shuffled":
        order = rngmod.stream(seed, domain=rngmod.PARTITION).permutation(m)
    else:
        raise InvalidParameterError(f"unknown partition mode {mode!r}")
    base, extra = divmod(m, P)
    shards, start = [], 0
    for p in range(P):
        size = base + (1 if p < extra else 0)
        idx = np.sort(order[start : start + size])
        idx.setflags(write=False)
        shards.append(Shard(p, idx))
        start += size
    return shards


def read_libsvm(path, n_features=None):
    """Parse a LIBSVM/SVMlight text file into ``(csr_matrix, labels)``.

    Indices are 1-based in the file and 0-based in the result; ``#`` starts a
    comment. Errors carry the offending line number.
    """
    path = Path(path)
    rows, cols, vals, labels = [], [], [], []
    max_idx = 0
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            try:
                label = float(tokens[0])
            except ValueError:
                raise LibSVMParseError(path, lineno, f"bad label {tokens[0]!r}") from None
            row = len(labels)
            last = 0
            for tok in tokens[1:]:
                idx_s, sep, val_s = tok.partition(":")
                if not sep:
                    raise LibSVMParseError(path, lineno, f"expected index:value, got {tok!r}")
                try:
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise LibSVMParseError(path, lineno, f"non-numeric entry {tok!r}") from None
                if idx <= 0:
                    raise LibSVMParseError(path, lineno, f"index must be >= 1, got {idx}")
                if idx <= last:
                    raise LibSVMParseError(path, lineno, "indices must be strictly increasing")
                if not np.isfinite(val):
                    raise LibSVMParseError(path, lineno, f"non-finite value {tok!r}")
                last = idx
                rows.append(row)
                cols.append(idx - 1)
                vals.append(val)
            max_idx = max(max_idx, last)
            labels.append(label)
    if not labels:
        raise LibSVMParseError(path, 0, "file contains no samples")
    n = max_idx if n_features is None else int(n_features)
    if n < max_idx:
        raise InvalidParameterError(f"n_features={n} but file uses index {max_idx}")
    X = sp.csr_matrix((vals, (rows, cols)), shape=(len(labels), n), dtype=np.float64)
    return X, np.asarray(labels)


def binary_labels(y):
    """Map a {0,1} or {-1,+1} label alphabet onto {-1,+1}."""
    values = set(np.unique(y).tolist())
    if values <= {-1.0, 1.0}:
        return np.asarray(y, dtype=np.float64)
    if values <= {0.0, 1.0}:
        return np.where(np.asarray(y) > 0, 1.0, -1.0)
    raise InvalidParameterError(f"unsupported label alphabet {sorted(values)}")


def load_libsvm(path, l2_reg=1e-4, n_features=None):
    X, y = read_libsvm(path, n_features)
    try:
        labels = binary_labels(y)
    except InvalidParameterError as exc:
        raise LibSVMParseError(path, 0, str(exc)) from None
    empty = np.flatnonzero(np.diff(X.indptr) == 0)
    if empty.size:
        raise LibSVMParseError(path, _data_line(path, int(empty[0])), "sample has no features")
    return LogisticProblem(X, labels, l2_reg)


def _data_line(path, row):
    with open(path) as fh:
        seen = -1
        for lineno, raw in enumerate(fh, start=1):
            if raw.split("#", 1)[0].strip():
                seen += 1
                if seen == row:
                    return lineno
    return 0


def write_libsvm(path, X, y, header=None):
    """Write rows as ``label idx:val ...`` with 1-based indices.

    ``header`` (a JSON-serializable dict) is written as a leading comment.
    Values use ``repr`` so a reload reproduces them exactly.
    """
    X = sp.csr_matrix(X)
    with open(path, "w") as fh:
        if header is not None:
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        for i in range(X.shape[0]):
            lo, hi = X.indptr[i], X.indptr[i + 1]
            feats = " ".join(f"{j + 1}:{v!r}" for j, v in zip(X.indices[lo:hi], X.data[lo:hi].tolist()))
            label = y[i]
            label_s = str(int(label)) if float(label).is_integer() else repr(float(label))
            fh.write(f"{label_s} {feats}".rstrip() + "\n")


def save_synthetic(problem, path):
    """Serialize a synthetic regression problem with a provenance header."""
    header = {
        "seed": getattr(problem, "seed", None),
        "noise_sigma": getattr(problem, "noise_sigma", None),
        "x_true": None if problem.x_true is None else problem.x_true.tolist(),
    }
    write_libsvm(path, problem.design, problem.targets, header)


def read_header(path):
    """The JSON provenance header of a file written by ``write_libsvm``."""
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("# {"):
        return json.loads(first[2:])
    return None
