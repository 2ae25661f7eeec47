"""Objectives with minibatch gradient oracles and known constants.

All empirical losses are means over samples, so minibatch gradients are means
over the batch and stay comparable across batch sizes.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from . import rng as rngmod
from .vecmath import InvalidParameterError, as_dense


class NotAvailableError(LookupError):
    """A quantity cannot be derived analytically for this problem kind."""


def _check_batch(batch, m):
    batch = np.asarray(batch, dtype=np.int64).reshape(-1)
    if batch.size == 0:
        raise InvalidParameterError("minibatch is empty")
    if batch.min() < 0 or batch.max() >= m:
        raise InvalidParameterError(f"minibatch index out of range [0, {m})")
    return batch


class LeastSquaresProblem:
    """``f(x) = (1/2m)||Ax - b||^2 + (lam/2)||x||^2``.

    Full-batch loss and gradient go through the cached Gram matrix ``A^T A/m``
    so traces can afford them at every step; minibatch gradients use the rows.
    """

    kind = "least_squares"

    def __init__(self, design, targets, l2_reg=0.0, *, solve_optimum=True, x_true=None):
        A = np.ascontiguousarray(design, dtype=np.float64)
        b = np.ascontiguousarray(targets, dtype=np.float64)
        if A.ndim != 2 or b.shape != (A.shape[0],):
            raise InvalidParameterError("design must be m x n and targets length m")
        if l2_reg < 0:
            raise InvalidParameterError("l2_reg must be >= 0")
        self.design = A
        self.targets = b
        self.l2_reg = float(l2_reg)
        self.x_true = None if x_true is None else as_dense(x_true, A.shape[1])
        m = A.shape[0]
        self._gram = A.T @ A / m
        self._atb = A.T @ b / m
        self._btb = float(b @ b) / m
        eig = np.linalg.eigvalsh(self._gram)
        self.strong_convexity_c = self.l2_reg + max(float(eig[0]), 0.0)
        self.smoothness_L = self.l2_reg + float(eig[-1])
        self.known_optimum = None
        if solve_optimum:
            H = self._gram + self.l2_reg * np.eye(self.n_features)
            if self.strong_convexity_c > 0:
                self.known_optimum = np.linalg.solve(H, self._atb)
            else:
                self.known_optimum = np.linalg.lstsq(H, self._atb, rcond=None)[0]

    @property
    def n_samples(self):
        return self.design.shape[0]

    @property
    def n_features(self):
        return self.design.shape[1]

    def loss(self, x):
        x = as_dense(x, self.n_features)
        gx = self._gram @ x
        val = 0.5 * (x @ gx) - self._atb @ x + 0.5 * self._btb
        return float(max(val, 0.0) + 0.5 * self.l2_reg * (x @ x))

    def loss_and_gradient(self, x):
        x = as_dense(x, self.n_features)
        gx = self._gram @ x
        val = 0.5 * (x @ gx) - self._atb @ x + 0.5 * self._btb
        loss = float(max(val, 0.0) + 0.5 * self.l2_reg * (x @ x))
        return loss, gx - self._atb + self.l2_reg * x

    def residual_loss(self, x):
        """Loss computed from the residual ``Ax - b`` directly (no Gram)."""
        x = as_dense(x, self.n_features)
        r = self.design @ x - self.targets
        return float(0.5 * (r @ r) / self.n_samples + 0.5 * self.l2_reg * (x @ x))

    def gradient(self, x):
        x = as_dense(x, self.n_features)
        return self._gram @ x - self._atb + self.l2_reg * x

    def grad_minibatch(self, x, batch, rng=None):
        batch = _check_batch(batch, self.n_samples)
        rows = self.design[batch]
        r = rows @ x - self.targets[batch]
        return rows.T @ r / batch.size + self.l2_reg * x

    def excess_loss(self, x):
        """``f(x) - f(x*)`` via the exact quadratic form around the optimum."""
        if self.known_optimum is None:
            raise NotAvailableError("optimum was not solved at construction")
        d = as_dense(x, self.n_features) - self.known_optimum
        return float(0.5 * d @ (self._gram @ d) + 0.5 * self.l2_reg * (d @ d))

    def analytic_constants(self):
        return self.strong_convexity_c, self.smoothness_L


class LogisticProblem:
    """Mean logistic loss on +-1 labels with a strictly positive L2 term."""

    kind = "logistic"

    def __init__(self, design, labels, l2_reg):
        A = sp.csr_matrix(design, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64).reshape(-1)
        if y.shape[0] != A.shape[0]:
            raise InvalidParameterError("labels length must equal the number of rows")
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise InvalidParameterError("labels must be -1 or +1")
        if not l2_reg > 0:
            raise InvalidParameterError("logistic problems require l2_reg > 0")
        A.eliminate_zeros()
        empty = np.flatnonzero(np.diff(A.indptr) == 0)
        if empty.size:
            raise InvalidParameterError(f"row {int(empty[0])} has no nonzero feature")
        self.design = A
        self.labels = y
        self.l2_reg = float(l2_reg)
        self.known_optimum = None
        self._design_t = A.T.tocsr()
        self._L = None

    @property
    def n_samples(self):
        return self.design.shape[0]

    @property
    def n_features(self):
        return self.design.shape[1]

    @property
    def density(self):
        return self.design.nnz / (self.n_samples * self.n_features)

    def loss(self, x):
        x = as_dense(x, self.n_features)
        z = self.labels * (self.design @ x)
        return float(np.mean(np.logaddexp(0.0, -z)) + 0.5 * self.l2_reg * (x @ x))

    def _grad_rows(self, x, rows, y):
        z = y * (rows @ x)
        w = -y * expit(-z)
        return rows.T @ w / y.shape[0] + self.l2_reg * x

    def gradient(self, x):
        x = as_dense(x, self.n_features)
        return self._grad_rows(x, self.design, self.labels)

    def loss_and_gradient(self, x):
        return self.loss(x), self.gradient(x)

    def grad_minibatch(self, x, batch, rng=None):
        batch = _check_batch(batch, self.n_samples)
        return self._grad_rows(x, self.design[batch], self.labels[batch])

    def analytic_constants(self):
        if self._L is None:
            self._L = self.l2_reg + _lambda_max_gram(self.design) / (4.0 * self.n_samples)
        return self.l2_reg, self._L

    def solve_optimum(self, tol=1e-10, max_iter=1_000_000):
        """Full gradient descent with step 1/L until ``||grad|| <= tol``."""
        _, L = self.analytic_constants()
        x = np.zeros(self.n_features)
        for _ in range(max_iter):
            g = self.gradient(x)
            if np.linalg.norm(g) <= tol:
                self.known_optimum = x
                return x
            x = x - g / L
        raise RuntimeError(f"gradient descent did not reach {tol} in {max_iter} steps")

    def excess_loss(self, x):
        if self.known_optimum is None:
            raise NotAvailableError("call solve_optimum() first")
        return self.loss(x) - self.loss(self.known_optimum)


def _lambda_max_gram(A):
    n = A.shape[1]
    if n <= 2048:
        M = A.T @ A
        M = M.toarray() if sp.issparse(M) else M
        return float(np.linalg.eigvalsh(M)[-1])
    from scipy.sparse.linalg import LinearOperator, eigsh

    op = LinearOperator((n, n), matvec=lambda v: A.T @ (A @ v), dtype=np.float64)
    return float(eigsh(op, k=1, which="LA", return_eigenvectors=False)[0])


class SmoothNonconvexProblem:
    """One-hidden-layer tanh regression network with squared loss.

    Parameters are flattened as ``[W1 (h x n_in), b1 (h), w2 (h), b2]``. The
    loss is ``(1/2m) sum_i (net(x_i) - y_i)^2`` and is bounded below by 0.
    """

    kind = "tanh_regression"

    def __init__(self, inputs, targets, hidden=8):
        X = np.ascontiguousarray(inputs, dtype=np.float64)
        y = np.ascontiguousarray(targets, dtype=np.float64).reshape(-1)
        if X.ndim != 2 or y.shape[0] != X.shape[0]:
            raise InvalidParameterError("inputs must be m x n_in with m targets")
        self.inputs = X
        self.targets = y
        self.n_in = X.shape[1]
        self.hidden = int(hidden)
        self.known_optimum = None
        self._L = None

    @classmethod
    def synthetic(cls, m=512, n_in=16, hidden=8, noise_sigma=0.05, seed=0):
        """Teacher-student data: targets from a random tanh net plus noise."""
        g = rngmod.stream(seed, lane=1, domain=rngmod.DATA)
        X = g.standard_normal((m, n_in))
        teacher = cls(X, np.zeros(m), hidden)
        w = g.standard_normal(teacher.n_features) / np.sqrt(n_in)
        y = teacher.predict(w, X) + noise_sigma * g.standard_normal(m)
        return cls(X, y, hidden)

    @property
    def n_samples(self):
        return self.inputs.shape[0]

    @property
    def n_features(self):
        h, d = self.hidden, self.n_in
        return h * d + 2 * h + 1

    def unpack(self, x):
        h, d = self.hidden, self.n_in
        W1 = x[: h * d].reshape(h, d)
        b1 = x[h * d : h * d + h]
        w2 = x[h * d + h : h * d + 2 * h]
        b2 = x[-1]
        return W1, b1, w2, b2

    def initial_point(self, seed=0, scale=0.5):
        """Random start; the all-zero vector is a saddle for this net."""
        g = rngmod.stream(seed, lane=0, domain=rngmod.INIT)
        return scale * g.standard_normal(self.n_features) / np.sqrt(self.n_in)

    def predict(self, x, X=None):
        X = self.inputs if X is None else X
        W1, b1, w2, b2 = self.unpack(x)
        return np.tanh(X @ W1.T + b1) @ w2 + b2

    def _loss_grad(self, x, X, y):
        W1, b1, w2, b2 = self.unpack(x)
        H = np.tanh(X @ W1.T + b1)
        r = H @ w2 + b2 - y
        k = y.shape[0]
        dH = np.outer(r, w2) * (1.0 - H * H)
        g = np.concatenate([(dH.T @ X).ravel(), dH.sum(axis=0), H.T @ r, [r.sum()]])
        return 0.5 * float(r @ r) / k, g / k

    def loss(self, x):
        x = as_dense(x, self.n_features)
        return self._loss_grad(x, self.inputs, self.targets)[0]

    def gradient(self, x):
        x = as_dense(x, self.n_features)
        return self._loss_grad(x, self.inputs, self.targets)[1]

    def loss_and_gradient(self, x):
        x = as_dense(x, self.n_features)
        return self._loss_grad(x, self.inputs, self.targets)

    def grad_minibatch(self, x, batch, rng=None):
        batch = _check_batch(batch, self.n_samples)
        return self._loss_grad(x, self.inputs[batch], self.targets[batch])[1]

    def estimate_smoothness(self, n_points=16, seed=0, scale=1.0, margin=1.25, iters=30):
        """Numerical L: max Hessian spectral norm over random points.

        Hessian-vector products come from central differences of the gradient;
        the maximum over points is inflated by ``margin``.
        """
        g = rngmod.stream(seed, lane=2, domain=rngmod.ESTIMATE)
        n = self.n_features
        h = 1e-5
        best = 0.0
        for _ in range(n_points):
            x = scale * g.standard_normal(n) / np.sqrt(self.n_in)
            v = g.standard_normal(n)
            v /= np.linalg.norm(v)
            lam = 0.0
            for _ in range(iters):
                hv = (self.gradient(x + h * v) - self.gradient(x - h * v)) / (2 * h)
                lam = float(np.linalg.norm(hv))
                if lam == 0.0:
                    break
                v = hv / lam
            best = max(best, lam)
        self._L = margin * best
        return self._L

    def analytic_constants(self):
        raise NotAvailableError(
            "non-convex problem: no strong convexity constant; use estimate_smoothness()"
        )


@dataclass(frozen=True)
class SecondMomentEstimate:
    M_squared: float
    sample_count: int
    P: int
    per_point: tuple = ()

    @property
    def M(self):
        return float(np.sqrt(self.M_squared))


def loss(problem, x):
    return problem.loss(x)


def grad_minibatch(problem, x, batch, rng_stream=None):
    return problem.grad_minibatch(as_dense(x, problem.n_features), batch, rng_stream)


def analytic_constants(problem):
    """``(c, L)`` for convex problems; raises NotAvailableError otherwise."""
    return problem.analytic_constants()


def estimate_second_moment(problem, x_samples, P, batch_size, trials, *, seed=0, shards=None):
    """Empirical max over points of ``E||(1/P) sum_p G_p(x)||^2``.

    Node ``p`` samples ``batch_size`` indices without replacement from its
    shard when ``shards`` is given, otherwise from the whole dataset.
    """
    if trials < 1:
        raise InvalidParameterError("trials must be >= 1")
    if P < 1:
        raise InvalidParameterError("P must be >= 1")
    m = problem.n_samples
    pools = [np.arange(m)] * P if shards is None else [np.asarray(s.sample_indices) for s in shards]
    if len(pools) != P:
        raise InvalidParameterError("need one shard per node")
    per_point = []
    for i, x in enumerate(x_samples):
        x = as_dense(x, problem.n_features)
        acc = 0.0
        for trial in range(trials):
            g = rngmod.stream(seed, lane=i, step=trial, domain=rngmod.ESTIMATE)
            total = np.zeros(problem.n_features)
            for pool in pools:
                b = g.choice(pool, size=min(batch_size, pool.size), replace=False)
                total += problem.grad_minibatch(x, b, g)
            avg = total / P
            acc += float(avg @ avg)
        per_point.append(acc / trials)
    if not per_point:
        raise InvalidParameterError("x_samples is empty")
    return SecondMomentEstimate(max(per_point), len(per_point) * trials, P, tuple(per_point))
