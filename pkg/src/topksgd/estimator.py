"""scikit-learn estimators trained by the simulated TopK SGD cluster.

The estimators build an objective from ``(X, y)``, run the engine for a fixed
number of synchronous steps and keep the shared view as the coefficients. The
full step trace stays available as ``trace_`` for inspection.
"""

import numbers

import numpy as np
import scipy.sparse as sp
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .engine import COMPRESSORS, LearningRateSchedule, RunConfig, resolve_K, run
from .objectives import LeastSquaresProblem, LogisticProblem
from .vecmath import InvalidParameterError


def _resolve_k(k, n):
    if isinstance(k, numbers.Integral) and not isinstance(k, bool):
        if not 1 <= k <= n:
            raise InvalidParameterError(f"k={k} must lie in [1, {n}]")
        return int(k)
    if isinstance(k, numbers.Real) and 0 < k <= 1:
        return resolve_K(float(k), n)
    raise InvalidParameterError(f"k must be an int in [1, n] or a fraction in (0, 1], got {k!r}")


class _TopKSGDBase(BaseEstimator):
    def __init__(
        self,
        n_nodes=4,
        k=0.1,
        n_steps=1000,
        learning_rate=0.01,
        schedule="constant",
        theta=0.5,
        batch_size=16,
        compressor="topk",
        l2_reg=0.0,
        fit_intercept=True,
        mode="sequential",
        random_state=42,
    ):
        self.n_nodes = n_nodes
        self.k = k
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.schedule = schedule
        self.theta = theta
        self.batch_size = batch_size
        self.compressor = compressor
        self.l2_reg = l2_reg
        self.fit_intercept = fit_intercept
        self.mode = mode
        self.random_state = random_state

    def _run_config(self, n_samples, n_features):
        if self.compressor not in COMPRESSORS:
            raise InvalidParameterError(f"compressor must be one of {COMPRESSORS}")
        if self.random_state is None:
            seed = 42
        elif isinstance(self.random_state, numbers.Integral):
            seed = int(self.random_state)
        else:
            raise InvalidParameterError("random_state must be an int or None")
        P = min(int(self.n_nodes), n_samples)
        return RunConfig(
            P=P,
            K=_resolve_k(self.k, n_features),
            T=int(self.n_steps),
            schedule=LearningRateSchedule(self.schedule, float(self.learning_rate), float(self.theta)),
            batch_size=int(self.batch_size),
            seed=seed,
            compressor=self.compressor,
            record_xi=False,
            record_lemma_slack=False,
        )

    def _fit_problem(self, problem):
        config = self._run_config(problem.n_samples, problem.n_features)
        self.trace_ = run(problem, config, mode=self.mode)
        self.n_iter_ = len(self.trace_.records)
        self.loss_curve_ = self.trace_.column("loss_v")
        return self.trace_.final_v


class TopKSGDRegressor(RegressorMixin, _TopKSGDBase):
    """Least-squares regression fit by TopK SGD with error feedback.

    Parameters
    ----------
    n_nodes : int
        Simulated workers; capped at the number of samples.
    k : int or float
        Components kept per node and step, or a fraction of the feature count.
    n_steps : int
        Synchronous rounds.
    learning_rate, schedule, theta : step-size schedule
        ``constant`` uses ``learning_rate``; ``power_law`` uses
        ``learning_rate * t**-theta``.
    fit_intercept : bool
        Center ``X`` and ``y`` before training and recover the intercept after.
    """

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64, y_numeric=True)
        if self.fit_intercept:
            x_mean, y_mean = X.mean(axis=0), float(y.mean())
        else:
            x_mean, y_mean = np.zeros(X.shape[1]), 0.0
        problem = LeastSquaresProblem(X - x_mean, y - y_mean, self.l2_reg, solve_optimum=False)
        self.coef_ = self._fit_problem(problem)
        self.intercept_ = y_mean - float(x_mean @ self.coef_)
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return X @ self.coef_ + self.intercept_


class TopKSGDClassifier(ClassifierMixin, _TopKSGDBase):
    """L2-regularized logistic regression fit by TopK SGD.

    Accepts dense or sparse ``X``. More than two classes are handled one
    versus rest, one simulated run per class. The intercept is learned as an
    extra constant feature, so it is regularized with the rest.
    """

    def __init__(
        self,
        n_nodes=4,
        k=0.1,
        n_steps=1000,
        learning_rate=0.5,
        schedule="constant",
        theta=0.5,
        batch_size=16,
        compressor="topk",
        l2_reg=1e-4,
        fit_intercept=True,
        mode="sequential",
        random_state=42,
    ):
        super().__init__(
            n_nodes=n_nodes,
            k=k,
            n_steps=n_steps,
            learning_rate=learning_rate,
            schedule=schedule,
            theta=theta,
            batch_size=batch_size,
            compressor=compressor,
            l2_reg=l2_reg,
            fit_intercept=fit_intercept,
            mode=mode,
            random_state=random_state,
        )

    def _design(self, X):
        X = sp.csr_matrix(X, dtype=np.float64)
        if self.fit_intercept:
            X = sp.hstack([X, np.ones((X.shape[0], 1))], format="csr")
        return X

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.sparse = True
        return tags

    def fit(self, X, y):
        X, y = validate_data(self, X, y, accept_sparse="csr", dtype=np.float64)
        check_classification_targets(y)
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValueError(f"need samples of at least 2 classes; got {self.classes_.size} class")
        design = self._design(X)
        targets = self.classes_[1:] if self.classes_.size == 2 else self.classes_
        weights, traces = [], []
        for cls in targets:
            labels = np.where(y == cls, 1.0, -1.0)
            weights.append(self._fit_problem(LogisticProblem(design, labels, self.l2_reg)))
            traces.append(self.trace_)
        self.traces_ = traces
        W = np.vstack(weights)
        if self.fit_intercept:
            self.coef_, self.intercept_ = W[:, :-1], W[:, -1].copy()
        else:
            self.coef_, self.intercept_ = W, np.zeros(W.shape[0])
        return self

    def decision_function(self, X):
        check_is_fitted(self)
        X = validate_data(self, X, accept_sparse="csr", dtype=np.float64, reset=False)
        scores = np.asarray(X @ self.coef_.T) + self.intercept_
        return scores.ravel() if scores.shape[1] == 1 else scores

    def predict_proba(self, X):
        scores = self.decision_function(X)
        if scores.ndim == 1:
            p = expit(scores)
            return np.column_stack([1 - p, p])
        p = expit(scores)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        if scores.ndim == 1:
            return self.classes_[(scores > 0).astype(int)]
        return self.classes_[np.argmax(scores, axis=1)]
