"""Closed-form constants, assumption estimators and convergence bounds.

Infeasible parameter regions are returned as states (``feasible=False`` plus a
reason) wherever a caller sweeping parameters would want to keep going; the
supermartingale and the non-convex bound raise instead because their value is
undefined there.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .vecmath import InvalidParameterError, as_dense, gamma as gamma_of, residual, top_k


class InfeasibleError(ValueError):
    """A bound's denominator or precondition is violated."""


class NotApplicableError(ValueError):
    """The bound is singular for these inputs (e.g. gamma = 0 with xi > 0)."""


@dataclass(frozen=True)
class XiMeasurement:
    t: int
    lhs_norm: float
    grad_norm: float
    xi_t: float

    @property
    def unbounded(self):
        return math.isinf(self.xi_t)


def measure_xi(per_node_accs, avg_alpha_grad, K, P, t=0):
    """Both sides of the TopK-of-average vs average-of-TopK gap.

    ``lhs = ||TopK(mean_p acc_p) - mean_p TopK(acc_p)||`` and
    ``xi_t = lhs / ||avg_alpha_grad||``. A zero gradient with a nonzero gap
    yields ``xi_t = inf`` rather than an exception.
    """
    accs = [as_dense(a) for a in per_node_accs]
    if len(accs) != P or P < 1:
        raise InvalidParameterError(f"expected {P} accumulators, got {len(accs)}")
    n = accs[0].shape[0]
    if any(a.shape[0] != n for a in accs):
        raise InvalidParameterError("accumulators differ in dimension")
    grad = as_dense(avg_alpha_grad, n)
    grad_norm = float(np.linalg.norm(grad))
    if P == 1:
        return XiMeasurement(t, 0.0, grad_norm, 0.0)
    mean_acc = np.zeros(n)
    mean_topk = np.zeros(n)
    for a in accs:
        mean_acc += a
        sv = top_k(a, K)
        mean_topk[sv.indices] += sv.values
    mean_acc /= P
    mean_topk /= P
    lhs = float(np.linalg.norm(top_k(mean_acc, K).to_dense() - mean_topk))
    if grad_norm == 0.0:
        xi = 0.0 if lhs == 0.0 else math.inf
    else:
        xi = lhs / grad_norm
    return XiMeasurement(t, lhs, grad_norm, xi)


@dataclass(frozen=True)
class XiSummary:
    running_max: float
    p99: float
    median: float
    count: int
    zero_grad_steps: int
    first_half_max: float
    second_half_max: float

    def as_dict(self):
        return asdict(self)


def summarize_xi(xi_values, grad_norms=None):
    """Running max, 99th percentile and half-split maxima of a xi series.

    Steps whose scaled gradient is exactly zero are excluded and counted.
    """
    xi = np.asarray([np.nan if v is None else v for v in xi_values], dtype=float)
    keep = np.isfinite(xi)
    if grad_norms is not None:
        keep &= np.asarray(grad_norms, dtype=float) > 0
    zero = int(xi.size - keep.sum())
    vals = xi[keep]
    if vals.size == 0:
        nan = float("nan")
        return XiSummary(nan, nan, nan, 0, zero, nan, nan)
    half = vals.size // 2
    first = vals[: max(half, 1)]
    second = vals[half:]
    return XiSummary(
        running_max=float(vals.max()),
        p99=float(np.percentile(vals, 99)),
        median=float(np.median(vals)),
        count=int(vals.size),
        zero_grad_steps=zero,
        first_half_max=float(first.max()),
        second_half_max=float(second.max()),
    )


def running_max(values):
    vals = np.asarray([0.0 if v is None or not np.isfinite(v) else v for v in values], dtype=float)
    return np.maximum.accumulate(vals) if vals.size else vals


@dataclass(frozen=True)
class ConvexConstants:
    gamma: float
    C: float
    C_prime: float
    H: float = None
    feasible: bool = True
    reason: str = ""


def convex_constants(n, K, xi, P, alpha=None, c=None, M=None, epsilon=None):
    """gamma, C, C' and (when alpha, c, M, epsilon are given) H."""
    g = gamma_of(n, K)
    base = g + xi / P
    C = (1.0 + g) / (1.0 - g) * base
    C_prime = 2.0 * base / (1.0 - g)
    if None in (alpha, c, M, epsilon):
        return ConvexConstants(g, C, C_prime, None, True, "H not requested")
    denom = 2.0 * alpha * c * epsilon - alpha**2 * M**2
    if denom <= 0:
        return ConvexConstants(g, C, C_prime, None, False, "2*alpha*c*eps - alpha^2*M^2 <= 0")
    H = 2.0 * math.sqrt(epsilon) / denom
    return ConvexConstants(g, C, C_prime, H, True, "")


@dataclass(frozen=True)
class LearningRateWindow:
    alpha_max: float
    feasible: bool
    first_term: float
    second_term: float
    eps_min: float


def convex_lr_window(c, epsilon, M, C_prime):
    """Largest admissible constant step for the strongly convex bound.

    Feasibility requires ``epsilon > (M C'/c)^2``, i.e. a positive second term.
    """
    first = 2.0 * c * epsilon / M**2
    second = 2.0 * (c * epsilon - math.sqrt(epsilon) * M * C_prime) / M**2
    eps_min = (M * C_prime / c) ** 2
    feasible = epsilon > eps_min and second > 0
    return LearningRateWindow(min(first, second), feasible, first, second, eps_min)


def plog(x):
    """Piecewise logarithm: ``log(e x)`` above 1, identity below."""
    return math.log(math.e * x) if x >= 1.0 else float(x)


@dataclass(frozen=True)
class FailureBound:
    bound: float
    feasible: bool
    vacuous: bool
    denominator: float
    reason: str = ""

    @property
    def clamped(self):
        return min(self.bound, 1.0)


def convex_failure_bound(alpha, c, epsilon, M, C_prime, dist0_sq, T):
    """Upper bound on the probability of never entering the success region.

    ``eps / ((2 a c eps - a^2 M^2 - 2 a sqrt(eps) M C') T) * plog(d0/eps)``;
    for ``d0 >= eps`` the log factor is ``log(e d0 / eps)``.
    """
    denom = 2 * alpha * c * epsilon - alpha**2 * M**2 - alpha * 2 * math.sqrt(epsilon) * M * C_prime
    if denom <= 0:
        return FailureBound(math.inf, False, True, denom, "denominator <= 0: step outside window")
    val = epsilon / (denom * T) * plog(dist0_sq / epsilon)
    return FailureBound(val, True, val > 1.0, denom)


def supermartingale_W(dist_sq, t, alpha, c, epsilon, M):
    """Sequential-SGD rate supermartingale evaluated at ``||x_t - x*||^2``."""
    denom = 2 * alpha * c * epsilon - alpha**2 * M**2
    if denom <= 0:
        raise InfeasibleError("2*alpha*c*eps - alpha^2*M^2 must be positive")
    return epsilon / denom * plog(dist_sq / epsilon) + t


def lipschitz_H(alpha, c, epsilon, M):
    denom = 2 * alpha * c * epsilon - alpha**2 * M**2
    if denom <= 0:
        raise InfeasibleError("2*alpha*c*eps - alpha^2*M^2 must be positive")
    return 2.0 * math.sqrt(epsilon) / denom


@dataclass(frozen=True)
class DCheck:
    sup_partial: float
    bounded: bool
    ratio: float
    t_argmax: int = 0
    partials: np.ndarray = field(default=None, repr=False, compare=False)


def check_D(schedule, gamma, t_max=100_000, keep_partials=False):
    """Supremum over t <= t_max of ``sum_k (2 gamma^2)^k alpha_{t-k}^2 / alpha_t``.

    Uses ``U_t = r (alpha_{t-1}^2 + U_{t-1})`` with ``S_t = U_t / alpha_t``.
    ``bounded`` means the supremum grew by less than 1e-6 (relative) over the
    last decade of t.
    """
    r = 2.0 * gamma**2
    if r >= 1.0:
        return DCheck(math.inf, False, r)
    if r == 0.0:
        return DCheck(0.0, True, r, 1, np.zeros(t_max) if keep_partials else None)
    alphas = schedule.sequence(t_max)
    S = np.empty(t_max)
    U = 0.0
    for t in range(1, t_max + 1):
        U = r * (alphas[t - 1] ** 2 + U)
        S[t - 1] = U / alphas[t]
    sup = float(S.max())
    cut = max(t_max // 10, 1)
    earlier = float(S[:cut].max())
    bounded = (sup - earlier) <= 1e-6 * abs(sup) and np.isfinite(sup)
    return DCheck(sup, bool(bounded), r, int(S.argmax()) + 1, S if keep_partials else None)


def _nonconvex_factor(xi, P, gamma):
    if gamma == 0.0:
        raise NotApplicableError("gamma = 0 (K = n): the (1 + xi/(P gamma)) factor is singular")
    return (1.0 + xi / (P * gamma)) ** 2


@dataclass(frozen=True)
class NonconvexBoundInputs:
    f0_minus_fstar: float
    L: float
    M: float
    xi: float
    P: int
    gamma: float
    D: float
    schedule: object
    T: int

    def __post_init__(self):
        if self.D < 0:
            raise InvalidParameterError("D must be >= 0")
        for name in ("f0_minus_fstar", "L", "M", "xi", "gamma", "D"):
            if not np.isfinite(getattr(self, name)):
                raise InvalidParameterError(f"{name} must be finite")


def noise_coefficient(L, M, xi, P, gamma, D):
    return 2 * L * M**2 + 4 * L**2 * M**2 * _nonconvex_factor(xi, P, gamma) * D


def nonconvex_bound(inputs):
    """Bound on the alpha-weighted mean of ``E||grad f(v_t)||^2`` over T steps."""
    a = inputs.schedule.sequence(inputs.T)[1:]
    coef = noise_coefficient(inputs.L, inputs.M, inputs.xi, inputs.P, inputs.gamma, inputs.D)
    s1 = float(np.sum(a))
    s2 = float(np.sum(a * a))
    return 4 * inputs.f0_minus_fstar / s1 + coef * s2 / s1


def fixed_lr_nonconvex(f0_minus_fstar, L, M, xi, P, gamma, D, T):
    if T < 1:
        raise InvalidParameterError("T must be >= 1")
    coef = noise_coefficient(L, M, xi, P, gamma, D)
    if coef <= 0:
        raise InvalidParameterError("zero denominator: 2LM^2 + 4L^2M^2(...)D must be positive")
    return math.sqrt(f0_minus_fstar / (T * coef))


def fixed_lr_closed_form(f0_minus_fstar, L, M, xi, P, gamma, D, T):
    """``5 sqrt((f0 - f*) coef / T)``, the bound reached at the fixed step."""
    return 5.0 * math.sqrt(f0_minus_fstar * noise_coefficient(L, M, xi, P, gamma, D) / T)


@dataclass
class NormGapTable:
    rows: list
    skipped: int
    n: int

    def as_records(self):
        return [dict(zip(("K", "mean_ratio", "max_ratio", "gamma"), r)) for r in self.rows]


def norm_gap_curve(gradient_samples, K_values):
    """Per K, mean and max of ``||g - TopK(g)|| / ||g||`` over samples."""
    samples = [as_dense(g) for g in gradient_samples]
    if not samples:
        raise InvalidParameterError("no gradient samples")
    n = samples[0].shape[0]
    kept = [g for g in samples if np.linalg.norm(g) > 0]
    skipped = len(samples) - len(kept)
    rows = []
    for K in K_values:
        if not kept:
            rows.append((int(K), float("nan"), float("nan"), gamma_of(n, K)))
            continue
        ratios = [np.linalg.norm(residual(g, K)) / np.linalg.norm(g) for g in kept]
        rows.append((int(K), float(np.mean(ratios)), float(np.max(ratios)), gamma_of(n, K)))
    return NormGapTable(rows, skipped, n)


def lemma3_rhs(aux_step_norms, xi_values, P, gamma):
    """Per-step right-hand side of the squared gap bound.

    ``(1 + xibar_t/(P gamma))^2 sum_{k=1..t} (2 gamma^2)^k ||x_{t-k+1}-x_{t-k}||^2``
    with ``xibar_t`` the running max of the measured xi.
    """
    if gamma == 0.0:
        raise NotApplicableError("gamma = 0")
    r = 2.0 * gamma**2
    xibar = running_max(xi_values)
    out = np.empty(len(aux_step_norms))
    S = 0.0
    for i, d in enumerate(aux_step_norms):
        S = r * (d * d + S)
        out[i] = (1.0 + xibar[i] / (P * gamma)) ** 2 * S
    return out


def steps_to_threshold(excess, rel=1e-3):
    """First step t (1-based) with ``excess[t] <= rel * excess[0]``.

    ``excess[0]`` is the excess loss at the starting point.
    """
    excess = np.asarray(excess, dtype=float)
    target = rel * excess[0]
    hits = np.flatnonzero(excess[1:] <= target)
    return int(hits[0]) + 1 if hits.size else None
