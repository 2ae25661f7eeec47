"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The full run takes a few minutes; the convergence criterion dominates.
"""

import itertools
import math
import time

import numpy as np
import pytest
import scipy.sparse as sp

from topksgd.analysis import (
    check_D,
    convex_constants,
    convex_lr_window,
    fixed_lr_closed_form,
    fixed_lr_nonconvex,
    lemma3_rhs,
    lipschitz_H,
    measure_xi,
    NonconvexBoundInputs,
    nonconvex_bound,
    supermartingale_W,
)
from topksgd.data import partition, synth_regression
from topksgd.engine import LearningRateSchedule, RunConfig, init_state, resolve_K, run, step
from topksgd.objectives import LeastSquaresProblem, LogisticProblem, SmoothNonconvexProblem, estimate_second_moment
from topksgd.vecmath import gamma, residual

P = 8
BATCH = 64
SEED = 42


@pytest.fixture(scope="module")
def synth():
    return synth_regression(m=10000, n=1024, noise_sigma=0.1, seed=SEED)


@pytest.fixture(scope="module")
def window(synth):
    """Constant step at 90% of the strongly convex window for the dense run.

    M^2 is estimated on the segment from 0 to x* with the run's own shards.
    """
    c, L = synth.analytic_constants()
    xs = synth.known_optimum
    eps = 1e-3 * float(xs @ xs)
    shards = partition(synth.n_samples, P, SEED, "contiguous")
    pts = [s * xs for s in (0.0, 0.5, 0.9, 1.0)]
    M2 = estimate_second_moment(synth, pts, P, BATCH, 4, shards=shards).M_squared
    w = convex_lr_window(c, eps, math.sqrt(M2), 0.0)
    assert w.feasible
    return dict(c=c, L=L, eps=eps, M=math.sqrt(M2), window=w, alpha=0.9 * w.alpha_max)


def constant(alpha):
    return LearningRateSchedule("constant", alpha)


@pytest.fixture(scope="module")
def conservation_run(synth, window):
    cfg = RunConfig(P=P, K=resolve_K(0.01, synth.n_features), T=2000, schedule=constant(window["alpha"]),
                    batch_size=BATCH, seed=SEED)
    t0 = time.perf_counter()
    tr = run(synth, cfg)
    return tr, time.perf_counter() - t0


def test_criterion_01_conservation(acceptance, conservation_run):
    tr, elapsed = conservation_run
    worst = float(tr.column("conservation_residual").max())
    ok = worst <= 1e-10 and elapsed < 60 and len(tr.records) == 2000
    acceptance(1, ok, f"max ||v - x - mean err||_inf = {worst:.3e} (<= 1e-10), K = {tr.config.K}, {elapsed:.1f} s (< 60 s)")


def test_criterion_02_dense_equivalence(acceptance, synth, window):
    n = synth.n_features
    details, ok = [], True
    for p in (1, 4):
        base = dict(P=p, K=n, T=1000, schedule=constant(window["alpha"]), batch_size=BATCH, seed=SEED,
                    record_xi=False, record_lemma_slack=False)
        traj = {}
        for comp in ("topk", "identity"):
            states = []
            run(synth, RunConfig(compressor=comp, **base),
                callback=lambda w, nodes, rec, info, s=states: s.append(w.v.tobytes() + w.x_aux.tobytes()) and False)
            traj[comp] = states
        same = len(traj["topk"]) == 1000 and traj["topk"] == traj["identity"]
        ok &= same
        details.append(f"P={p}: {'bitwise equal' if same else 'DIFFER'}")
    acceptance(2, ok, "K = n vs identity over 1000 steps, " + ", ".join(details))


def test_criterion_03_gamma_bounds(acceptance):
    g = np.random.default_rng(3)
    violations = 0
    worst2 = worst1 = -math.inf
    kinds = ("normal", "uniform", "heavy", "ties", "sparse")
    for i in range(10_000):
        n = int(g.integers(1, 257))
        K = int(g.integers(1, n + 1))
        kind = kinds[i % len(kinds)]
        if kind == "normal":
            v = g.standard_normal(n)
        elif kind == "uniform":
            v = np.full(n, g.uniform(-2, 2))
        elif kind == "heavy":
            v = g.standard_cauchy(n)
        elif kind == "ties":
            v = g.integers(-3, 4, n).astype(float)
        else:
            v = g.standard_normal(n) * (g.random(n) < 0.2)
        v *= 10.0 ** g.uniform(-3, 3)
        r = residual(v, K)
        scale = max(1.0, float(np.linalg.norm(v)))
        d2 = (np.linalg.norm(r) - gamma(n, K) * np.linalg.norm(v)) / scale
        d1 = (np.abs(r).sum() - (n - K) / n * np.abs(v).sum()) / max(1.0, float(np.abs(v).sum()))
        worst2, worst1 = max(worst2, d2), max(worst1, d1)
        violations += int(d2 > 1e-12) + int(d1 > 1e-12)
    acceptance(3, violations == 0,
               f"10^4 vectors, {violations} violations; worst scaled excess l2 {worst2:.2e}, l1 {worst1:.2e} (tol 1e-12)")


def test_criterion_04_gap_recursions(acceptance, synth, window, conservation_run):
    tr, _ = conservation_run
    slack = tr.column("lemma1_slack")
    min_slack = float(slack.min())
    ok1 = bool(np.all(np.isfinite(slack))) and min_slack >= -1e-9

    n = synth.n_features
    K = resolve_K(0.75, n)
    cfg = RunConfig(P=P, K=K, T=2000, schedule=constant(window["alpha"]), batch_size=BATCH, seed=SEED)
    t3 = run(synth, cfg)
    gap_sq = t3.column("gap_norm") ** 2
    rhs = lemma3_rhs(t3.column("aux_step_norm"), t3.column("xi_t"), P, gamma(n, K))
    # floating-point allowance only, same order as the one-step slack tolerance
    viol = int(np.sum(gap_sq > rhs * (1 + 1e-9)))
    ratio = float(np.max(gap_sq / rhs))
    ok = ok1 and viol == 0 and float(t3.column("lemma1_slack").min()) >= -1e-9
    acceptance(4, ok, f"min one-step slack {min_slack:.3e} (>= -1e-9) over {len(slack)} steps; "
                      f"squared gap bound at K/n=0.75: {viol} violations, max gap^2/rhs = {ratio:.3f}")


class FixedGradients:
    """Sample i always returns the gradient row G[i]."""

    def __init__(self, G):
        self.G = np.asarray(G, dtype=float)
        self.n_samples, self.n_features = self.G.shape

    def grad_minibatch(self, x, batch, rng=None):
        return self.G[np.asarray(batch)].mean(axis=0)

    def loss(self, x):
        return float(x @ x)

    def loss_and_gradient(self, x):
        return self.loss(x), 2 * x


def test_criterion_05_dummy_instance(acceptance):
    p = FixedGradients([[-1001.0, 500.0], [1001.0, 500.0]])
    cfg = RunConfig(P=2, K=1, T=1, schedule=constant(1.0), batch_size=1)
    world, nodes = init_state(p, cfg)
    world, nodes, rec, info = step(world, nodes, p, cfg)
    xm = measure_xi(info.accs, info.mean_alpha_grad, 1, 2)
    ok = (
        info.update.tolist() == [0.0, 0.0]
        and world.v.tolist() == [0.0, 0.0]
        and all(nd.error.tolist() == [0.0, 500.0] for nd in nodes)
        and rec.xi_t == 1.0
        and (xm.lhs_norm, xm.grad_norm, xm.xi_t) == (500.0, 500.0, 1.0)
    )
    acceptance(5, ok, f"update {info.update.tolist()}, errors {[nd.error.tolist() for nd in nodes]}, xi = {xm.xi_t}")


def test_criterion_06_mode_determinism(acceptance, tmp_path):
    g = np.random.default_rng(6)
    problems = {
        "synth": synth_regression(m=600, n=48, seed=1),
        "tanh": SmoothNonconvexProblem.synthetic(m=200, n_in=4, hidden=4, seed=2),
    }
    mismatches = []
    for i in range(20):
        name = ("synth", "tanh")[i % 2]
        prob = problems[name]
        n = prob.n_features
        kind = ("constant", "power_law")[int(g.integers(2))]
        cfg = RunConfig(
            P=int(g.integers(1, 9)),
            K=int(g.integers(1, n + 1)),
            T=int(g.integers(20, 120)),
            schedule=LearningRateSchedule(kind, float(g.uniform(0.005, 0.05)), 0.5),
            batch_size=int(g.integers(1, 33)),
            seed=int(g.integers(0, 2**31)),
            compressor=("topk", "randomk", "identity")[int(g.integers(3))],
            sampling=("shard", "global")[int(g.integers(2))],
            partition=("contiguous", "shuffled")[int(g.integers(2))],
        )
        threads = int(g.integers(1, 9))
        a = run(prob, cfg, mode="sequential")
        b = run(prob, cfg, mode="parallel", threads=threads)
        fa, fb = tmp_path / f"{i}a.jsonl", tmp_path / f"{i}b.jsonl"
        a.to_jsonl(fa)
        b.to_jsonl(fb)
        if fa.read_bytes() != fb.read_bytes() or a.final_v.tobytes() != b.final_v.tobytes():
            mismatches.append(i)
    acceptance(6, not mismatches, f"20 randomized configs, {len(mismatches)} mismatching traces {mismatches}")


@pytest.fixture(scope="module")
def convergence(synth, window):
    """Dense, 10% and 0.1% runs at one constant step, stopped at the threshold."""
    n = synth.n_features
    fstar = synth.loss(synth.known_optimum)
    target = 1e-3 * synth.excess_loss(np.zeros(n))

    def go(K, T):
        cfg = RunConfig(P=P, K=K, T=T, schedule=constant(window["alpha"]), batch_size=BATCH, seed=SEED,
                        record_lemma_slack=False)
        hit = {}

        def cb(w, nodes, rec, info):
            if rec.loss_v - fstar <= target:
                hit["t"] = rec.t
                return True
            return False

        tr = run(synth, cfg, callback=cb)
        return hit.get("t"), tr

    t0 = time.perf_counter()
    dense, _ = go(n, 100_000)
    out = {"dense": dense, "elapsed": None}
    if dense is not None:
        out["k10"] = go(resolve_K(0.1, n), 2 * dense)
        out["k01"] = go(resolve_K(0.001, n), 50 * dense)
    out["elapsed"] = time.perf_counter() - t0
    return out


def test_criterion_07_convergence(acceptance, convergence, window, synth):
    d = convergence["dense"]
    if d is None:
        acceptance(7, False, "dense run did not reach the threshold within 100000 steps")
    s10, tr10 = convergence["k10"]
    s01, tr01 = convergence["k01"]
    n = synth.n_features
    eps_min = []
    for K, tr in ((tr10.config.K, tr10), (tr01.config.K, tr01)):
        xi = float(np.nanmax(tr.column("xi_t")))
        cp = convex_constants(n, K, xi, P).C_prime
        eps_min.append(convex_lr_window(window["c"], window["eps"], window["M"], cp).eps_min)
    elapsed = convergence["elapsed"]
    ok = s10 is not None and s10 <= 2 * d and s01 is not None and s01 <= 50 * d and elapsed <= 300
    r01 = "none" if s01 is None else f"{s01 / d:.3f}x"
    acceptance(7, ok, f"alpha = {window['alpha']:.4e} (0.9 alpha_max, dense window); steps: dense {d}, "
                      f"K/n=10% {s10} (<= {2 * d}), K/n=0.1% {s01} (<= {50 * d}, ratio {r01}); "
                      f"compressed-window eps_min {eps_min[0]:.2e}/{eps_min[1]:.2e} vs eps {window['eps']:.2e}; "
                      f"{elapsed:.0f} s (<= 300 s)")


def test_criterion_08_xi_stability(acceptance, convergence):
    if convergence["dense"] is None:
        acceptance(8, False, "no convergence run available")
    ok, parts = True, []
    for key, label in (("k10", "10%"), ("k01", "0.1%")):
        xi = convergence[key][1].column("xi_t")
        half = xi.size // 2
        first, second = float(np.max(xi[:half])), float(np.max(xi[half:]))
        p99 = float(np.percentile(xi, 99))
        good = bool(np.all(np.isfinite(xi))) and second <= 1.5 * first and math.isfinite(p99)
        ok &= good
        parts.append(f"K/n={label}: max first half {first:.3f}, second half {second:.3f}, p99 {p99:.3f}")
    acceptance(8, ok, "; ".join(parts))


def test_criterion_09_bound_machinery(acceptance):
    g = np.random.default_rng(9)
    # (a) C' = C + (gamma + xi/P)
    worst_a = 0.0
    for _ in range(2000):
        n = int(g.integers(2, 5000))
        K = int(g.integers(1, n + 1))
        Pn = int(g.integers(1, 65))
        xi = float(g.uniform(0, 20))
        cc = convex_constants(n, K, xi, Pn)
        worst_a = max(worst_a, abs(cc.C_prime - (cc.C + cc.gamma + xi / Pn)) / cc.C_prime if cc.C_prime else 0.0)
    ok_a = worst_a <= 1e-12

    # (b) fixed step plugged into the general bound
    worst_b = 0.0
    for _ in range(300):
        n = int(g.integers(4, 2000))
        K = int(g.integers(1, n))
        gm = gamma(n, K)
        args = dict(f0_minus_fstar=float(g.uniform(0.1, 100)), L=float(g.uniform(0.1, 10)),
                    M=float(g.uniform(0.1, 10)), xi=float(g.uniform(0, 5)), P=int(g.integers(1, 17)),
                    gamma=gm, D=float(g.uniform(0, 3)), T=int(g.integers(1, 10**6)))
        a = fixed_lr_nonconvex(**args)
        got = nonconvex_bound(NonconvexBoundInputs(schedule=LearningRateSchedule("fixed_nonconvex", a), **args))
        want = fixed_lr_closed_form(**args)
        # independent closed form written out in full
        f0, L, M, xi, Pn, D, T = (args[k] for k in ("f0_minus_fstar", "L", "M", "xi", "P", "D", "T"))
        hand = 5 * math.sqrt(f0 * (2 * L * M**2 + 4 * L**2 * M**2 * (1 + xi / (Pn * gm)) ** 2 * D) / T)
        worst_b = max(worst_b, abs(got - hand) / hand, abs(want - hand) / hand)
    ok_b = worst_b <= 1e-12

    # (c) constant schedules: partial sums are alpha * r (1 - r^t) / (1 - r)
    worst_c = 0.0
    for _ in range(50):
        n = int(g.integers(4, 500))
        K = int(g.integers(n // 2 + 1, n + 1))
        gm = gamma(n, K)
        r = 2 * gm**2
        alpha = float(g.uniform(1e-4, 1.0))
        t_max = int(g.integers(100, 5000))
        dc = check_D(constant(alpha), gm, t_max=t_max)
        want = alpha * r * (1 - r**t_max) / (1 - r) if r > 0 else 0.0
        worst_c = max(worst_c, abs(dc.sup_partial - want) / want if want else abs(dc.sup_partial))
    ok_c = worst_c <= 1e-12

    # (d) empirical Lipschitz constant of W over 10^4 pairs
    worst_d, H_min_gap = 0.0, math.inf
    pairs = 0
    for _ in range(10):
        c = float(g.uniform(0.1, 2))
        eps = float(10 ** g.uniform(-4, 0))
        M = float(g.uniform(0.5, 5))
        alpha = float(g.uniform(0.05, 0.95)) * 2 * c * eps / M**2
        H = lipschitz_H(alpha, c, eps, M)
        n = int(g.integers(1, 9))
        xs = g.standard_normal(n)
        for _ in range(1000):
            u = xs + g.standard_normal(n) * math.sqrt(eps) * 10 ** g.uniform(-1, 1)
            v = u + g.standard_normal(n) * math.sqrt(eps) * 10 ** g.uniform(-4, 0.5)
            t = int(g.integers(0, 100))
            wu = supermartingale_W(float((u - xs) @ (u - xs)), t, alpha, c, eps, M)
            wv = supermartingale_W(float((v - xs) @ (v - xs)), t, alpha, c, eps, M)
            lip = abs(wu - wv) / float(np.linalg.norm(u - v))
            H_min_gap = min(H_min_gap, H + 1e-9 - lip)
            worst_d = max(worst_d, lip / H)
            pairs += 1
    ok_d = H_min_gap >= 0 and pairs == 10_000
    acceptance(9, ok_a and ok_b and ok_c and ok_d,
               f"(a) max rel err {worst_a:.1e}; (b) max rel err {worst_b:.1e}; (c) max rel err {worst_c:.1e}; "
               f"(d) {pairs} pairs, max Lip/H {worst_d:.4f}")


def central_diff(f, x, h=1e-6):
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def oracle_problems(m):
    g = np.random.default_rng(10)
    lsq = LeastSquaresProblem(g.standard_normal((m, 6)), g.standard_normal(m), 0.1)
    A = g.standard_normal((m, 6)) * (g.random((m, 6)) < 0.6)
    A[:, 0] = 1.0
    logit = LogisticProblem(sp.csr_matrix(A), np.where(g.random(m) < 0.5, -1.0, 1.0), 0.05)
    net = SmoothNonconvexProblem.synthetic(m=m, n_in=3, hidden=4, seed=1)
    return {"least_squares": lsq, "logistic": logit, "tanh": net}


def test_criterion_10_gradient_oracles(acceptance):
    g = np.random.default_rng(11)
    worst_fd, worst_ub, parts = {}, {}, []
    for name, prob in oracle_problems(40).items():
        w = 0.0
        for _ in range(50):
            x = g.standard_normal(prob.n_features)
            grad = prob.gradient(x)
            fd = central_diff(prob.loss, x)
            w = max(w, float(np.linalg.norm(fd - grad) / np.linalg.norm(grad)))
        worst_fd[name] = w
    for m in (12, 20):
        for name, prob in oracle_problems(m).items():
            x = g.standard_normal(prob.n_features)
            full = prob.gradient(x)
            for b in (1, 2, 3):
                batches = itertools.combinations(range(m), b)
                avg = np.mean([prob.grad_minibatch(x, np.array(bt)) for bt in batches], axis=0)
                worst_ub[name] = max(worst_ub.get(name, 0.0), float(np.max(np.abs(avg - full))))
    ok = max(worst_fd.values()) <= 1e-5 and max(worst_ub.values()) <= 1e-12
    for name in worst_fd:
        parts.append(f"{name}: fd rel {worst_fd[name]:.1e}, unbiased abs {worst_ub[name]:.1e}")
    acceptance(10, ok, "; ".join(parts))


def test_criterion_11_nonconvex_trend(acceptance):
    prob = SmoothNonconvexProblem.synthetic()
    K = resolve_K(0.75, prob.n_features)
    cfg = RunConfig(P=4, K=K, T=20000, schedule=LearningRateSchedule("power_law", 0.1, 0.5), batch_size=16,
                    seed=SEED, record_xi=False, record_lemma_slack=False, x0=tuple(prob.initial_point()))
    t0 = time.perf_counter()
    tr = run(prob, cfg)
    elapsed = time.perf_counter() - t0
    gn = tr.column("grad_norm_sq_v")
    w = gn.size // 10
    first, last = float(gn[:w].mean()), float(gn[-w:].mean())
    ok = gn.size == 20000 and last <= 0.25 * first and elapsed <= 300
    acceptance(11, ok, f"mean ||grad f||^2 first 10% {first:.4e}, last 10% {last:.4e}, "
                       f"ratio {last / first:.4f} (<= 0.25), {elapsed:.0f} s (<= 300 s)")
