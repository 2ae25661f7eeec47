"""Command-line experiment runner.

Every subcommand reads one TOML config (see ``topksgd.config``), expands its
sweep and writes data files under the output directory: per-run traces in
``runs/<label>/``, plus CSV/JSON tables at the top level. Each file carries
the config hash, seed and package version, and re-running a config rewrites
identical bytes.

Exit status: 0 ok, 1 a check failed, 2 a run diverged, 3 bad configuration.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    NonconvexBoundInputs,
    NotApplicableError,
    check_D,
    convex_constants,
    convex_failure_bound,
    convex_lr_window,
    fixed_lr_closed_form,
    fixed_lr_nonconvex,
    lemma3_rhs,
    nonconvex_bound,
    norm_gap_curve,
    running_max,
    steps_to_threshold,
    summarize_xi,
)
from .config import ConfigError, load_config
from .data import LibSVMParseError, load_libsvm, partition, synth_regression
from .engine import DivergenceError, run
from .objectives import NotAvailableError, SmoothNonconvexProblem, estimate_second_moment
from .vecmath import InvalidParameterError, gamma

ENV_OUT = "TOPKSGD_OUT"
DEFAULT_OUT = "topksgd_out"
EXIT_OK, EXIT_CHECK, EXIT_DIVERGED, EXIT_CONFIG = 0, 1, 2, 3

CONSERVATION_TOL = 1e-10
SLACK_TOL = 1e-9
CONVERGENCE_FRACTIONS = (0.001, 0.01, 0.1, 1.0)

log = logging.getLogger("topksgd")


# problem construction


def build_problem(cfg):
    p = cfg.problem
    kind = p["kind"]
    if kind == "synth_regression":
        return synth_regression(p["m"], p["n"], p["noise_sigma"], p["data_seed"], p["l2_reg"])
    if kind == "libsvm":
        return load_libsvm(p["path"], p["l2_reg"], p.get("n_features"))
    return SmoothNonconvexProblem.synthetic(p["m"], p["n_in"], p["hidden"], p["noise_sigma"], p["data_seed"])


def initial_point(problem, cfg):
    """``None`` (start at zero) or the random override recorded in the trace."""
    if cfg.run["x0"] == "zero":
        return None
    if hasattr(problem, "initial_point"):
        return problem.initial_point(seed=cfg.seed, scale=cfg.run["x0_scale"])
    from . import rng as rngmod

    g = rngmod.stream(cfg.seed, domain=rngmod.INIT)
    return cfg.run["x0_scale"] * g.standard_normal(problem.n_features)


def optimum(problem):
    """``(x*, f*, provenance)``; x* is None when unknown."""
    kind = getattr(problem, "kind", "")
    if kind == "least_squares" and problem.known_optimum is not None:
        x = problem.known_optimum
        return x, float(problem.loss(x)), "analytic (normal equations)"
    if kind == "logistic":
        x = problem.solve_optimum()
        return x, float(problem.loss(x)), "numerical (full gradient descent to 1e-10)"
    return None, 0.0, "lower bound (loss >= 0)"


def constants(problem):
    """``(c, L, provenance)``; c is None for non-convex problems."""
    try:
        c, L = problem.analytic_constants()
        return c, L, "analytic"
    except NotAvailableError:
        return None, problem.estimate_smoothness(), "estimated (Hessian power iteration)"


# output helpers


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, meta, columns, rows):
    """CSV with a leading ``# {json meta}`` line and a header row."""
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(_clean(meta), sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            cells = [r.get(c) for c in columns] if isinstance(r, dict) else r
            w.writerow([_cell(v) for v in cells])


def write_json(path, meta, body):
    with open(path, "w") as fh:
        json.dump(_clean({"meta": meta, **body}), fh, sort_keys=True, indent=2)
        fh.write("\n")


class Session:
    """Shared state of one CLI invocation."""

    def __init__(self, cfg, args, command):
        self.cfg = cfg
        self.command = command
        self.mode = args.mode or cfg.run["mode"]
        self.threads = args.threads or cfg.run["threads"]
        self.out = resolve_out(args.out, cfg)
        self.problem = build_problem(cfg)
        self.n = self.problem.n_features
        self.x0 = initial_point(self.problem, cfg)
        self.exit = EXIT_OK

    def meta(self, **extra):
        m = {
            "config_hash": self.cfg.digest(),
            "seed": self.cfg.seed,
            "version": __version__,
            "command": self.command,
        }
        m.update(extra)
        return m

    def points(self, override=None):
        return self.cfg.expand(self.n, self.x0, override)

    def run_dir(self, point):
        d = self.out / "runs" / point.label
        d.mkdir(parents=True, exist_ok=True)
        return d

    def fail(self, code):
        # divergence outranks a failed check
        if code == EXIT_DIVERGED or self.exit == EXIT_OK:
            self.exit = code

    def execute(self, point, callback=None, write=True):
        """Run one sweep point; returns ``(trace, diverged)`` and writes traces."""
        try:
            trace = run(self.problem, point.run, mode=self.mode, threads=self.threads, callback=callback)
            diverged = None
        except DivergenceError as exc:
            trace, diverged = exc.trace, exc
            log.warning("%s diverged: %s", point.label, exc)
            self.fail(EXIT_DIVERGED)
        if write:
            d = self.run_dir(point)
            extra = {"experiment_hash": self.cfg.digest(), "label": point.label, "version": __version__}
            if diverged is not None:
                extra["diverged_at"] = diverged.t
                extra["divergence"] = str(diverged)
            trace.to_jsonl(d / "trace.jsonl", extra)
            trace.to_csv(d / "trace.csv", extra)
        return trace, diverged


def resolve_out(flag, cfg):
    if flag:
        return Path(flag)
    env = os.environ.get(ENV_OUT)
    if env:
        return Path(env)
    if cfg.out:
        return Path(cfg.out)
    return Path(DEFAULT_OUT)


# per-run metrics


def excess_series(trace, fstar):
    return np.concatenate([[trace.initial_loss], trace.column("loss_v")]) - fstar


def invariant_failures(trace, point):
    out = []
    cons = trace.column("conservation_residual")
    if cons.size and float(np.max(cons)) > CONSERVATION_TOL:
        out.append(f"conservation residual {float(np.max(cons)):.3e} > {CONSERVATION_TOL}")
    if point.run.record_lemma_slack and trace.records:
        slack = trace.column("lemma1_slack")
        if float(np.nanmin(slack)) < -SLACK_TOL:
            out.append(f"one-step slack {float(np.nanmin(slack)):.3e} < -{SLACK_TOL}")
    return out


def summary_row(sess, point, trace, diverged, fstar):
    recs = trace.records
    exc = excess_series(trace, fstar)
    row = {
        "label": point.label,
        "K": point.run.K,
        "K_fraction": point.run.K / sess.n,
        "P": point.run.P,
        "alpha0": point.run.schedule.alpha0,
        "compressor": point.run.compressor,
        "status": "diverged" if diverged else "ok",
        "steps": len(recs),
        "final_loss": recs[-1].loss_v if recs else trace.initial_loss,
        "final_excess_loss": float(exc[-1]),
        "steps_to_threshold": steps_to_threshold(exc, sess.cfg.threshold_rel),
        "bytes_per_node_per_step": recs[0].bytes_sent_per_node if recs else 0,
        "total_bytes_per_node": sum(r.bytes_sent_per_node for r in recs),
        "max_conservation_residual": float(trace.column("conservation_residual").max()) if recs else 0.0,
        "min_lemma1_slack": None,
        "xi_max": None,
        "xi_p99": None,
    }
    if recs and point.run.record_lemma_slack:
        row["min_lemma1_slack"] = float(np.nanmin(trace.column("lemma1_slack")))
    if recs and point.run.record_xi:
        s = summarize_xi([r.xi_t for r in recs])
        row["xi_max"], row["xi_p99"] = s.running_max, s.p99
    return row


SUMMARY_COLUMNS = [
    "label", "K", "K_fraction", "P", "alpha0", "compressor", "status", "steps", "final_loss",
    "final_excess_loss", "steps_to_threshold", "bytes_per_node_per_step", "total_bytes_per_node",
    "max_conservation_residual", "min_lemma1_slack", "xi_max", "xi_p99",
]


def threshold_stopper(fstar, initial_loss, rel):
    target = rel * (initial_loss - fstar)

    def cb(world, nodes, rec, info):
        return rec.loss_v - fstar <= target

    return cb


def _sweep(sess, points, fstar, check=True):
    rows, traces = [], []
    for pt in points:
        stop = None
        if sess.cfg.analysis["stop_at_threshold"]:
            x0 = np.zeros(sess.n) if sess.x0 is None else sess.x0
            stop = threshold_stopper(fstar, sess.problem.loss(x0), sess.cfg.threshold_rel)
        trace, diverged = sess.execute(pt, callback=stop)
        row = summary_row(sess, pt, trace, diverged, fstar)
        if check and sess.cfg.analysis["check_invariants"] and not diverged:
            bad = invariant_failures(trace, pt)
            if bad:
                log.error("%s: %s", pt.label, "; ".join(bad))
                row["status"] = "check_failed"
                sess.fail(EXIT_CHECK)
        log.info("%s: %s after %d steps, final loss %.6g", pt.label, row["status"], row["steps"], row["final_loss"])
        rows.append(row)
        traces.append((pt, trace, diverged))
    return rows, traces


# subcommands


def cmd_run(sess, single=True):
    points = sess.points()
    if single and len(points) > 1:
        raise ConfigError(f"config defines a sweep of {len(points)} points; use the 'sweep' subcommand", "run")
    _, fstar, src = optimum(sess.problem)
    rows, traces = _sweep(sess, points, fstar)
    write_csv(sess.out / "summary.csv", sess.meta(fstar=fstar, fstar_source=src), SUMMARY_COLUMNS, rows)
    for pt, trace, _ in traces:
        if pt.run.record_xi and trace.records:
            _write_xi(sess, pt, trace)


def cmd_sweep(sess):
    cmd_run(sess, single=False)


XI_COLUMNS = ["t", "xi_t", "lhs_norm", "alpha_grad_norm", "running_max"]


def _write_xi(sess, pt, trace):
    xi = [r.xi_t for r in trace.records]
    rm = running_max(xi)
    rows = [
        {"t": r.t, "xi_t": r.xi_t, "lhs_norm": r.lhs_norm, "alpha_grad_norm": r.alpha_grad_norm, "running_max": float(m)}
        for r, m in zip(trace.records, rm)
    ]
    write_csv(sess.run_dir(pt) / "xi.csv", sess.meta(label=pt.label), XI_COLUMNS, rows)


def cmd_validate_assumption(sess):
    points = [replace_point(p, record_xi=True) for p in sess.points()]
    rows = []
    for pt in points:
        trace, diverged = sess.execute(pt)
        if trace.records:
            _write_xi(sess, pt, trace)
        s = summarize_xi([r.xi_t for r in trace.records], [r.alpha_grad_norm for r in trace.records])
        stable = s.count > 0 and s.second_half_max <= 1.5 * s.first_half_max
        rows.append(
            {
                "label": pt.label, "K": pt.run.K, "P": pt.run.P, "status": "diverged" if diverged else "ok",
                **s.as_dict(), "stable": stable,
            }
        )
    cols = ["label", "K", "P", "status", "running_max", "p99", "median", "count", "zero_grad_steps",
            "first_half_max", "second_half_max", "stable"]
    write_csv(sess.out / "xi_summary.csv", sess.meta(), cols, rows)


def replace_point(pt, **changes):
    return type(pt)(pt.label, replace(pt.run, **changes), pt.axes)


def default_k_grid(n):
    fr = np.geomspace(1.0 / n, 1.0, 25)
    return sorted({max(1, min(n, int(round(f * n)))) for f in fr})


NORM_COLUMNS = ["K", "K_fraction", "mean_ratio", "max_ratio", "gamma"]


def cmd_norm_curve(sess):
    k_grid = sess.cfg.analysis["norm_curve_K"]
    k_grid = default_k_grid(sess.n) if k_grid is None else sorted(set(k_grid if isinstance(k_grid, list) else [k_grid]))
    if k_grid[-1] > sess.n:
        raise ConfigError(f"K={k_grid[-1]} exceeds n={sess.n}", "analysis.norm_curve_K")
    for pt in sess.points():
        T = pt.run.T
        want = set(np.unique(np.linspace(1, T, min(sess.cfg.analysis["norm_curve_samples"], T)).round().astype(int)).tolist())
        samples = []

        def grab(world, nodes, rec, info, want=want, samples=samples):
            if rec.t in want:
                samples.extend(g.copy() for g in info.grads)

        trace, diverged = sess.execute(pt, callback=grab)
        if not samples:
            continue
        tab = norm_gap_curve(samples, k_grid)
        rows = [dict(zip(NORM_COLUMNS, (K, K / sess.n, mean, mx, g))) for K, mean, mx, g in tab.rows]
        meta = sess.meta(label=pt.label, samples=len(samples), skipped_zero=tab.skipped, sample_steps=sorted(want))
        write_csv(sess.run_dir(pt) / "norm_curve.csv", meta, NORM_COLUMNS, rows)
        over = [r for r in tab.rows if np.isfinite(r[2]) and r[2] > r[3] + 1e-12]
        if over:
            log.error("%s: norm-gap ratio exceeds gamma at K=%d", pt.label, over[0][0])
            sess.fail(EXIT_CHECK)


def cmd_convergence_sweep(sess):
    _, fstar, src = optimum(sess.problem)
    points = sess.points(override={"K_fraction": list(CONVERGENCE_FRACTIONS)})
    rows, traces = _sweep(sess, points, fstar)
    write_csv(sess.out / "summary.csv", sess.meta(fstar=fstar, fstar_source=src), SUMMARY_COLUMNS, rows)
    cols = ["t"] + [f"excess_{pt.label}" for pt, _, _ in traces]
    series = [excess_series(tr, fstar) for _, tr, _ in traces]
    length = max(len(s) for s in series)
    curve_rows = []
    for t in range(length):
        curve_rows.append([t] + [float(s[t]) if t < len(s) else None for s in series])
    write_csv(sess.out / "curves.csv", sess.meta(fstar=fstar, fstar_source=src, columns="t=0 is the starting point"), cols, curve_rows)


def cmd_check_invariants(sess):
    rows = []
    for pt in sess.points():
        pt = replace_point(pt, record_xi=True, record_lemma_slack=True)
        x0 = np.zeros(sess.n) if sess.x0 is None else sess.x0
        total = np.zeros(sess.n)

        def acc(world, nodes, rec, info, total=total, P=pt.run.P):
            for g in info.grads:
                total[:] += g / P

        trace, diverged = sess.execute(pt, callback=acc)
        recs = trace.records
        res = {"label": pt.label, "status": "diverged" if diverged else "ok", "steps": len(recs)}
        fails = invariant_failures(trace, pt) if recs else []
        tele = float(np.max(np.abs(trace.final_x - (x0 - total)))) if recs else 0.0
        res["conservation_max"] = float(trace.column("conservation_residual").max()) if recs else 0.0
        res["lemma1_min_slack"] = float(np.nanmin(trace.column("lemma1_slack"))) if recs else None
        res["telescoping_residual"] = tele
        if tele > CONSERVATION_TOL:
            fails.append(f"telescoping residual {tele:.3e}")
        gm = gamma(sess.n, pt.run.K)
        if recs and 0 < 2 * gm * gm < 1:
            rhs = lemma3_rhs(trace.column("aux_step_norm"), [r.xi_t for r in recs], pt.run.P, gm)
            lhs = trace.column("gap_norm") ** 2
            worst = float(np.max(lhs - rhs * (1 + 1e-9)))
            res["lemma3_max_violation"] = worst
            res["lemma3"] = "checked"
            if worst > 1e-18:
                fails.append(f"squared gap bound violated by {worst:.3e}")
        else:
            res["lemma3_max_violation"] = None
            res["lemma3"] = "not applicable (needs 0 < 2 gamma^2 < 1)"
        res["failures"] = fails
        res["passed"] = not fails and not diverged
        if fails:
            log.error("%s: %s", pt.label, "; ".join(fails))
            sess.fail(EXIT_CHECK)
        write_json(sess.run_dir(pt) / "invariants.json", sess.meta(label=pt.label), {"result": res})
        rows.append(res)
    cols = ["label", "status", "steps", "conservation_max", "lemma1_min_slack", "telescoping_residual",
            "lemma3", "lemma3_max_violation", "passed"]
    write_csv(sess.out / "invariants.csv", sess.meta(), cols, rows)


def emit_bounds(sess, pt, m2_cache, consts, opt):
    """Evaluate the convex and non-convex bounds for one sweep point."""
    cfg = sess.cfg
    an = cfg.analysis
    problem = sess.problem
    x0 = np.zeros(sess.n) if sess.x0 is None else sess.x0
    c, L, c_src = consts
    xstar, fstar, f_src = opt
    caveats = []

    pilot_T = min(an["pilot_T"], pt.run.T)
    pilot = replace(pt.run, T=pilot_T, record_xi=True, record_lemma_slack=False)
    keep = set(np.unique(np.linspace(0, pilot_T, an["m2_points"]).round().astype(int)).tolist())
    iterates = [x0.copy()] if 0 in keep else []

    def grab(world, nodes, rec, info):
        if rec.t in keep:
            iterates.append(world.v.copy())

    try:
        trace = run(problem, pilot, mode=sess.mode, threads=sess.threads, callback=grab)
    except DivergenceError as exc:
        sess.fail(EXIT_DIVERGED)
        return {"status": "pilot diverged", "error": str(exc)}
    xi_sum = summarize_xi([r.xi_t for r in trace.records], [r.alpha_grad_norm for r in trace.records])
    xi = xi_sum.running_max if xi_sum.count else 0.0
    if xstar is not None:
        iterates.append(np.asarray(xstar))

    key = (pt.run.P, pt.run.batch_size)
    if key not in m2_cache:
        shards = partition(problem.n_samples, pt.run.P, cfg.seed, pt.run.partition) if pt.run.sampling == "shard" else None
        m2_cache[key] = estimate_second_moment(
            problem, iterates, pt.run.P, pt.run.batch_size, an["m2_trials"], seed=cfg.seed, shards=shards
        )
    m2 = m2_cache[key]
    M = m2.M
    gm = gamma(sess.n, pt.run.K)
    alpha = pt.run.schedule.alpha0
    inputs = {
        "n": sess.n, "K": pt.run.K, "P": pt.run.P, "T": pt.run.T, "alpha0": alpha,
        "schedule": pt.run.schedule.kind, "theta": pt.run.schedule.theta, "gamma": gm,
        "xi": {"value": xi, "source": f"running max over a {pilot_T}-step pilot run", "p99": xi_sum.p99},
        "M_squared": {
            "value": m2.M_squared, "source": "estimated", "points": len(iterates), "trials": an["m2_trials"],
            "iterate_set": f"pilot iterates at steps {sorted(keep)}" + (" plus x*" if xstar is not None else ""),
            "per_point": list(m2.per_point),
        },
        "c": {"value": c, "source": c_src if c is not None else "not available (non-convex)"},
        "L": {"value": L, "source": c_src},
        "f0_minus_fstar": {"value": float(problem.loss(x0)) - fstar, "fstar_source": f_src},
    }
    report = {"status": "ok", "inputs": inputs}

    # strongly convex case
    if c is None or c <= 0:
        report["convex"] = {"applicable": False, "reason": "no strong convexity constant for this problem"}
    else:
        d0 = float(np.sum((x0 - xstar) ** 2))
        eps = an["epsilon"] if an["epsilon"] is not None else 1e-3 * d0
        eps_src = "configured" if an["epsilon"] is not None else "default 1e-3 * ||x0 - x*||^2"
        if eps <= 0:
            report["convex"] = {"applicable": False, "reason": "epsilon is 0 (x0 equals x*)"}
        else:
            cc = convex_constants(sess.n, pt.run.K, xi, pt.run.P, alpha, c, M, eps)
            win = convex_lr_window(c, eps, M, cc.C_prime)
            fb = convex_failure_bound(alpha, c, eps, M, cc.C_prime, d0, pt.run.T)
            if pt.run.schedule.kind != "constant":
                caveats.append("convex bound assumes a constant step; alpha0 was used")
            if gm == 0:
                caveats.append("dense pilot (K = n): gamma = 0, C' reduces to 2 xi / P")
            report["convex"] = {
                "applicable": True,
                "epsilon": eps, "epsilon_source": eps_src, "dist0_sq": d0,
                "C": cc.C, "C_prime": cc.C_prime, "H": cc.H, "H_feasible": cc.feasible, "H_reason": cc.reason,
                "window": {
                    "alpha_max": win.alpha_max, "feasible": win.feasible, "first_term": win.first_term,
                    "second_term": win.second_term, "eps_min": win.eps_min, "alpha_inside": bool(win.feasible and 0 < alpha <= win.alpha_max),
                },
                "failure_bound": {
                    "bound": fb.bound, "reported": fb.clamped, "feasible": fb.feasible, "vacuous": fb.vacuous,
                    "denominator": fb.denominator, "reason": fb.reason,
                },
            }
            if not win.feasible:
                caveats.append(f"window infeasible: epsilon must exceed (M C'/c)^2 = {win.eps_min:.4g}")
            elif fb.vacuous:
                caveats.append("failure bound exceeds 1 (vacuous)")

    # non-convex case
    dchk = check_D(pt.run.schedule, gm, t_max=an["d_t_max"])
    nc = {"D": {"sup_partial": dchk.sup_partial, "bounded": dchk.bounded, "ratio_2gamma2": dchk.ratio, "t_max": an["d_t_max"]}}
    f0f = inputs["f0_minus_fstar"]["value"]
    if gm == 0:
        nc.update({"applicable": False, "reason": "gamma = 0 (K = n): the (1 + xi/(P gamma)) factor is singular"})
    elif not dchk.bounded:
        nc.update({"applicable": False, "reason": f"unbounded D: 2 gamma^2 = {dchk.ratio:.4g} or partial sums not settled"})
    else:
        try:
            b = nonconvex_bound(NonconvexBoundInputs(f0f, L, M, xi, pt.run.P, gm, dchk.sup_partial, pt.run.schedule, pt.run.T))
            a_fix = fixed_lr_nonconvex(f0f, L, M, xi, pt.run.P, gm, dchk.sup_partial, pt.run.T)
            nc.update(
                {
                    "applicable": True,
                    "bound": b,
                    "fixed_alpha": a_fix,
                    "fixed_alpha_bound": fixed_lr_closed_form(f0f, L, M, xi, pt.run.P, gm, dchk.sup_partial, pt.run.T),
                }
            )
        except (NotApplicableError, InvalidParameterError) as exc:
            nc.update({"applicable": False, "reason": str(exc)})
    report["nonconvex"] = nc
    if c is None:
        caveats.append("L is a numerical estimate; f* replaced by its lower bound 0")
    report["caveats"] = caveats
    return report


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def bounds_table(reports):
    lines = []
    head = ["label", "gamma", "xi", "M^2", "C'", "alpha_max", "in window", "P(fail)", "D", "nonconvex"]
    rows = []
    for label, r in reports:
        if r.get("status") != "ok":
            rows.append([label] + ["-"] * 8 + [r.get("status")])
            continue
        i, cv, nc = r["inputs"], r["convex"], r["nonconvex"]
        rows.append(
            [
                label, _fmt(i["gamma"]), _fmt(i["xi"]["value"]), _fmt(i["M_squared"]["value"]),
                _fmt(cv.get("C_prime")), _fmt(cv.get("window", {}).get("alpha_max")),
                _fmt(cv.get("window", {}).get("alpha_inside")), _fmt(cv.get("failure_bound", {}).get("reported")),
                _fmt(nc["D"]["sup_partial"]) if nc["D"]["bounded"] else "unbounded",
                _fmt(nc.get("bound")) if nc.get("applicable") else "n/a",
            ]
        )
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    lines.append(fmt.format(*head))
    for row in rows:
        lines.append(fmt.format(*row))
    for label, r in reports:
        for cav in r.get("caveats", []):
            lines.append(f"note [{label}]: {cav}")
        if r.get("status") == "ok":
            lines.append(f"provenance [{label}]: M^2 {r['inputs']['M_squared']['source']}, xi {r['inputs']['xi']['source']}, "
                         f"c/L {r['inputs']['L']['source']}, f* {r['inputs']['f0_minus_fstar']['fstar_source']}")
    return "\n".join(lines) + "\n"


def cmd_bounds(sess):
    opt = optimum(sess.problem)
    consts = constants(sess.problem)
    m2_cache = {}
    reports = []
    for pt in sess.points():
        rep = emit_bounds(sess, pt, m2_cache, consts, opt)
        write_json(sess.run_dir(pt) / "bounds.json", sess.meta(label=pt.label), rep)
        reports.append((pt.label, rep))
    write_json(sess.out / "bounds.json", sess.meta(), {"reports": {k: v for k, v in reports}})
    meta_line = "# " + json.dumps(sess.meta(), sort_keys=True) + "\n"
    (sess.out / "bounds.txt").write_text(meta_line + bounds_table(reports))


COMMANDS = {
    "run": (cmd_run, "run a single configuration"),
    "sweep": (cmd_sweep, "run every point of the sweep cross product"),
    "validate-assumption": (cmd_validate_assumption, "emit per-step xi series and summaries"),
    "norm-curve": (cmd_norm_curve, "emit (K, ||g - TopK(g)|| / ||g||) tables"),
    "convergence-sweep": (cmd_convergence_sweep, "loss curves for K in {0.1%%, 1%%, 10%%, 100%%} of n"),
    "bounds": (cmd_bounds, "evaluate convex and non-convex bounds with provenance"),
    "check-invariants": (cmd_check_invariants, "verify conservation, telescoping and the gap recursion inequalities"),
}


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def make_parser():
    parser = argparse.ArgumentParser(prog="topksgd", description="TopK SGD with error feedback: simulator and analysis.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--seed", type=_seed, default=None, help="override the master seed")
        p.add_argument("--out", default=None, help=f"output directory (overrides ${ENV_OUT} and the config)")
        p.add_argument("--threads", type=_positive, default=None, help="worker threads in parallel mode")
        p.add_argument("--mode", choices=("sequential", "parallel"), default=None)
        p.add_argument("-q", "--quiet", action="store_true")
    return parser


def main(argv=None):
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config).with_seed(args.seed)
        sess = Session(cfg, args, args.command)
        sess.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command][0](sess)
    except (ConfigError, LibSVMParseError, InvalidParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return sess.exit


if __name__ == "__main__":
    sys.exit(main())
