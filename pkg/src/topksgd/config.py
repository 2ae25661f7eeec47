"""TOML experiment configuration: parsing, validation and sweep expansion.

A document has four tables. ``[problem]`` picks and parameterizes the
objective, ``[run]`` holds the engine settings, ``[run.schedule]`` the step
sizes and ``[analysis]`` the measurement toggles. ``K``, ``K_fraction``,
``P``, ``alpha0`` and ``compressor`` may be lists; their cross product is the
sweep. Example::

    seed = 7
    out = "runs/fig3"

    [problem]
    kind = "synth_regression"
    m = 10000
    n = 1024

    [run]
    P = 8
    K_fraction = [0.001, 0.01, 0.1, 1.0]
    T = 2000

    [run.schedule]
    kind = "constant"
    alpha0 = 1e-4
"""

import hashlib
import itertools
import json
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .engine import COMPRESSORS, LearningRateSchedule, RunConfig, resolve_K

DEFAULT_SEED = 42
DEFAULT_SWEEP_CAP = 512
PROBLEM_KINDS = ("synth_regression", "libsvm", "tanh_regression")


class ConfigError(ValueError):
    """Invalid configuration; carries the dotted key path and source line."""

    def __init__(self, msg, path=None, line=None):
        where = ""
        if path:
            where = f"{path}"
            if line:
                where += f" (line {line})"
            where += ": "
        super().__init__(where + msg)
        self.path = path
        self.line = line


# key -> (types, default, constraint, is_sweep_axis); default REQUIRED marks mandatory keys
REQUIRED = object()


def _pos(x):
    """> 0"""
    return x > 0


def _nonneg(x):
    """>= 0"""
    return x >= 0


def _frac(x):
    """in (0, 1]"""
    return 0 < x <= 1


def _choice(*opts):
    def check(x):
        return x in opts

    check.__doc__ = "one of " + ", ".join(map(repr, opts))
    return check


_INT = (int,)
_NUM = (int, float)

SCHEMA = {
    "": {
        "seed": (_INT, DEFAULT_SEED, _nonneg, False),
        "out": ((str,), None, None, False),
        "max_sweep": (_INT, DEFAULT_SWEEP_CAP, _pos, False),
        "threshold_rel": (_NUM, 1e-3, _frac, False),
    },
    "problem": {
        "kind": ((str,), REQUIRED, _choice(*PROBLEM_KINDS), False),
        "m": (_INT, None, _pos, False),
        "n": (_INT, None, _pos, False),
        "noise_sigma": (_NUM, None, _nonneg, False),
        "l2_reg": (_NUM, None, _nonneg, False),
        "data_seed": (_INT, None, _nonneg, False),
        "path": ((str,), None, None, False),
        "n_features": (_INT, None, _pos, False),
        "n_in": (_INT, None, _pos, False),
        "hidden": (_INT, None, _pos, False),
    },
    "run": {
        "P": (_INT, REQUIRED, _pos, True),
        "K": (_INT, None, _pos, True),
        "K_fraction": (_NUM, None, _frac, True),
        "T": (_INT, REQUIRED, _pos, False),
        "batch_size": (_INT, 16, _pos, False),
        "compressor": ((str,), "topk", _choice(*COMPRESSORS), True),
        "sampling": ((str,), "shard", _choice("shard", "global"), False),
        "partition": ((str,), "contiguous", _choice("contiguous", "shuffled"), False),
        "mode": ((str,), "sequential", _choice("sequential", "parallel"), False),
        "threads": (_INT, None, _pos, False),
        "x0": ((str,), "zero", _choice("zero", "random"), False),
        "x0_scale": (_NUM, 0.5, _pos, False),
    },
    "run.schedule": {
        "kind": ((str,), "constant", _choice("constant", "power_law", "fixed_nonconvex"), False),
        "alpha0": (_NUM, REQUIRED, _pos, True),
        "theta": (_NUM, 0.5, _pos, False),
    },
    "analysis": {
        "record_xi": ((bool,), True, None, False),
        "record_lemma_slack": ((bool,), True, None, False),
        "check_invariants": ((bool,), True, None, False),
        "stop_at_threshold": ((bool,), False, None, False),
        "epsilon": (_NUM, None, _pos, False),
        "m2_points": (_INT, 4, _pos, False),
        "m2_trials": (_INT, 4, _pos, False),
        "pilot_T": (_INT, 500, _pos, False),
        "norm_curve_samples": (_INT, 16, _pos, False),
        "norm_curve_K": (_INT, None, _pos, True),
        "d_t_max": (_INT, 100_000, _pos, False),
    },
}

PROBLEM_DEFAULTS = {
    "synth_regression": {"m": 10000, "n": 1024, "noise_sigma": 0.1, "l2_reg": 0.0, "data_seed": 42},
    "libsvm": {"l2_reg": 1e-4},
    "tanh_regression": {"m": 512, "n_in": 16, "hidden": 8, "noise_sigma": 0.05, "data_seed": 0},
}
PROBLEM_KEYS = {
    "synth_regression": {"kind", "m", "n", "noise_sigma", "l2_reg", "data_seed"},
    "libsvm": {"kind", "path", "l2_reg", "n_features"},
    "tanh_regression": {"kind", "m", "n_in", "hidden", "noise_sigma", "data_seed"},
}


def _key_lines(text):
    """Map dotted key paths to their 1-based line numbers in ``text``."""
    lines = {}
    table = ""
    head = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\- ]+?)\s*\]\s*(#.*)?$")
    assign = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")
    for i, raw in enumerate(text.splitlines(), start=1):
        m = head.match(raw)
        if m:
            table = m.group(1).replace(" ", "")
            lines.setdefault(table, i)
            continue
        m = assign.match(raw)
        if m:
            key = f"{table}.{m.group(1)}" if table else m.group(1)
            lines.setdefault(key, i)
    return lines


@dataclass(frozen=True)
class SweepPoint:
    label: str
    run: RunConfig
    axes: dict


@dataclass
class ExperimentConfig:
    """Validated experiment: problem spec, engine settings, analysis toggles."""

    problem: dict
    run: dict
    schedule: dict
    analysis: dict
    seed: int = DEFAULT_SEED
    out: str = None
    max_sweep: int = DEFAULT_SWEEP_CAP
    threshold_rel: float = 1e-3
    source: str = None
    _lines: dict = field(default_factory=dict, repr=False)

    def as_dict(self):
        """Everything that can change results; execution mode and threads cannot."""
        run = {k: v for k, v in self.run.items() if k not in ("mode", "threads")}
        return {
            "seed": self.seed,
            "threshold_rel": self.threshold_rel,
            "max_sweep": self.max_sweep,
            "problem": dict(self.problem),
            "run": run,
            "schedule": dict(self.schedule),
            "analysis": dict(self.analysis),
        }

    def digest(self):
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed):
        if seed is None:
            return self
        if not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer", "seed")
        c = ExperimentConfig(**{**self.__dict__})
        c.seed = seed
        return c

    def axes(self):
        """Sweep axes in expansion order, each a list of values."""
        ax = {}
        if self.run.get("K") is not None:
            ax["K"] = _as_list(self.run["K"])
        else:
            ax["K_fraction"] = _as_list(self.run["K_fraction"])
        ax["P"] = _as_list(self.run["P"])
        ax["alpha0"] = _as_list(self.schedule["alpha0"])
        ax["compressor"] = _as_list(self.run["compressor"])
        return ax

    def is_sweep(self):
        return any(len(v) > 1 for v in self.axes().values())

    def expand(self, n, x0=None, override=None):
        """RunConfigs for every sweep point given the problem dimension n.

        ``override`` replaces whole axes, e.g. ``{"K_fraction": [...]}``.
        """
        ax = self.axes()
        if override:
            if "K" in override or "K_fraction" in override:
                ax.pop("K", None)
                ax.pop("K_fraction", None)
            ax = {**override, **ax}
        size = 1
        for v in ax.values():
            size *= len(v)
        if size > self.max_sweep:
            raise ConfigError(f"sweep has {size} points, cap is {self.max_sweep}", "max_sweep")
        names = list(ax)
        points = []
        for combo in itertools.product(*(ax[k] for k in names)):
            vals = dict(zip(names, combo))
            if "K" in vals:
                K = int(vals["K"])
                if K > n:
                    raise ConfigError(f"K={K} exceeds the problem dimension n={n}", "run.K", self._lines.get("run.K"))
            else:
                K = resolve_K(vals["K_fraction"], n)
            schedule = LearningRateSchedule(self.schedule["kind"], float(vals["alpha0"]), float(self.schedule["theta"]))
            rc = RunConfig(
                P=int(vals["P"]),
                K=K,
                T=int(self.run["T"]),
                schedule=schedule,
                batch_size=int(self.run["batch_size"]),
                seed=self.seed,
                compressor=vals["compressor"],
                record_xi=bool(self.analysis["record_xi"]),
                record_lemma_slack=bool(self.analysis["record_lemma_slack"]),
                sampling=self.run["sampling"],
                partition=self.run["partition"],
                x0=None if x0 is None else tuple(float(v) for v in x0),
            )
            label = "_".join(f"{k}={_fmt(v)}" for k, v in vals.items())
            points.append(SweepPoint(label, rc, vals))
        return points


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _as_list(v):
    return list(v) if isinstance(v, list) else [v]


def _type_name(types):
    return " or ".join({int: "integer", float: "number", str: "string", bool: "boolean"}[t] for t in types)


def _check_value(key, value, spec, lines):
    types, _, constraint, sweep = spec
    line = lines.get(key)
    values = value if (sweep and isinstance(value, list)) else [value]
    if isinstance(value, list) and not sweep:
        raise ConfigError("lists are only allowed on sweep axes", key, line)
    if sweep and isinstance(value, list) and not value:
        raise ConfigError("sweep list is empty", key, line)
    for v in values:
        ok = isinstance(v, types) and not (isinstance(v, bool) and bool not in types)
        if not ok:
            raise ConfigError(f"expected {_type_name(types)}, got {type(v).__name__} {v!r}", key, line)
        if constraint is not None and not constraint(v):
            raise ConfigError(f"must be {constraint.__doc__}, got {v!r}", key, line)


def parse_config(text, base_dir=None):
    """Parse and validate a TOML experiment document.

    Relative paths resolve against ``base_dir`` (the config file's directory
    when loaded from disk, else the working directory).
    """
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"malformed TOML: {exc}", "<document>", int(m.group(1)) if m else None) from None
    lines = _key_lines(text)
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    if not doc:
        raise ConfigError(
            "empty document; required keys: problem.kind, run.P, run.T, run.K or run.K_fraction, run.schedule.alpha0"
        )

    sections = {}
    for table, spec in SCHEMA.items():
        if table == "":
            src = {k: v for k, v in doc.items() if not isinstance(v, dict)}
        elif table == "run.schedule":
            src = doc.get("run", {}).get("schedule", {})
        else:
            src = doc.get(table, {})
        if not isinstance(src, dict):
            raise ConfigError("expected a table", table, lines.get(table))
        prefix = f"{table}." if table else ""
        for k, v in src.items():
            if table == "run" and k == "schedule":
                continue
            full = prefix + k
            if k not in spec or isinstance(v, dict):
                raise ConfigError("unknown key", full, lines.get(full))
            _check_value(full, v, spec[k], lines)
        filled = {}
        for k, (types, default, _, _) in spec.items():
            if k in src:
                filled[k] = src[k]
            elif default is REQUIRED:
                raise ConfigError("required key is missing", prefix + k, lines.get(table))
            else:
                filled[k] = default
        sections[table] = filled

    for k, v in doc.items():
        if isinstance(v, dict) and k not in SCHEMA:
            raise ConfigError("unknown table", k, lines.get(k))

    run = sections["run"]
    if (run["K"] is None) == (run["K_fraction"] is None):
        raise ConfigError("exactly one of K and K_fraction is required", "run.K", lines.get("run.K") or lines.get("run"))

    problem = sections["problem"]
    kind = problem["kind"]
    given = {k for k, v in doc.get("problem", {}).items()}
    stray = sorted(given - PROBLEM_KEYS[kind])
    if stray:
        full = f"problem.{stray[0]}"
        raise ConfigError(f"not a parameter of problem kind {kind!r}", full, lines.get(full))
    clean = {"kind": kind}
    for k in sorted(PROBLEM_KEYS[kind] - {"kind"}):
        v = problem.get(k)
        clean[k] = PROBLEM_DEFAULTS[kind].get(k) if v is None else v
    if kind == "libsvm":
        if clean.get("path") is None:
            raise ConfigError("required for libsvm problems", "problem.path", lines.get("problem"))
        p = Path(clean["path"])
        p = p if p.is_absolute() else (base / p)
        if not p.is_file():
            raise ConfigError(f"file not found: {p}", "problem.path", lines.get("problem.path"))
        clean["path"] = str(p.resolve())
        if not clean["l2_reg"] > 0:
            raise ConfigError("logistic problems need l2_reg > 0", "problem.l2_reg", lines.get("problem.l2_reg"))

    top = sections[""]
    out = top["out"]
    if out is not None:
        p = Path(out)
        out = str((p if p.is_absolute() else base / p).resolve())

    cfg = ExperimentConfig(
        problem=clean,
        run=run,
        schedule=sections["run.schedule"],
        analysis=sections["analysis"],
        seed=top["seed"],
        out=out,
        max_sweep=top["max_sweep"],
        threshold_rel=float(top["threshold_rel"]),
        _lines=lines,
    )
    if top["seed"] >= 2**64:
        raise ConfigError("must fit in an unsigned 64-bit integer", "seed", lines.get("seed"))
    size = 1
    for v in cfg.axes().values():
        size *= len(v)
    if size > cfg.max_sweep:
        raise ConfigError(f"sweep has {size} points, cap is {cfg.max_sweep}", "run", lines.get("run"))
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    cfg = parse_config(text, base_dir=path.resolve().parent)
    cfg.source = str(path)
    return cfg
