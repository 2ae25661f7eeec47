"""Barrier-synchronous simulation of TopK SGD with error feedback.

Each step every node draws a minibatch from its shard, adds its scaled
gradient to its error accumulator, ships the TopK of the result and keeps the
remainder as its new error. The shared view ``v`` moves by the average of the
shipped vectors; the auxiliary iterate ``x_aux`` moves by the average of the
untruncated scaled gradients, so ``v - x_aux`` always equals the mean error.
"""

import csv
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import rng as rngmod
from .analysis import measure_xi
from .data import Shard, partition
from .vecmath import InvalidParameterError, SparseVector, aggregate_fixed_order, gamma, top_k_indices

__version__ = "0.1.0"

COMPRESSORS = ("topk", "randomk", "identity")
INDEX_BYTES = 4
VALUE_BYTES = 8


class DivergenceError(RuntimeError):
    def __init__(self, t, node, what, trace=None):
        where = "shared view" if node is None else f"node {node}"
        super().__init__(f"non-finite {what} at step {t} ({where})")
        self.t = t
        self.node = node
        self.trace = trace


@dataclass(frozen=True)
class LearningRateSchedule:
    """``alpha_t`` for t >= 1; ``power_law`` is ``alpha0 * t**-theta``.

    ``alpha_0`` (only needed by the D-condition) is taken equal to ``alpha_1``.
    ``fixed_nonconvex`` is a constant step whose value was derived from the
    non-convex bound; it behaves like ``constant``.
    """

    kind: str = "constant"
    alpha0: float = 0.01
    theta: float = 0.5

    def __post_init__(self):
        if self.kind not in ("constant", "power_law", "fixed_nonconvex"):
            raise InvalidParameterError(f"unknown schedule kind {self.kind!r}")
        if not self.alpha0 > 0:
            raise InvalidParameterError("alpha0 must be > 0")
        if self.kind == "power_law" and not self.theta > 0:
            raise InvalidParameterError("theta must be > 0")

    def __call__(self, t):
        if self.kind == "power_law":
            return self.alpha0 * max(t, 1) ** -self.theta
        return self.alpha0

    def sequence(self, t_max):
        """``alpha_0 .. alpha_{t_max}`` as an array."""
        t = np.maximum(np.arange(t_max + 1, dtype=np.float64), 1.0)
        if self.kind == "power_law":
            return self.alpha0 * t**-self.theta
        return np.full(t_max + 1, float(self.alpha0))


@dataclass(frozen=True)
class RunConfig:
    P: int
    K: int
    T: int
    schedule: LearningRateSchedule = field(default_factory=LearningRateSchedule)
    batch_size: int = 16
    seed: int = 42
    compressor: str = "topk"
    record_xi: bool = True
    record_lemma_slack: bool = True
    sampling: str = "shard"
    partition: str = "contiguous"
    x0: tuple = None

    def __post_init__(self):
        if self.P < 1:
            raise InvalidParameterError("P must be >= 1")
        if self.T < 1:
            raise InvalidParameterError("T must be >= 1")
        if self.K < 1:
            raise InvalidParameterError("K must be >= 1")
        if self.batch_size < 1:
            raise InvalidParameterError("batch_size must be >= 1")
        if self.compressor not in COMPRESSORS:
            raise InvalidParameterError(f"unknown compressor {self.compressor!r}")
        if self.sampling not in ("shard", "global"):
            raise InvalidParameterError(f"unknown sampling mode {self.sampling!r}")
        rngmod.check_seed(self.seed)
        if self.x0 is not None:
            object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))

    def validate_for(self, n):
        if self.K > n:
            raise InvalidParameterError(f"K={self.K} exceeds dimension n={n}")
        if self.x0 is not None and len(self.x0) != n:
            raise InvalidParameterError("x0 length does not match the problem dimension")

    def as_dict(self):
        d = asdict(self)
        d["schedule"] = asdict(self.schedule)
        d["x0"] = None if self.x0 is None else list(self.x0)
        return d

    def digest(self):
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class NodeState:
    node_id: int
    error: np.ndarray
    shard: Shard


@dataclass
class WorldState:
    v: np.ndarray
    x_aux: np.ndarray
    step: int = 0


@dataclass
class StepRecord:
    t: int
    alpha: float
    loss_v: float
    loss_x: float
    gap_norm: float
    grad_norm_sq_v: float
    xi_t: float = None
    lhs_norm: float = None
    alpha_grad_norm: float = None
    lemma1_slack: float = None
    aux_step_norm: float = 0.0
    conservation_residual: float = 0.0
    bytes_sent_per_node: int = 0


RECORD_FIELDS = [f.name for f in fields(StepRecord)]


@dataclass
class StepInfo:
    """Per-step quantities that are not part of the record."""

    t: int
    alpha: float
    grads: list
    accs: list
    payloads: list
    mean_alpha_grad: np.ndarray
    update: np.ndarray


@dataclass
class Trace:
    config: RunConfig
    records: list
    final_v: np.ndarray
    final_x: np.ndarray
    initial_loss: float
    n: int
    stopped_early: bool = False

    def column(self, name):
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records])

    def header(self, extra=None):
        head = {
            "type": "header",
            "config": self.config.as_dict(),
            "config_hash": self.config.digest(),
            "seed": self.config.seed,
            "version": __version__,
            "n": self.n,
            "initial_loss": self.initial_loss,
            "steps": len(self.records),
            "stopped_early": self.stopped_early,
        }
        if extra:
            head.update(extra)
        return head

    def to_jsonl(self, path, extra=None):
        with open(path, "w") as fh:
            fh.write(_dumps(self.header(extra)) + "\n")
            for r in self.records:
                fh.write(_dumps(asdict(r)) + "\n")

    def to_csv(self, path, extra=None):
        with open(path, "w", newline="") as fh:
            fh.write("# " + _dumps(self.header(extra)) + "\n")
            w = csv.writer(fh)
            w.writerow(RECORD_FIELDS)
            for r in self.records:
                w.writerow([_cell(getattr(r, k)) for k in RECORD_FIELDS])


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def _dumps(obj):
    return json.dumps(_clean(obj), sort_keys=True)


def _cell(v):
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else v


def bytes_per_node(kind, K, n):
    if kind == "identity":
        return n * VALUE_BYTES
    return K * (INDEX_BYTES + VALUE_BYTES)


def compress(acc, K, kind, rng_stream=None):
    """Split an accumulator into a sparse payload and the retained error."""
    n = acc.shape[0]
    if not 1 <= K <= n:
        raise InvalidParameterError(f"K must satisfy 1 <= K <= n={n}, got {K}")
    if kind == "topk":
        idx = top_k_indices(acc, K)
    elif kind == "randomk":
        if rng_stream is None:
            raise InvalidParameterError("randomk needs an rng stream")
        idx = np.sort(rng_stream.choice(n, size=K, replace=False))
        idx = idx[acc[idx] != 0.0]
    elif kind == "identity":
        idx = np.flatnonzero(acc)
    else:
        raise InvalidParameterError(f"unknown compressor {kind!r}")
    payload = SparseVector._trusted(idx, acc[idx], n)
    err = acc.copy()
    err[idx] = 0.0
    return payload, err


def _node_work(node, v, t, alpha, problem, config):
    g = rngmod.node_stream(config.seed, node.node_id, t)
    pool = node.shard.sample_indices if config.sampling == "shard" else None
    if pool is None:
        batch = g.choice(problem.n_samples, size=min(config.batch_size, problem.n_samples), replace=False)
    else:
        batch = g.choice(pool, size=min(config.batch_size, pool.size), replace=False)
    grad = problem.grad_minibatch(v, batch, g)
    scaled = alpha * grad
    acc = node.error + scaled
    if not np.all(np.isfinite(acc)):
        return node.node_id, scaled, acc, None, None
    payload, err = compress(acc, config.K, config.compressor, g)
    return node.node_id, scaled, acc, payload, err


def step(world, nodes, problem, config, executor=None, gamma_value=None):
    """Advance one synchronous round; returns ``(world, nodes, record, info)``.

    Node work may run on ``executor``; aggregation always happens afterwards
    in ascending node order, so the result does not depend on scheduling.
    """
    # overflow is reported as DivergenceError, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        return _step(world, nodes, problem, config, executor, gamma_value)


def _step(world, nodes, problem, config, executor, gamma_value):
    t = world.step + 1
    if t > config.T:
        raise InvalidParameterError("run already completed T steps")
    alpha = config.schedule(t)
    P = config.P
    v = world.v
    if executor is None:
        results = [_node_work(nd, v, t, alpha, problem, config) for nd in nodes]
    else:
        results = list(executor.map(lambda nd: _node_work(nd, v, t, alpha, problem, config), nodes))
    for node_id, _, _, payload, _ in results:
        if payload is None:
            raise DivergenceError(t, node_id, "accumulator")

    scaled = [r[1] for r in results]
    accs = [r[2] for r in results]
    payloads = [r[3] for r in results]
    errors = [r[4] for r in results]

    update = aggregate_fixed_order(payloads, P)
    mean_alpha_grad = np.zeros_like(v)
    for s in scaled:
        mean_alpha_grad += s
    mean_alpha_grad /= P
    new_v = v - update
    new_x = world.x_aux - mean_alpha_grad
    if not (np.all(np.isfinite(new_v)) and np.all(np.isfinite(new_x))):
        raise DivergenceError(t, None, "parameter")

    mean_err = np.zeros_like(v)
    for e in errors:
        mean_err += e
    mean_err /= P
    gap_vec = new_v - new_x
    gap = float(np.linalg.norm(gap_vec))
    loss_v, grad_v = problem.loss_and_gradient(new_v)
    loss_x = problem.loss(new_x)
    if not (math.isfinite(loss_v) and math.isfinite(loss_x)):
        raise DivergenceError(t, None, "loss")

    n = v.shape[0]
    rec = StepRecord(
        t=t,
        alpha=float(alpha),
        loss_v=float(loss_v),
        loss_x=float(loss_x),
        gap_norm=gap,
        grad_norm_sq_v=float(grad_v @ grad_v),
        aux_step_norm=float(np.linalg.norm(mean_alpha_grad)),
        conservation_residual=float(np.max(np.abs(gap_vec - mean_err))),
        bytes_sent_per_node=bytes_per_node(config.compressor, config.K, n),
    )
    if config.record_xi or config.record_lemma_slack:
        xm = measure_xi(accs, mean_alpha_grad, config.K, P, t)
        if config.record_xi:
            rec.xi_t = xm.xi_t
            rec.lhs_norm = xm.lhs_norm
            rec.alpha_grad_norm = xm.grad_norm
        if config.record_lemma_slack:
            gm = gamma(n, config.K) if gamma_value is None else gamma_value
            prev_gap = float(np.linalg.norm(v - world.x_aux))
            # (xi_t / P) * ||x_{t+1} - x_t|| == lhs_norm / P, finite even when xi_t is not
            rhs = gm * prev_gap + gm * xm.grad_norm + xm.lhs_norm / P
            rec.lemma1_slack = rhs - gap

    new_nodes = [NodeState(nd.node_id, err, nd.shard) for nd, err in zip(nodes, errors)]
    info = StepInfo(t, alpha, scaled, accs, payloads, mean_alpha_grad, update)
    return WorldState(new_v, new_x, t), new_nodes, rec, info


def init_state(problem, config):
    n = problem.n_features
    config.validate_for(n)
    shards = partition(problem.n_samples, config.P, config.seed, config.partition)
    nodes = [NodeState(s.node_id, np.zeros(n), s) for s in shards]
    v0 = np.zeros(n) if config.x0 is None else np.array(config.x0, dtype=np.float64)
    return WorldState(v0.copy(), v0.copy(), 0), nodes


def run(problem, config, *, mode="sequential", threads=None, callback=None):
    """Execute T steps from ``v_0`` and return the Trace.

    ``mode`` is ``sequential`` or ``parallel``; both produce identical traces.
    ``callback(world, nodes, record, info)`` may return True to stop early.
    """
    if mode not in ("sequential", "parallel"):
        raise InvalidParameterError(f"unknown mode {mode!r}")
    world, nodes = init_state(problem, config)
    n = problem.n_features
    gm = gamma(n, config.K)
    initial_loss = float(problem.loss(world.v))
    records = []

    def partial(stopped=False):
        return Trace(config, records, world.v, world.x_aux, initial_loss, n, stopped)

    executor = None
    if mode == "parallel":
        executor = ThreadPoolExecutor(max_workers=threads or min(config.P, 8))
    try:
        for _ in range(config.T):
            try:
                world, nodes, rec, info = step(world, nodes, problem, config, executor, gm)
            except DivergenceError as exc:
                exc.trace = partial()
                raise
            records.append(rec)
            if callback is not None and callback(world, nodes, rec, info):
                return partial(stopped=len(records) < config.T)
    finally:
        if executor is not None:
            executor.shutdown()
    return partial()


def with_K(config, K):
    return replace(config, K=int(K))


def resolve_K(fraction, n):
    """``max(1, round(fraction * n))`` capped at n."""
    return int(min(n, max(1, round(fraction * n))))
