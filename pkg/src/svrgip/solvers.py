"""Landweber, SVRG and regularized SVRG for row-partitioned linear systems.

All three methods minimize ``J(x) = ||A x - y||^2 / (2 n)`` with a constant
step ``c0``.  SVRG refreshes its anchor point every ``M`` inner steps; the
regularized variant runs the same iteration with a spectrally truncated
operator.  Work is measured in epochs: one Landweber step, or
``n M / (n + M)`` SVRG inner steps.
"""

from __future__ import annotations

import dataclasses
import math
import time
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numba
import numpy as np

from .linop import BlockOperator, TruncationRule, compute_norms, truncate
from .problems import InverseProblem, rng_stream

__all__ = [
    "METHODS",
    "DivergenceError",
    "EmptyOperatorError",
    "StoppingRule",
    "SolverConfig",
    "RunRecord",
    "StepConstants",
    "compute_step_constants",
    "default_truncation",
    "epochs_of",
    "iterations_for",
    "a_priori_epochs",
    "select_index",
    "stop_decision",
    "svrg_path",
    "landweber_run",
    "svrg_run",
    "rsvrg_run",
    "solve",
]

METHODS = ("landweber", "svrg", "rsvrg")
DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    """The relative error left any reasonable range; the step size is too large."""


class EmptyOperatorError(ValueError):
    """Spectral truncation discarded every singular value."""


@dataclass(frozen=True)
class StoppingRule:
    """How a run picks its reported index ``k_*``.

    ``discrepancy`` and ``a_priori`` use data only; ``oracle_plateau`` and
    ``oracle_argmin`` need the exact solution and are meant for experiments.
    """

    kind: str = "max_epochs"
    tau: float = 1.01
    C: float = 1.0
    exponent: Optional[float] = None
    window: int = 10
    tol: float = 1e-3
    lm_reference: Optional[float] = None

    KINDS = ("discrepancy", "a_priori", "max_epochs", "oracle_plateau", "oracle_argmin")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown stopping rule {self.kind!r}")
        if self.kind == "discrepancy" and self.tau <= 1:
            raise ValueError("discrepancy principle needs tau > 1")
        if self.kind == "a_priori" and (self.exponent is None or self.C <= 0):
            raise ValueError("a_priori rule needs C > 0 and an exponent")
        if self.window < 1:
            raise ValueError("plateau window must be at least 1")

    @classmethod
    def a_priori(cls, C: float, nu: float) -> "StoppingRule":
        return cls(kind="a_priori", C=C, exponent=2.0 / (1 + 2 * nu))

    @property
    def needs_solution(self) -> bool:
        return self.kind.startswith("oracle")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: v for k, v in d.items() if v is not None}


@dataclass
class SolverConfig:
    method: str
    c0: float
    M: Optional[int] = None
    max_epochs: float = 1e5
    stopping: StoppingRule = field(default_factory=StoppingRule)
    truncation: Optional[TruncationRule] = None
    seed: int = 0
    replication: int = 0
    snapshot_every: int = 1
    record_adelta: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.c0 > 0:
            raise ValueError("c0 must be positive")
        if self.M is not None and self.M < 1:
            raise ValueError("M must be at least 1")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be at least 1")

    def inner_length(self, n: int) -> int:
        return 2 * n if self.M is None else int(self.M)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "c0": float(self.c0),
            "M": self.M,
            "max_epochs": float(self.max_epochs),
            "stopping": self.stopping.to_dict(),
            "truncation": None if self.truncation is None else
            {"a": float(self.truncation.a), "b": float(self.truncation.b)},
            "seed": int(self.seed),
            "replication": int(self.replication),
            "snapshot_every": int(self.snapshot_every),
        }


@dataclass(eq=False)
class RunRecord:
    """Snapshots of one run.

    ``sq_errors`` holds ``||x_k - x_exact||^2`` at each snapshot so that
    replications can be averaged in mean square.  ``x_final`` is the iterate
    at ``k_*``, except for an online ``oracle_plateau`` stop that selects an
    earlier snapshot: iterates are not retained, so it is then the iterate at
    which the plateau was detected.
    """

    epochs: np.ndarray
    rel_error: np.ndarray
    residual_norm: np.ndarray
    sq_errors: np.ndarray
    k_star_index: int
    k_star_epochs: float
    x_final: np.ndarray
    iterations_total: int
    wall_time: float
    config: dict
    x_last: Optional[np.ndarray] = None
    adelta_sq: Optional[np.ndarray] = None
    stopped_by: str = ""

    @property
    def trajectory(self):
        return list(zip(self.epochs.tolist(), self.rel_error.tolist(), self.residual_norm.tolist()))

    @property
    def e_star(self) -> float:
        return float(self.rel_error[self.k_star_index])

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "config": self.config,
            "k_star_epochs": round(float(self.k_star_epochs), 3),
            "k_star_index": int(self.k_star_index),
            "e_star": self.e_star,
            "iterations_total": int(self.iterations_total),
            "stopped_by": self.stopped_by,
            "trajectory": [[round(e, 3), r, s] for e, r, s in self.trajectory],
            "x_final": self.x_final.tolist(),
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d


@dataclass(frozen=True)
class StepConstants:
    L: float
    C0_bar: float
    C0: float


def compute_step_constants(op: BlockOperator, M: int) -> StepConstants:
    """Step-size thresholds for the mean-square and almost-sure bounds."""
    if M < 1:
        raise ValueError("M must be at least 1")
    if op.row_block_norms is None:
        op = compute_norms(op)
    L, norm, n = op.L, op.op_norm, op.n
    c_bar = max(1.0 / (norm * math.sqrt(5 * L * M / n)), 1.0 / (L * (10 + math.log(M))))
    c_as = 1.0 / (100 * math.sqrt(L) * M * norm * math.log(2 * math.e ** 2 * n * math.sqrt(L) / norm))
    return StepConstants(L=L, C0_bar=c_bar, C0=c_as)


def default_truncation(problem: InverseProblem, c1: float = 1.0) -> TruncationRule:
    """Truncation used in the benchmark runs.

    ``b = 1/(1 + 2 (nu + nu_e))`` and
    ``a = (||A|| / ||y||) (n^(nu + nu_e) / c1)^b``.
    """
    op = problem.operator
    s = problem.nu + problem.nu_e
    b = 1.0 / (1 + 2 * s)
    a = op.op_norm / np.linalg.norm(problem.y_exact) * (problem.n ** s / c1) ** b
    return TruncationRule(a=float(a), b=b)


def epochs_of(iterations: int, n: int, M: int) -> Fraction:
    """Epoch count of ``iterations`` SVRG inner steps."""
    return Fraction(iterations * (n + M), n * M)


def iterations_for(epochs: float, n: int, M: int) -> int:
    """Largest inner-step count whose epoch count does not exceed ``epochs``."""
    return int(math.floor(Fraction(epochs).limit_denominator(10 ** 9) * n * M / (n + M)))


def a_priori_epochs(rule: StoppingRule, delta: float) -> int:
    """``ceil(C * delta**-exponent)``; exact powers are not bumped up by rounding."""
    if delta <= 0:
        raise ValueError("a priori stopping needs delta > 0")
    v = rule.C * delta ** (-rule.exponent)
    r = round(v)
    if abs(v - r) <= 1e-9 * max(1.0, v):
        return int(r)
    return int(math.ceil(v))


def _plateau_index(errors: np.ndarray, window: int, tol: float) -> Optional[int]:
    for i in range(window, errors.size):
        ref = errors[i - window]
        if abs(errors[i] - ref) <= tol * ref:
            return i - window
    return None


def _lm_crossing_index(errors: np.ndarray, reference: float) -> Optional[int]:
    above = np.flatnonzero(errors > reference)
    if above.size == 0:
        return 0
    if above[-1] == errors.size - 1:
        return None
    return int(above[-1] + 1)


def select_index(rule: StoppingRule, errors, residuals, delta: float, epochs=None) -> Optional[int]:
    """Post-hoc choice of ``k_*`` along a (possibly averaged) trajectory.

    Returns a snapshot index, or ``None`` when the rule never fires.
    """
    errors = np.asarray(errors, dtype=float)
    kind = rule.kind
    if kind == "discrepancy":
        hit = np.flatnonzero(np.asarray(residuals) <= rule.tau * delta)
        return int(hit[0]) if hit.size else None
    if kind == "a_priori":
        hit = np.flatnonzero(np.asarray(epochs) >= a_priori_epochs(rule, delta))
        return int(hit[0]) if hit.size else None
    if kind == "max_epochs":
        return errors.size - 1
    if kind == "oracle_argmin":
        return int(np.argmin(errors))
    # oracle_plateau: earliest of the plateau start and the point after which
    # the error stays below the Landweber reference
    cands = [_plateau_index(errors, rule.window, rule.tol)]
    if rule.lm_reference is not None:
        cands.append(_lm_crossing_index(errors, rule.lm_reference))
    cands = [c for c in cands if c is not None]
    return min(cands) if cands else None


def stop_decision(rule: StoppingRule, errors, residuals, delta: float, epochs) -> Optional[int]:
    """Online check after the latest snapshot; returns ``k_*`` to stop, else ``None``.

    ``oracle_argmin`` never stops early.  ``oracle_plateau`` stops once a
    plateau is seen (the Landweber reference alone is not a reason to stop).
    """
    kind = rule.kind
    if kind == "discrepancy":
        return len(errors) - 1 if residuals[-1] <= rule.tau * delta else None
    if kind == "a_priori":
        return len(errors) - 1 if epochs[-1] >= a_priori_epochs(rule, delta) else None
    if kind == "oracle_plateau":
        e = np.asarray(errors, dtype=float)
        if e.size > rule.window and abs(e[-1] - e[-1 - rule.window]) <= rule.tol * e[-1 - rule.window]:
            return select_index(rule, e, residuals, delta)
    return None


@numba.njit(cache=True, nogil=True)
def _svrg_inner(a, offsets, x, anchor, g, c0, indices, adelta_sq):
    """Run ``len(indices)`` inner steps in place.

    When ``adelta_sq`` is non-empty, entry ``t`` receives ``||a (x_t - anchor)||^2``
    evaluated before step ``t``.
    """
    m = x.shape[0]
    rows = a.shape[0]
    d = np.empty(m)
    u = np.empty(m)
    record = adelta_sq.shape[0] > 0
    for t in range(indices.shape[0]):
        for j in range(m):
            d[j] = x[j] - anchor[j]
        if record:
            tot = 0.0
            for r in range(rows):
                acc = 0.0
                for j in range(m):
                    acc += a[r, j] * d[j]
                tot += acc * acc
            adelta_sq[t] = tot
        for j in range(m):
            u[j] = 0.0
        i = indices[t]
        for r in range(offsets[i], offsets[i + 1]):
            acc = 0.0
            for j in range(m):
                acc += a[r, j] * d[j]
            for j in range(m):
                u[j] += a[r, j] * acc
        for j in range(m):
            x[j] = x[j] - c0 * (u[j] + g[j])


def svrg_path(op: BlockOperator, y: np.ndarray, x0: np.ndarray, c0: float, M: int, indices) -> np.ndarray:
    """Iterates ``x_0, ..., x_k`` of SVRG for an explicit block index sequence."""
    a = np.ascontiguousarray(op.entries)
    off = op.offsets
    idx = np.asarray(indices, dtype=np.int64)
    x = np.array(x0, dtype=np.float64)
    out = [x.copy()]
    empty = np.empty(0)
    for k, i in enumerate(idx):
        if k % M == 0:
            anchor = x.copy()
            g = a.T @ (a @ anchor - y) / op.n
        _svrg_inner(a, off, x, anchor, g, c0, idx[k:k + 1], empty)
        out.append(x.copy())
    return np.array(out)


class _Recorder:
    def __init__(self, problem: InverseProblem):
        self.a = problem.operator.entries
        self.y = problem.y_noisy
        self.x_true = problem.x_exact
        nrm = np.linalg.norm(problem.x_exact)
        self.scale = nrm if nrm > 0 else 1.0
        self.epochs, self.errors, self.resid, self.sq = [], [], [], []
        self.best = None

    def __call__(self, epoch: float, x: np.ndarray, residual: Optional[float] = None) -> None:
        sq = float(np.dot(x - self.x_true, x - self.x_true))
        err = math.sqrt(sq) / self.scale
        if not err <= DIVERGENCE_LIMIT:
            raise DivergenceError(f"relative error {err:.3e} at epoch {epoch:.3f}")
        if residual is None:
            residual = float(np.linalg.norm(self.a @ x - self.y))
        self.epochs.append(float(epoch))
        self.errors.append(err)
        self.resid.append(residual)
        self.sq.append(sq)
        if self.best is None or err < self.best[0]:
            self.best = (err, len(self.errors) - 1, x.copy())

    def record(self, k_star: int, x_star: np.ndarray, x_last: np.ndarray, iters: int, t0: float,
               config: dict, stopped_by: str, adelta=None) -> RunRecord:
        return RunRecord(epochs=np.array(self.epochs), rel_error=np.array(self.errors),
                         residual_norm=np.array(self.resid), sq_errors=np.array(self.sq),
                         k_star_index=k_star, k_star_epochs=self.epochs[k_star], x_final=x_star,
                         iterations_total=iters, wall_time=time.perf_counter() - t0, config=config,
                         x_last=x_last, adelta_sq=adelta, stopped_by=stopped_by)


def landweber_run(problem: InverseProblem, config: SolverConfig) -> RunRecord:
    """Landweber iteration ``x <- x - c0 A^T (A x - y)``; one step is one epoch."""
    op = problem.operator
    if op.op_norm is None:
        op = compute_norms(op)
    if config.c0 > (1 + 1e-12) / op.op_norm ** 2:
        warnings.warn("Landweber step c0 exceeds ||A||^-2", RuntimeWarning, stacklevel=2)
    t0 = time.perf_counter()
    rule = config.stopping
    a, y, c0 = op.entries, problem.y_noisy, float(config.c0)
    max_iter = int(math.floor(config.max_epochs))
    rec = _Recorder(problem)
    x = np.array(problem.x0, dtype=np.float64)
    k = 0
    k_star = None
    stopped_by = "max_epochs"
    x_star = None
    while True:
        r = a @ x - y
        snap = k % config.snapshot_every == 0 or k == max_iter
        if snap:
            rec(k, x, float(np.linalg.norm(r)))
            k_star = stop_decision(rule, rec.errors, rec.resid, problem.delta, rec.epochs)
            if k_star is not None:
                stopped_by = rule.kind
                x_star = rec.best[2] if k_star == rec.best[1] else x.copy()
                break
        if k >= max_iter:
            break
        x = x - c0 * (a.T @ r)
        k += 1
    if k_star is None:
        k_star, x_star = _final_choice(rule, rec, x, problem.delta)
    return rec.record(k_star, x_star, x, k, t0, config.to_dict(), stopped_by)


def _final_choice(rule: StoppingRule, rec: _Recorder, x: np.ndarray, delta: float):
    if rule.kind == "oracle_argmin":
        return rec.best[1], rec.best[2]
    if rule.kind == "oracle_plateau":
        k = select_index(rule, rec.errors, rec.resid, delta)
        if k is not None:
            return k, x.copy()
    return len(rec.errors) - 1, x.copy()


def _check_step(op: BlockOperator, c0: float, what: str) -> None:
    if c0 > (1 + 1e-12) / op.L:
        raise ValueError(f"{what}: step c0={c0:.6g} exceeds 1/L={1 / op.L:.6g}")


def _svrg_loop(problem: InverseProblem, op_used: BlockOperator, config: SolverConfig) -> RunRecord:
    t0 = time.perf_counter()
    n = op_used.n
    M = config.inner_length(n)
    rule = config.stopping
    rng = rng_stream(config.seed, config.replication)
    a = np.ascontiguousarray(op_used.entries)
    off = op_used.offsets
    y = problem.y_noisy
    c0 = float(config.c0)

    budget = iterations_for(config.max_epochs, n, M)
    if rule.kind == "a_priori":
        budget = min(budget, int(math.ceil(a_priori_epochs(rule, problem.delta) * n * M / (n + M))))

    rec = _Recorder(problem)
    x = np.array(problem.x0, dtype=np.float64)
    rec(0.0, x)
    adelta = [] if config.record_adelta else None
    empty = np.empty(0)
    it = 0
    outer = 0
    k_star = stop_decision(rule, rec.errors, rec.resid, problem.delta, rec.epochs)
    stopped_by = rule.kind if k_star is not None else "max_epochs"
    x_star = x.copy() if k_star is not None else None
    while k_star is None and it < budget:
        anchor = x.copy()
        g = a.T @ (a @ anchor - y) / n
        idx = rng.integers(0, n, size=M)
        steps = min(M, budget - it)
        buf = np.zeros(steps) if adelta is not None else empty
        _svrg_inner(a, off, x, anchor, g, c0, idx[:steps], buf)
        if adelta is not None:
            adelta.append(buf)
        it += steps
        outer += 1
        if outer % config.snapshot_every == 0 or it >= budget:
            rec(float(epochs_of(it, n, M)), x)
            k_star = stop_decision(rule, rec.errors, rec.resid, problem.delta, rec.epochs)
            if k_star is not None:
                stopped_by = rule.kind
                x_star = rec.best[2] if k_star == rec.best[1] else x.copy()
    if k_star is None:
        k_star, x_star = _final_choice(rule, rec, x, problem.delta)
    ad = np.concatenate(adelta) if adelta else (np.empty(0) if adelta is not None else None)
    cfg = config.to_dict()
    cfg["M"] = M
    return rec.record(k_star, x_star, x, it, t0, cfg, stopped_by, ad)


def svrg_run(problem: InverseProblem, config: SolverConfig) -> RunRecord:
    """SVRG with the last inner iterate as the next anchor."""
    op = problem.operator
    if op.row_block_norms is None:
        op = compute_norms(op)
        problem = dataclasses.replace(problem, operator=op)
    _check_step(op, config.c0, "svrg")
    return _svrg_loop(problem, op, config)


def rsvrg_run(problem: InverseProblem, config: SolverConfig, operator: Optional[BlockOperator] = None) -> RunRecord:
    """SVRG driven by the truncated operator; residuals still use the exact one.

    ``operator`` overrides the surrogate (it is then used as given).
    """
    op = problem.operator
    if op.svd is None:
        op = compute_norms(op)
        problem = dataclasses.replace(problem, operator=op)
    if operator is None:
        rule = config.truncation or default_truncation(problem)
        if config.truncation is None:
            config = dataclasses.replace(config, truncation=rule)
        operator = truncate(op, rule, problem.delta, allow_large_delta=True)
    elif operator.row_block_norms is None:
        operator = compute_norms(operator)
    if operator.op_norm == 0:
        raise EmptyOperatorError("truncation removed every singular value")
    _check_step(operator, config.c0, "rsvrg")
    return _svrg_loop(problem, operator, config)


def solve(problem: InverseProblem, config: SolverConfig) -> RunRecord:
    if config.stopping.needs_solution and problem.x_exact is None:
        raise ValueError("oracle stopping rules need the exact solution")
    return {"landweber": landweber_run, "svrg": svrg_run, "rsvrg": rsvrg_run}[config.method](problem, config)
