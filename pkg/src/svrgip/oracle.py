"""Exact reference computations for SVRG on tiny instances.

Everything here trades speed for exactness: expectations over the random
block indices are computed by enumerating every index sequence, and norms of
operators that are polynomials in ``B = A^T A / n`` are evaluated one
eigenvalue at a time.  The enumeration recursion is written independently of
the solver kernel so that the two can be checked against each other.

Notation: ``e_k = x_k - x_dag``, ``Delta_k = x_k - anchor``, ``P = I - c0 B``,
``zeta = A^T xi / n`` and ``N_i = B - A_i^T A_i``.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .linop import BlockOperator, compute_norms, truncate
from .problems import InverseProblem, make_diagonal_problem, rng_stream
from .solvers import SolverConfig, default_truncation

__all__ = [
    "ENUMERATION_LIMIT",
    "FUNCTIONALS",
    "EnumerationTooLarge",
    "OracleState",
    "Enumeration",
    "BoundReport",
    "exact_mean_error",
    "exact_mean_adelta",
    "enumerate_paths",
    "enumerate_expectation",
    "lambda_grid",
    "verify_kernel_bounds",
    "verify_variance_operator_bound",
    "random_variance_triples",
    "identity_suite",
    "kernel_suite",
    "variance_suite",
    "run_suite",
]

ENUMERATION_LIMIT = 10 ** 7
FUNCTIONALS = ("mean_iterate", "mean_sq_error", "mean_ADelta_sq")
SLACK = 1e-12
_MAX_LISTED = 50


class EnumerationTooLarge(ValueError):
    """``n**k`` index sequences exceed the enumeration limit."""


@dataclass(frozen=True, eq=False)
class OracleState:
    """Dense matrices describing the SVRG recursion on one instance.

    ``A`` is the operator the iteration uses (possibly truncated) and
    ``A_dag`` the exact one; ``B_delta = B_dag - B``.
    """

    A: np.ndarray
    A_dag: np.ndarray
    offsets: np.ndarray
    B: np.ndarray
    B_dag: np.ndarray
    B_delta: np.ndarray
    P: np.ndarray
    zeta: np.ndarray
    e0: np.ndarray
    x0: np.ndarray
    x_dag: np.ndarray
    y: np.ndarray
    c0: float
    M: int
    n: int

    @classmethod
    def from_problem(cls, problem: InverseProblem, config: SolverConfig,
                     operator: Optional[BlockOperator] = None) -> "OracleState":
        op_dag = problem.operator
        if op_dag.svd is None:
            op_dag = compute_norms(op_dag)
        if operator is None:
            if config.method == "rsvrg":
                rule = config.truncation or default_truncation(
                    dataclasses.replace(problem, operator=op_dag))
                operator = truncate(op_dag, rule, problem.delta, allow_large_delta=True)
            else:
                operator = op_dag
        n = operator.n
        a = np.array(operator.entries, dtype=np.float64)
        a_dag = np.array(op_dag.entries, dtype=np.float64)
        b = _sym(a.T @ a / n)
        b_dag = _sym(a_dag.T @ a_dag / n)
        c0 = float(config.c0)
        x_dag = np.asarray(problem.x_exact, dtype=np.float64)
        y = np.asarray(problem.y_noisy, dtype=np.float64)
        xi = y - a_dag @ x_dag
        x0 = np.asarray(problem.x0, dtype=np.float64)
        state = cls(A=a, A_dag=a_dag, offsets=operator.offsets, B=b, B_dag=b_dag,
                    B_delta=b_dag - b, P=np.eye(a.shape[1]) - c0 * b, zeta=a.T @ xi / n,
                    e0=x0 - x_dag, x0=x0, x_dag=x_dag, y=y, c0=c0,
                    M=config.inner_length(n), n=n)
        state.check()
        return state

    @property
    def m(self) -> int:
        return self.A.shape[1]

    def block_grams(self) -> np.ndarray:
        """``A_i^T A_i`` for every block, shape ``(n, m, m)``."""
        off = self.offsets
        return np.stack([self.A[off[i]:off[i + 1]].T @ self.A[off[i]:off[i + 1]] for i in range(self.n)])

    def check(self) -> None:
        scale = max(np.max(np.abs(self.B_dag)), 1.0) if self.B_dag.size else 1.0
        cross = np.max(np.abs(self.B @ self.B_delta)) if self.B.size else 0.0
        if cross > 1e-10 * scale ** 2:
            raise AssertionError(f"B and B_delta are not orthogonal (max entry {cross:.3e})")
        ev = np.linalg.eigvalsh(self.P)
        lo = 1 - self.c0 * np.max(np.linalg.eigvalsh(self.B))
        tol = 1e-12 * max(1.0, self.c0 * np.max(np.abs(self.B)))
        if ev.min() < lo - tol or ev.max() > 1 + tol:
            raise AssertionError("spectrum of P outside [1 - c0 ||B||, 1]")


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def exact_mean_error(state: OracleState, k: int) -> np.ndarray:
    """``E[e_k] = P^k e0 + c0 (sum_{j<k} P^j) zeta``.

    The index noise has conditional mean zero, so the formula holds across
    anchor refreshes as well.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    acc = np.zeros_like(state.P)
    for j in range(k):
        acc += np.linalg.matrix_power(state.P, j)
    return np.linalg.matrix_power(state.P, k) @ state.e0 + state.c0 * acc @ state.zeta


def exact_mean_adelta(state: OracleState, k: int) -> np.ndarray:
    """``E[A Delta_k]`` for ``k = K M + t``.

    Equals ``A (P^t - I) P^(KM) e0 + c0 A P^(KM) sum_{j<t} P^j zeta``.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    K, t = divmod(k, state.M)
    pk = np.linalg.matrix_power(state.P, K * state.M)
    pt = np.linalg.matrix_power(state.P, t)
    acc = np.zeros_like(state.P)
    for j in range(t):
        acc += np.linalg.matrix_power(state.P, j)
    eye = np.eye(state.m)
    return state.A @ ((pt - eye) @ pk @ state.e0 + state.c0 * pk @ acc @ state.zeta)


@dataclass
class Enumeration:
    """Exact expectations at step ``k`` from a full enumeration."""

    k: int
    sequences: int
    mean_iterate: np.ndarray
    mean_sq_error: float
    mean_adelta: np.ndarray
    mean_ADelta_sq: float
    variance: float
    variance_terms: float
    term_sq: np.ndarray = field(repr=False)


def _sequences(n: int, k: int, start: int, stop: int) -> np.ndarray:
    """Index sequences ``start..stop-1`` in lexicographic order, shape ``(S, k)``."""
    code = np.arange(start, stop, dtype=np.int64)
    out = np.empty((code.size, k), dtype=np.int64)
    for j in range(k):
        out[:, j] = (code // n ** (k - 1 - j)) % n
    return out


def _run_chunk(state: OracleState, grams: np.ndarray, ppow: list, k: int, seqs: np.ndarray):
    """Deterministic recursion for a batch of index sequences.

    Returns per-batch sums of ``x_k``, ``||e_k||^2``, ``A Delta_k``,
    ``||A Delta_k||^2`` and each ``||P^(k-1-j) N_j Delta_j||^2``, plus the
    raw ``e_k`` rows for the variance.
    """
    s = seqs.shape[0]
    a, y, n, c0, M = state.A, state.y, state.n, state.c0, state.M
    x = np.tile(state.x0, (s, 1))
    anchor = x.copy()
    grad = np.zeros_like(x)
    term_sq = np.zeros((s, k))
    for t in range(k):
        if t % M == 0:
            anchor = x.copy()
            grad = (anchor @ a.T - y) @ a / n
        d = x - anchor
        step = grad.copy()
        for i in range(n):
            rows = seqs[:, t] == i
            if not rows.any():
                continue
            step[rows] += d[rows] @ grams[i]
            # N_i Delta = B Delta - A_i^T A_i Delta, propagated to step k
            nd = d[rows] @ state.B - d[rows] @ grams[i]
            prop = nd @ ppow[k - 1 - t].T
            term_sq[rows, t] = np.einsum("ij,ij->i", prop, prop)
        x = x - c0 * step
    if k % M == 0:
        anchor = x
    e = x - state.x_dag
    ad = (x - anchor) @ a.T
    return (x.sum(axis=0), np.einsum("ij,ij->i", e, e).sum(), ad.sum(axis=0),
            np.einsum("ij,ij->i", ad, ad).sum(), term_sq.sum(axis=0), e)


def enumerate_paths(state: OracleState, k: int, workers: int = 1, chunk: int = 4096) -> Enumeration:
    """Exact expectations over all ``n**k`` equally likely index sequences.

    Sequences are processed in fixed chunks whose partial sums are added in
    chunk order, so the result does not depend on ``workers``.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    total = state.n ** k
    if total > ENUMERATION_LIMIT:
        raise EnumerationTooLarge(f"n**k = {total} exceeds {ENUMERATION_LIMIT}")
    grams = state.block_grams()
    ppow = [np.linalg.matrix_power(state.P, j) for j in range(max(k, 1))]
    bounds = [(lo, min(lo + chunk, total)) for lo in range(0, total, chunk)]

    def job(b):
        return _run_chunk(state, grams, ppow, k, _sequences(state.n, k, *b))

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, bounds))
    else:
        parts = [job(b) for b in bounds]

    mean_x = np.sum([p[0] for p in parts], axis=0) / total
    mean_sq = float(np.sum([p[1] for p in parts])) / total
    mean_ad = np.sum([p[2] for p in parts], axis=0) / total
    mean_adsq = float(np.sum([p[3] for p in parts])) / total
    term_sq = np.sum([p[4] for p in parts], axis=0) / total
    mean_e = mean_x - state.x_dag
    var = float(np.sum([np.einsum("ij,ij->i", p[5] - mean_e, p[5] - mean_e).sum() for p in parts])) / total
    return Enumeration(k=k, sequences=total, mean_iterate=mean_x, mean_sq_error=mean_sq,
                       mean_adelta=mean_ad, mean_ADelta_sq=mean_adsq, variance=var,
                       variance_terms=float(state.c0 ** 2 * np.sum(term_sq)), term_sq=term_sq)


def enumerate_expectation(problem: InverseProblem, config: SolverConfig, k: int, functional: str,
                          operator: Optional[BlockOperator] = None, workers: int = 1):
    """Exact expectation of ``functional`` after ``k`` inner steps.

    ``functional`` is one of ``mean_iterate`` (vector), ``mean_sq_error`` or
    ``mean_ADelta_sq``.
    """
    if functional not in FUNCTIONALS:
        raise ValueError(f"unknown functional {functional!r}; choose from {FUNCTIONALS}")
    n = problem.operator.n
    if n ** k > ENUMERATION_LIMIT:
        raise EnumerationTooLarge(f"n**k = {n ** k} exceeds {ENUMERATION_LIMIT}")
    res = enumerate_paths(OracleState.from_problem(problem, config, operator), k, workers=workers)
    return getattr(res, functional)


@dataclass
class BoundReport:
    """Outcome of checking an inequality family on a grid."""

    name: str
    checked: int = 0
    violation_count: int = 0
    worst_ratio: float = 0.0
    worst_point: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.violation_count == 0

    def absorb(self, lhs: np.ndarray, rhs: np.ndarray, coords: dict) -> None:
        """Fold an array of ``lhs <= rhs`` checks into the report.

        ``coords`` maps a coordinate name to an array broadcastable to ``lhs``.
        """
        lhs, rhs = np.broadcast_arrays(lhs, rhs)
        grid = {name: np.broadcast_to(v, lhs.shape) for name, v in coords.items()}
        self.checked += lhs.size
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(rhs > 0, lhs / rhs, np.where(lhs > 0, np.inf, 0.0))
        bad = lhs > rhs * (1 + SLACK) + SLACK * 1e-3
        if lhs.size:
            w = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
            if ratio[w] > self.worst_ratio or not self.worst_point:
                self.worst_ratio = float(ratio[w])
                self.worst_point = {**{n_: _num(g[w]) for n_, g in grid.items()},
                                    "lhs": float(lhs[w]), "rhs": float(rhs[w])}
        idx = np.argwhere(bad)
        self.violation_count += len(idx)
        for w in map(tuple, idx[:max(0, _MAX_LISTED - len(self.violations))]):
            self.violations.append({**{n_: _num(g[w]) for n_, g in grid.items()},
                                    "lhs": float(lhs[w]), "rhs": float(rhs[w])})

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "checked": self.checked,
                "violations": self.violation_count, "worst_ratio": self.worst_ratio,
                "worst_point": self.worst_point, "listed_violations": self.violations}


def _num(v):
    v = v.item() if hasattr(v, "item") else v
    return int(v) if isinstance(v, (int, np.integer)) else float(v)


def lambda_grid(c0: float, points: int = 50) -> np.ndarray:
    """Uniform grid of ``points`` eigenvalues covering ``[0, 1/c0]``."""
    return np.linspace(0.0, 1.0 / c0, points)


def verify_kernel_bounds(B, c0: float, s_grid: Sequence[float], k_grid: Sequence[int],
                         t_grid: Sequence[int], eps_grid: Sequence[float], *,
                         require_k_ge_t: bool = False) -> dict:
    """Check the three spectral kernel bounds for ``P = I - c0 B``.

    ``B`` is a symmetric matrix or directly a 1-D array of its eigenvalues.
    With ``require_k_ge_t`` the third bound is only checked where ``k >= t``.
    Returns one :class:`BoundReport` per bound.
    """
    lam = np.asarray(B, dtype=np.float64)
    if lam.ndim == 2:
        lam = np.linalg.eigvalsh(_sym(lam))
    lam = np.clip(lam, 0.0, None)
    norm_b = float(lam.max()) if lam.size else 0.0
    if c0 * norm_b > 1 + 1e-12:
        raise ValueError("kernel bounds need c0 ||B|| <= 1")
    p = np.clip(1 - c0 * lam, 0.0, 1.0)
    s = np.asarray(s_grid, dtype=np.float64)
    k = np.asarray(k_grid, dtype=np.float64)
    t = np.asarray(t_grid, dtype=np.float64)
    eps = np.asarray(eps_grid, dtype=np.float64)
    ki, ti = np.asarray(k_grid, dtype=np.int64), np.asarray(t_grid, dtype=np.int64)

    # bound 1: ||B^s P^k|| <= s^s c0^-s k^-s, axes (s, k, lambda)
    lhs1 = np.power(lam[None, None, :], s[:, None, None]) * np.power(p[None, None, :], k[None, :, None])
    arg1 = np.argmax(lhs1, axis=2)
    rhs1 = np.power(s, s)[:, None] * c0 ** -s[:, None] * np.power(k[None, :], -s[:, None])
    r1 = BoundReport("B^s P^k")
    r1.absorb(lhs1.max(axis=2), rhs1, {"s": s[:, None], "k": ki[None, :], "lambda": lam[arg1]})

    # bound 2: ||(I - P^t) P^k|| <= t / (k + t), axes (k, t, lambda)
    kt = (1 - np.power(p[None, None, :], t[None, :, None])) * np.power(p[None, None, :], k[:, None, None])
    arg2 = np.argmax(kt, axis=2)
    r2 = BoundReport("(I-P^t) P^k")
    r2.absorb(kt.max(axis=2), t[None, :] / (k[:, None] + t[None, :]),
              {"k": ki[:, None], "t": ti[None, :], "lambda": lam[arg2]})

    # bound 3: ||B^1/2 (I - P^t) P^k||, axes (eps, k, t)
    half = np.sqrt(lam)[None, None, :] * kt
    arg3 = np.argmax(half, axis=2)
    lhs3 = half.max(axis=2)
    e3 = eps[:, None, None]
    rhs3 = (2 ** (1 + e3) * e3 ** e3 * c0 ** -e3 * norm_b ** (0.5 - e3)
            * t[None, None, :] * (k[None, :, None] + t[None, None, :]) ** -(1 + e3))
    lhs3 = np.broadcast_to(lhs3, rhs3.shape)
    lam3 = np.broadcast_to(lam[arg3], rhs3.shape)
    kk = np.broadcast_to(ki[None, :, None], rhs3.shape)
    tt = np.broadcast_to(ti[None, None, :], rhs3.shape)
    r3 = BoundReport("B^1/2 (I-P^t) P^k" + (" [k>=t]" if require_k_ge_t else ""))
    mask = kk >= tt if require_k_ge_t else np.ones(rhs3.shape, dtype=bool)
    r3.absorb(lhs3[mask], rhs3[mask], {"eps": np.broadcast_to(e3, rhs3.shape)[mask], "k": kk[mask],
                                       "t": tt[mask], "lambda": lam3[mask]})
    return {"bound1": r1, "bound2": r2, "bound3": r3}


def _psd_sqrt(b: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(_sym(b))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def verify_variance_operator_bound(op: BlockOperator, R: np.ndarray, delta: np.ndarray) -> dict:
    """Exact check of the conditional variance bounds for ``R N_i Delta``.

    The mean over ``i`` is a plain ``1/n`` weighted sum over the blocks.
    """
    if op.row_block_norms is None:
        op = compute_norms(op)
    a, n, L = op.entries, op.n, op.L
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    delta = np.asarray(delta, dtype=np.float64)
    b = _sym(a.T @ a / n)
    ad2 = float(np.dot(a @ delta, a @ delta))
    r_norm = np.linalg.norm(R, 2)
    rb_norm = np.linalg.norm(R @ _psd_sqrt(b), 2)
    vals = []
    for i in range(n):
        blk = op.block(i)
        v = R @ (b @ delta - blk.T @ (blk @ delta))
        vals.append(float(np.dot(v, v)))
    vals = np.array(vals)
    mean_rep = BoundReport("E||R N Delta||^2")
    mean_rep.absorb(np.array(np.mean(vals)), np.array(min(L * r_norm ** 2 / n, rb_norm ** 2) * ad2), {})
    unif = BoundReport("||R N_i Delta||")
    unif.absorb(np.sqrt(vals), np.full(n, min(math.sqrt(L) * r_norm, math.sqrt(n) * rb_norm) * math.sqrt(ad2)),
                {"i": np.arange(n)})
    return {"mean": mean_rep, "uniform": unif}


def random_variance_triples(count: int, seed: int = 0):
    """Random tiny ``(operator, R, Delta)`` triples with mixed block sizes."""
    rng = rng_stream(seed, 1)
    out = []
    for _ in range(count):
        m = int(rng.integers(1, 5))
        n = int(rng.integers(1, 5))
        part = tuple(int(v) for v in rng.integers(1, 3, size=n))
        a = rng.standard_normal((sum(part), m))
        R = rng.standard_normal((int(rng.integers(1, 5)), m))
        out.append((BlockOperator.from_matrix(a, part), R, rng.standard_normal(m)))
    return out


def _tiny_diagonal(seed: int) -> InverseProblem:
    rng = rng_stream(seed, 2)
    w = rng.uniform(0.5, 2.0, size=2)
    base = make_diagonal_problem(2, 1.0, 0.5, 0.1, seed=seed, w=w)
    d = rng.uniform(0.3, 1.5, size=2)
    op = compute_norms(BlockOperator.from_matrix(np.diag(d)))
    y = op.matvec(base.x_exact)
    xi = rng.standard_normal(2) * 0.05
    return dataclasses.replace(base, operator=op, y_exact=y, y_noisy=y + xi,
                               delta=float(np.linalg.norm(xi)), x0=rng.standard_normal(2))


def identity_suite(max_k: int = 4, Ms: Sequence[int] = (2, 4), seeds: Sequence[int] = (0, 1, 2),
                   workers: int = 1) -> dict:
    """Enumeration against the bias formulas and the variance assembly.

    Runs on ``2 x 2`` diagonal problems with noisy data and a nonzero start.
    All deviations are absolute and should sit at rounding level.
    """
    worst = {"bias": 0.0, "adelta_mean": 0.0, "variance": 0.0, "anchor_adelta": 0.0}
    cases = 0
    for seed in seeds:
        prob = _tiny_diagonal(seed)
        c0 = 0.9 / prob.operator.L
        for M in Ms:
            state = OracleState.from_problem(prob, SolverConfig("svrg", c0=c0, M=M))
            for k in range(max_k + 1):
                res = enumerate_paths(state, k, workers=workers)
                worst["bias"] = max(worst["bias"], float(np.max(np.abs(
                    res.mean_iterate - state.x_dag - exact_mean_error(state, k)))))
                worst["adelta_mean"] = max(worst["adelta_mean"], float(np.max(np.abs(
                    res.mean_adelta - exact_mean_adelta(state, k)))))
                worst["variance"] = max(worst["variance"], abs(res.variance - res.variance_terms))
                if k % M == 0:
                    worst["anchor_adelta"] = max(worst["anchor_adelta"], res.mean_ADelta_sq)
                cases += 1
    tol = 1e-12
    return {"name": "identities", "passed": all(v <= tol for v in worst.values()), "cases": cases,
            "tolerance": tol, "max_abs_deviation": worst}


def kernel_suite(points: int = 50, c0: float = 1.0, max_kt: int = 64,
                 s_grid: Sequence[float] = (0, 0.25, 0.5, 1, 2),
                 eps_grid: Sequence[float] = (0.1, 0.25, 0.5), full_grid: bool = False) -> dict:
    """Kernel bounds on a uniform eigenvalue grid.

    By default the third bound is restricted to ``k >= t``, the range on
    which its proof is valid; ``full_grid=True`` checks every ``(k, t)``.
    """
    ks = np.arange(1, max_kt + 1)
    reps = verify_kernel_bounds(lambda_grid(c0, points), c0, s_grid, ks, ks, eps_grid,
                                require_k_ge_t=not full_grid)
    return {"name": "kernel", "passed": all(r.passed for r in reps.values()),
            "full_grid": bool(full_grid), "bounds": {k: r.to_dict() for k, r in reps.items()}}


def variance_suite(count: int = 100, seed: int = 0) -> dict:
    """Variance operator bounds on random tiny triples."""
    mean_rep = BoundReport("E||R N Delta||^2")
    unif_rep = BoundReport("||R N_i Delta||")
    for op, R, d in random_variance_triples(count, seed):
        r = verify_variance_operator_bound(op, R, d)
        for dst, src in ((mean_rep, r["mean"]), (unif_rep, r["uniform"])):
            dst.checked += src.checked
            dst.violation_count += src.violation_count
            dst.violations.extend(src.violations[:max(0, _MAX_LISTED - len(dst.violations))])
            if src.worst_ratio >= dst.worst_ratio:
                dst.worst_ratio, dst.worst_point = src.worst_ratio, src.worst_point
    return {"name": "variance", "passed": mean_rep.passed and unif_rep.passed, "triples": count,
            "bounds": {"mean": mean_rep.to_dict(), "uniform": unif_rep.to_dict()}}


SUITES = ("identities", "kernel", "variance")


def run_suite(suite: str = "all", *, kernel_full_grid: bool = False, workers: int = 1,
              seed: int = 0) -> dict:
    """Run one or all oracle suites and return a JSON-ready report."""
    names = SUITES if suite == "all" else (suite,)
    unknown = [s for s in names if s not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite {unknown[0]!r}; choose from {SUITES + ('all',)}")
    out = {}
    for name in names:
        if name == "identities":
            out[name] = identity_suite(workers=workers)
        elif name == "kernel":
            out[name] = kernel_suite(full_grid=kernel_full_grid)
        else:
            out[name] = variance_suite(seed=seed)
    return {"passed": all(r["passed"] for r in out.values()), "suites": out}
