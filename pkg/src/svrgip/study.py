"""Monte-Carlo replication, table cells, rate fits and trajectory-bound fits.

Replications differ only in their index stream (``SolverConfig.replication``)
unless fresh noise is requested.  Results are collected in replication order
and reduced with fixed-order sums, so summaries do not depend on the number
of worker threads.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .linop import BlockOperator, TruncationRule, choose_truncation_level, compute_norms, truncate
from .problems import InverseProblem, add_noise, make_diagonal_problem, make_problem, noise_with_level, rng_stream
from .solvers import (
    DivergenceError,
    RunRecord,
    SolverConfig,
    StoppingRule,
    a_priori_epochs,
    compute_step_constants,
    default_truncation,
    rsvrg_run,
    select_index,
    solve,
)

__all__ = [
    "CALIBRATED_C1",
    "ReplicationSummary",
    "CellResult",
    "RateStudy",
    "BoundFit",
    "replicate",
    "limit_error",
    "table_cell",
    "fit_loglog",
    "fit_rate",
    "rate_study",
    "mean_adelta_sequence",
    "fit_trajectory_bound",
    "compare_shift",
    "trajectory_bound_study",
    "perturbation_level",
    "perturb_operator",
    "perturbation_check",
    "regularizing_check",
    "semiconvergence_check",
    "calibrate_c1",
]

# Truncation constants c1 per benchmark, fitted by ``calibrate_c1`` to the
# published limit errors of rSVRG at nu = 0 (noise levels 1e-3, 5e-3, 1e-2,
# 5e-2; five noise seeds).  Each is the geometric midpoint of the optimal
# interval on a 41-point log grid over [0.05, 20].
CALIBRATED_C1 = {"phillips": 0.8, "gravity": 0.5, "shaw": 1.7}


@dataclass(eq=False)
class ReplicationSummary:
    """Aggregate of ``reps`` runs of one configuration.

    ``e_star`` is the root-mean-square relative error at each run's ``k_*``;
    ``mean_trajectory`` is the root-mean-square relative error per snapshot
    over the common prefix of all runs.
    """

    reps: int
    e_star: float
    e_star_mean: float
    e_star_sd: float
    k_star_mean: float
    epochs: np.ndarray
    mean_trajectory: np.ndarray
    mean_residual: np.ndarray
    diverged: bool
    failures: list
    records: list = field(repr=False)
    scale: float = 1.0

    def to_dict(self) -> dict:
        return {
            "reps": self.reps,
            "e_star": _f(self.e_star),
            "e_star_mean": _f(self.e_star_mean),
            "e_star_sd": _f(self.e_star_sd),
            "k_star_mean": _f(self.k_star_mean),
            "diverged": self.diverged,
            "failures": self.failures,
        }


def _f(v: float):
    v = float(v)
    return v if math.isfinite(v) else None


def _renoise(problem: InverseProblem, seed: int) -> InverseProblem:
    if problem.rel_noise > 0:
        y, d = add_noise(problem.y_exact, problem.rel_noise, seed)
    else:
        y, d = noise_with_level(problem.y_exact, problem.delta, seed)
    return dataclasses.replace(problem, y_noisy=y, delta=d, seed=seed)


def _one(problem: InverseProblem, config: SolverConfig, r: int, base_seed: int, fresh_noise: bool,
         runner: Callable):
    cfg = dataclasses.replace(config, seed=base_seed, replication=r)
    prob = _renoise(problem, base_seed + r) if fresh_noise else problem
    try:
        return runner(prob, cfg)
    except DivergenceError as exc:
        return exc


def replicate(problem: InverseProblem, config: SolverConfig, reps: int, base_seed: int = 0, *,
              fresh_noise: bool = False, workers: int = 1,
              runner: Optional[Callable] = None) -> ReplicationSummary:
    """Run ``reps`` independent solves and aggregate them.

    Each replication ``r`` uses index stream ``(base_seed, r)``.  With
    ``fresh_noise`` it also redraws the data noise with seed ``base_seed + r``
    at the same relative level (or the same absolute level for problems built
    with an exact noise norm).  A diverged replication is reported, never
    dropped: the summary then carries ``nan`` errors.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    runner = runner or solve
    if workers > 1 and reps > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(lambda r: _one(problem, config, r, base_seed, fresh_noise, runner), range(reps)))
    else:
        out = [_one(problem, config, r, base_seed, fresh_noise, runner) for r in range(reps)]
    failures = [{"replication": r, "error": str(o)} for r, o in enumerate(out) if isinstance(o, Exception)]
    records = [o for o in out if not isinstance(o, Exception)]
    scale = float(np.linalg.norm(problem.x_exact)) or 1.0
    if failures:
        nan = float("nan")
        return ReplicationSummary(reps=reps, e_star=nan, e_star_mean=nan, e_star_sd=nan, k_star_mean=nan,
                                  epochs=np.empty(0), mean_trajectory=np.empty(0), mean_residual=np.empty(0),
                                  diverged=True, failures=failures, records=records, scale=scale)
    sq_star = np.array([rec.sq_errors[rec.k_star_index] for rec in records])
    e_each = np.array([rec.e_star for rec in records])
    length = min(rec.epochs.size for rec in records)
    sq = np.stack([rec.sq_errors[:length] for rec in records])
    res = np.stack([rec.residual_norm[:length] for rec in records])
    return ReplicationSummary(
        reps=reps,
        e_star=math.sqrt(np.sum(sq_star) / reps) / scale,
        e_star_mean=float(np.sum(e_each) / reps),
        e_star_sd=float(np.std(e_each, ddof=1)) if reps > 1 else 0.0,
        k_star_mean=float(np.sum([rec.k_star_epochs for rec in records]) / reps),
        epochs=records[0].epochs[:length].copy(),
        mean_trajectory=np.sqrt(np.sum(sq, axis=0) / reps) / scale,
        mean_residual=np.sum(res, axis=0) / reps,
        diverged=False, failures=[], records=records, scale=scale)


def limit_error(problem: InverseProblem, operator: Optional[BlockOperator] = None) -> float:
    """Relative error of the fixed point ``x0 + A^+ (y - A x0)`` of the iteration.

    Every method here converges to this point when run without stopping;
    for the truncated operator it is the plateau value.
    """
    op = operator or problem.operator
    if op.svd is None:
        op = compute_norms(op)
    s = op.svd.values
    keep = s > s[0] * 1e-14 if s.size and s[0] > 0 else np.zeros(s.shape, dtype=bool)
    u, v = op.svd.left[:, keep], op.svd.right[:, keep]
    r = problem.y_noisy - op.matvec(problem.x0)
    x = problem.x0 + v @ ((u.T @ r) / s[keep])
    return float(np.linalg.norm(x - problem.x_exact) / np.linalg.norm(problem.x_exact))


@dataclass(eq=False)
class CellResult:
    """One (problem, method, nu, eps) table entry."""

    problem: str
    method: str
    nu: float
    eps: float
    c0_label: str
    c0: float
    M: Optional[int]
    stopping: dict
    reps: int
    e_star: float
    k_star: float
    lim_e: Optional[float]
    plateau: Optional[float]
    e_star_sd: float
    diverged: bool
    epochs: np.ndarray = field(repr=False)
    trajectory: np.ndarray = field(repr=False)
    residual: np.ndarray = field(repr=False)

    def row(self) -> dict:
        return {"problem": self.problem, "method": self.method, "nu": self.nu, "eps": self.eps,
                "c0": self.c0_label, "M": self.M, "stopping": self.stopping["kind"],
                "reps": self.reps, "e_star": _f(self.e_star), "k_star": _f(self.k_star),
                "plateau": None if self.plateau is None else _f(self.plateau),
                "lim_e": None if self.lim_e is None else _f(self.lim_e),
                "e_star_sd": _f(self.e_star_sd)}


def table_cell(problem: InverseProblem, config: SolverConfig, reps: int, base_seed: int = 0, *,
               c0_label: str = "", workers: int = 1, fresh_noise: bool = False) -> CellResult:
    """Reproduce one table entry.

    Stochastic methods run every replication to ``config.max_epochs`` and
    pick ``k_*`` on the root-mean-square trajectory, so the reported ``e_*``
    is the root-mean-square error at a common index.  Landweber is
    deterministic and runs once with its online rule.  For rSVRG,
    ``plateau`` is the error at the end of the run and ``lim_e`` the exact
    error of the limit point.
    """
    rule = config.stopping
    if config.method == "landweber":
        summ = replicate(problem, config, 1, base_seed, workers=1)
        rec = summ.records[0] if summ.records else None
        e_star = summ.e_star
        k_star = float(rec.k_star_epochs) if rec else float("nan")
        lim = plateau = None
    else:
        free = dataclasses.replace(config, stopping=StoppingRule("max_epochs"))
        summ = replicate(problem, free, reps, base_seed, workers=workers, fresh_noise=fresh_noise)
        if summ.diverged:
            e_star = k_star = float("nan")
        else:
            k = select_index(rule, summ.mean_trajectory, summ.mean_residual, problem.delta, summ.epochs)
            if k is None:
                k = summ.mean_trajectory.size - 1
            e_star = float(summ.mean_trajectory[k])
            k_star = float(summ.epochs[k])
        lim = plateau = None
        if config.method == "rsvrg" and not summ.diverged:
            plateau = float(summ.mean_trajectory[-1])
            trunc = config.truncation or default_truncation(problem)
            lim = limit_error(problem, truncate(problem.operator, trunc, problem.delta, allow_large_delta=True))
    cfg = config.to_dict()
    return CellResult(problem=problem.name, method=config.method, nu=float(problem.nu),
                      eps=float(problem.rel_noise), c0_label=c0_label or repr(float(config.c0)),
                      c0=float(config.c0), M=config.inner_length(problem.n) if config.method != "landweber" else None,
                      stopping=cfg["stopping"], reps=reps if config.method != "landweber" else 1,
                      e_star=e_star, k_star=k_star, lim_e=lim, plateau=plateau, e_star_sd=summ.e_star_sd,
                      diverged=summ.diverged, epochs=summ.epochs, trajectory=summ.mean_trajectory,
                      residual=summ.mean_residual)


def fit_loglog(x, y):
    """Least-squares ``(slope, intercept)`` of ``log y`` against ``log x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ValueError("need at least two points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs positive data")
    lx, ly = np.log(x), np.log(y)
    if np.ptp(lx) == 0:
        raise ValueError("degenerate abscissa")
    slope, intercept = np.polyfit(lx, ly, 1)
    return float(slope), float(intercept)


@dataclass(eq=False)
class RateStudy:
    """Error at the stopping index over a decreasing grid of noise levels."""

    family: str
    nu: float
    method: str
    deltas: np.ndarray
    reps: int
    e_star_mean: np.ndarray
    e_star_sd: np.ndarray
    k_star: np.ndarray = field(default_factory=lambda: np.empty(0))
    slope: Optional[float] = None
    intercept: Optional[float] = None
    notes: dict = field(default_factory=dict)

    @property
    def target(self) -> float:
        return 2 * self.nu / (1 + 2 * self.nu)

    def to_dict(self) -> dict:
        return {"family": self.family, "nu": self.nu, "method": self.method,
                "deltas": self.deltas.tolist(), "reps": self.reps,
                "e_star_mean": self.e_star_mean.tolist(), "e_star_sd": self.e_star_sd.tolist(),
                "k_star": self.k_star.tolist(), "slope": self.slope, "intercept": self.intercept,
                "target": self.target, **self.notes}


def fit_rate(study: RateStudy) -> float:
    """Slope of ``log e_*`` against ``log delta``; also stored on ``study``."""
    d = np.asarray(study.deltas, dtype=np.float64)
    if d.size < 3:
        raise ValueError("rate fit needs at least three noise levels")
    if np.any(np.diff(d) >= 0):
        raise ValueError("noise grid must be strictly decreasing")
    study.slope, study.intercept = fit_loglog(d, study.e_star_mean)
    if not math.isfinite(study.slope):
        raise ValueError("rate fit is not finite")
    return study.slope


def rate_study(method: str, nu: float, deltas: Sequence[float], *, size: int = 50, power: float = 2.0,
               reps: int = 4, base_seed: int = 0, C: float = 1.0, k_top: Optional[float] = None,
               relative: bool = False, c0_factor: float = 1.0, max_epochs: float = 1e7,
               settle: float = 3.0, workers: int = 1) -> RateStudy:
    """Rate experiment on a diagonal problem with spectrum ``j**-power``.

    ``svrg`` stops a priori after ``ceil(C delta^(-2/(1+2nu)))`` epochs;
    ``k_top`` instead fixes ``C`` so that the largest noise level gets
    ``k_top`` epochs.  ``rsvrg`` truncates at ``a delta^(1/(1+2nu))`` with the
    bounded level choice for ``a`` and runs until its slowest kept mode has
    contracted by ``exp(-settle)``, i.e. past the plateau; the error at the
    end of the run is reported together with the exact limit error.  With ``relative`` the grid is scaled by
    ``||y||``.  Noise is redrawn for every replication.
    """
    deltas = np.asarray(sorted(deltas, reverse=True), dtype=np.float64)
    if relative:
        deltas = deltas * float(np.linalg.norm(make_diagonal_problem(size, power, nu, 0.0).y_exact))
    if k_top is not None:
        C = float(k_top) * deltas[0] ** (2.0 / (1 + 2 * nu))
    means, sds, ks, tail, limits = [], [], [], [], []
    notes = {"size": size, "power": power, "C": C, "c0_factor": c0_factor}
    for i, d in enumerate(deltas):
        prob = make_diagonal_problem(size, power, nu, float(d), seed=base_seed + 1000 * i)
        op = prob.operator
        c0 = c0_factor / op.L
        if method == "svrg":
            cfg = SolverConfig("svrg", c0=c0, max_epochs=max_epochs, stopping=StoppingRule.a_priori(C, nu))
            summ = replicate(prob, cfg, reps, base_seed + 1000 * i, fresh_noise=True, workers=workers)
            ks.append(a_priori_epochs(cfg.stopping, float(d)))
        elif method == "rsvrg":
            a = choose_truncation_level(op.n, nu, prob.w_norm)
            rule = TruncationRule(a=a, b=1.0 / (1 + 2 * nu))
            trunc = truncate(op, rule, float(d), allow_large_delta=True)
            # run until the slowest kept mode has decayed by exp(-settle)
            lam_min = trunc.svd.values[-1] ** 2 / op.n
            M = 2 * op.n
            horizon = min(max_epochs, math.ceil(settle / (c0 * lam_min) * (op.n + M) / (op.n * M)))
            cfg = SolverConfig("rsvrg", c0=c0, max_epochs=horizon, truncation=rule,
                               snapshot_every=max(1, int(horizon * op.n / (op.n + 2 * op.n) // 40)))
            summ = replicate(prob, cfg, reps, base_seed + 1000 * i, fresh_noise=True, workers=workers)
            ks.append(horizon)
            limits.append(limit_error(prob, trunc))
            tr = summ.mean_trajectory
            tail.append(float(abs(tr[-1] - tr[(3 * tr.size) // 4]) / tr[-1]) if tr.size > 1 else 0.0)
        else:
            raise ValueError("rate studies cover svrg and rsvrg")
        if summ.diverged:
            raise DivergenceError(f"rate study diverged at delta={d:g}: {summ.failures[0]['error']}")
        means.append(summ.e_star)
        sds.append(summ.e_star_sd)
    if tail:
        # relative change over the last quarter of each run
        notes["tail_change"] = tail
        notes["limit_error"] = limits
    study = RateStudy(family=f"diag-p{power:g}", nu=nu, method=method, deltas=deltas, reps=reps,
                      e_star_mean=np.array(means), e_star_sd=np.array(sds), k_star=np.array(ks, dtype=float),
                      notes=notes)
    fit_rate(study)
    return study


@dataclass(eq=False)
class BoundFit:
    """Power-law fit ``value ~ constant * (k + M)^exponent``."""

    k: np.ndarray
    values: np.ndarray
    M: int
    exponent: float
    constant: float
    target: float = -2.0
    envelope: float = float("nan")
    dominated: bool = False
    degenerate: bool = False
    residual: float = float("nan")

    def to_dict(self) -> dict:
        return {"M": self.M, "exponent": _f(self.exponent), "constant": _f(self.constant),
                "target": self.target, "envelope": _f(self.envelope), "dominated": self.dominated,
                "degenerate": self.degenerate, "residual": _f(self.residual), "points": int(self.k.size)}


def mean_adelta_sequence(records: Sequence[RunRecord]) -> np.ndarray:
    """Replication mean of ``||A Delta_k||^2`` per inner step."""
    seqs = [r.adelta_sq for r in records]
    if any(s is None for s in seqs):
        raise ValueError("runs were made without A Delta recording")
    length = min(s.size for s in seqs)
    return np.sum(np.stack([s[:length] for s in seqs]), axis=0) / len(seqs)


def fit_trajectory_bound(values, M: int) -> BoundFit:
    """Fit the exponent of a mean ``||A Delta_k||^2`` sequence against ``k + M``.

    Anchor steps (``k`` a multiple of ``M``) carry ``Delta = 0`` and are
    excluded.  ``envelope`` is the smallest constant ``c`` with
    ``value_k <= c (k+M)^-2`` over the whole sequence.  The sequence counts
    as dominated by one constant when the envelope of the first half already
    covers the second half, i.e. ``value_k (k+M)^2`` does not grow.
    """
    v = np.asarray(values, dtype=np.float64)
    k = np.arange(v.size)
    keep = (k % M != 0) & (v > 0)
    if not keep.any():
        return BoundFit(k=k[keep], values=v[keep], M=M, exponent=float("nan"), constant=float("nan"),
                        degenerate=True)
    kk, vv = k[keep], v[keep]
    if (kk.max() + M) < 10 * (kk.min() + M) and kk.max() < 10 * max(kk.min(), 1):
        raise ValueError("trajectory fit needs at least one decade of k")
    slope, icpt = fit_loglog(kk + M, vv)
    resid = float(np.sqrt(np.mean((np.log(vv) - (icpt + slope * np.log(kk + M))) ** 2)))
    scaled = vv * (kk + M) ** 2.0
    half = kk < (kk.min() + kk.max()) / 2
    early = float(scaled[half].max()) if half.any() else float(scaled.max())
    return BoundFit(k=kk, values=vv, M=M, exponent=slope, constant=float(np.exp(icpt)),
                    envelope=float(scaled.max()), dominated=bool(scaled.max() <= early), residual=resid)


def compare_shift(fit_a: BoundFit, fit_b: BoundFit) -> dict:
    """Pooled fits of two runs that differ only in ``M``.

    The shifted model regresses on ``log(k + M)`` with each run's own ``M``;
    the unshifted one uses the first run's ``M`` for both.  A smaller
    residual for the shifted model supports the ``(k + M)^-2`` form.
    """
    def pooled(ms):
        x = np.concatenate([np.log(f.k + m) for f, m in zip((fit_a, fit_b), ms)])
        y = np.log(np.concatenate([fit_a.values, fit_b.values]))
        coef = np.polyfit(x, y, 1)
        return float(np.sqrt(np.mean((y - np.polyval(coef, x)) ** 2))), float(coef[0])

    shifted, s_slope = pooled((fit_a.M, fit_b.M))
    plain, p_slope = pooled((fit_a.M, fit_a.M))
    return {"shifted_residual": shifted, "unshifted_residual": plain, "shifted_slope": s_slope,
            "unshifted_slope": p_slope, "shift_preferred": shifted < plain}


def trajectory_bound_study(size: int = 50, power: float = 1.0, *, c0_factor: float = 0.5, M: Optional[int] = None,
                           outer: int = 200, reps: int = 100, delta: float = 1e-2, nu: float = 0.0,
                           base_seed: int = 0, workers: int = 1):
    """Mean ``||A Delta_k||^2`` over ``outer`` outer loops on a diagonal problem.

    The step is ``c0_factor`` times the mean-square threshold.  Returns
    ``(BoundFit, problem, config)``.
    """
    prob = make_diagonal_problem(size, power, nu, delta, seed=base_seed)
    M = 2 * prob.n if M is None else int(M)
    consts = compute_step_constants(prob.operator, M)
    c0 = c0_factor * consts.C0_bar
    epochs = outer * (prob.n + M) / prob.n
    cfg = SolverConfig("svrg", c0=c0, M=M, max_epochs=epochs, record_adelta=True, snapshot_every=outer)
    summ = replicate(prob, cfg, reps, base_seed, workers=workers)
    if summ.diverged:
        raise DivergenceError(summ.failures[0]["error"])
    return fit_trajectory_bound(mean_adelta_sequence(summ.records), M), prob, cfg


def perturbation_level(delta: float, nu: float) -> float:
    """Operator perturbation size ``delta^(2nu / ((1+2nu) min(1, nu)))``."""
    if nu <= 0:
        raise ValueError("perturbation level needs nu > 0")
    return float(delta ** (2 * nu / ((1 + 2 * nu) * min(1.0, nu))))


def perturb_operator(op: BlockOperator, eps_a: float, seed: int = 0) -> BlockOperator:
    """``A + E`` with a Gaussian direction ``E`` scaled to spectral norm ``eps_a``."""
    if eps_a == 0:
        return compute_norms(BlockOperator.from_matrix(op.entries, op.partition))
    e = rng_stream(seed, 3).standard_normal(op.shape)
    e *= eps_a / np.linalg.norm(e, 2)
    return compute_norms(BlockOperator.from_matrix(op.entries + e, op.partition))


def perturbation_check(problem: InverseProblem, config: SolverConfig, eps_grid: Sequence[float], *,
                       reps: int = 1, base_seed: int = 0, factor: float = 2.0, seed: int = 0) -> dict:
    """rSVRG with a truncated perturbed surrogate against exact truncation.

    Every run shares the index streams of the reference run.  The step is
    lowered to ``1/L`` of the surrogate when a perturbation pushes ``L`` up.
    """
    rule = config.truncation or default_truncation(problem)
    cfg = dataclasses.replace(config, method="rsvrg", truncation=rule)
    ref = replicate(problem, cfg, reps, base_seed, runner=rsvrg_run)
    ref_err = float(ref.mean_trajectory[-1])
    rows = []
    for eps_a in eps_grid:
        sur = truncate(perturb_operator(problem.operator, float(eps_a), seed), rule, problem.delta,
                       allow_large_delta=True)
        c0 = min(cfg.c0, 1.0 / sur.L)
        run_cfg = dataclasses.replace(cfg, c0=c0)
        summ = replicate(problem, run_cfg, reps, base_seed,
                         runner=lambda p, c, s=sur: rsvrg_run(p, c, operator=s))
        err = float(summ.mean_trajectory[-1])
        rows.append({"eps_A": float(eps_a), "c0": c0, "final_error": err,
                     "difference": abs(err - ref_err), "ratio": err / ref_err,
                     "within_factor": err <= factor * ref_err,
                     "identical": bool(np.array_equal(summ.mean_trajectory, ref.mean_trajectory))})
    diffs = [r["difference"] for r in rows]
    order = np.argsort([-r["eps_A"] for r in rows])
    inversions = int(sum(diffs[order[i + 1]] > diffs[order[i]] for i in range(len(order) - 1)))
    return {"reference_error": ref_err, "factor": factor, "rows": rows, "inversions": inversions,
            "passed": all(r["within_factor"] for r in rows)}


def _plateau_from_summary(summ: ReplicationSummary, rule: StoppingRule) -> int:
    k = select_index(rule, summ.mean_trajectory, summ.mean_residual, 0.0, summ.epochs)
    return summ.mean_trajectory.size - 1 if k is None else k


def regularizing_check(family: str, eps_grid: Sequence[float], *, size: int = 1000, reps: int = 3,
                       base_seed: int = 0, rsvrg_epochs: float = 300, svrg_C: float = 1.0,
                       c0_scale: float = 1.0, c1: Optional[float] = None, workers: int = 1) -> dict:
    """Errors of rSVRG at its plateau and of a-priori SVRG along shrinking noise.

    The exact solution is the raw package solution.  The a-priori rule uses
    the ``nu = 0`` exponent.  ``c1`` defaults to the calibrated value.
    """
    c1 = CALIBRATED_C1.get(family, 1.0) if c1 is None else c1
    eps_grid = sorted(eps_grid, reverse=True)
    rows = []
    for eps in eps_grid:
        prob = make_problem(family, size, eps=eps, seed=base_seed, raw_solution=True)
        c0 = c0_scale / prob.operator.L
        plateau = StoppingRule("oracle_plateau")
        rcfg = SolverConfig("rsvrg", c0=c0, max_epochs=rsvrg_epochs, stopping=plateau,
                            truncation=default_truncation(prob, c1=c1))
        rcell = table_cell(prob, rcfg, reps, base_seed, workers=workers)
        scfg = SolverConfig("svrg", c0=c0, max_epochs=1e5, stopping=StoppingRule.a_priori(svrg_C, 0.0))
        ssum = replicate(prob, scfg, reps, base_seed, workers=workers)
        rows.append({"eps": eps, "delta": prob.delta, "rsvrg_plateau": rcell.e_star, "rsvrg_limit": rcell.lim_e,
                     "svrg_a_priori": ssum.e_star, "svrg_epochs": a_priori_epochs(scfg.stopping, prob.delta)})

    def decreasing(key):
        v = [r[key] for r in rows]
        return all(b < a for a, b in zip(v, v[1:]))

    return {"family": family, "rows": rows, "rsvrg_decreasing": decreasing("rsvrg_plateau"),
            "rsvrg_limit_decreasing": decreasing("rsvrg_limit"),
            "svrg_decreasing": decreasing("svrg_a_priori")}


def semiconvergence_check(problem: InverseProblem, c0: float, *, reps: int = 3, base_seed: int = 0,
                          horizon: float = 150, factor: float = 5.0, rsvrg_c0: Optional[float] = None,
                          rsvrg_epochs: Optional[float] = None, rtol: float = 1e-2, c1: Optional[float] = None,
                          workers: int = 1) -> dict:
    """SVRG semi-convergence against rSVRG stability on one noisy problem.

    SVRG is run to ``factor`` times its argmin epoch (the horizon grows until
    the argmin is resolved) and must end above its minimum.  rSVRG must not
    increase by more than ``rtol`` relative between snapshots after its
    plateau index.  ``c1`` defaults to the calibrated value for the problem.
    """
    c1 = CALIBRATED_C1.get(problem.name, 1.0) if c1 is None else c1
    scfg = SolverConfig("svrg", c0=c0, max_epochs=horizon)
    while True:
        s = replicate(problem, scfg, reps, base_seed, workers=workers)
        if s.diverged:
            raise DivergenceError(s.failures[0]["error"])
        k = int(np.argmin(s.mean_trajectory))
        arg_epoch = float(s.epochs[k])
        need = factor * max(arg_epoch, 1.0)
        if s.epochs[-1] >= need:
            break
        scfg = dataclasses.replace(scfg, max_epochs=math.ceil(need))
    end = int(np.searchsorted(s.epochs, need))
    end = min(end, s.epochs.size - 1)
    svrg = {"argmin_epoch": arg_epoch, "argmin_error": float(s.mean_trajectory[k]),
            "end_epoch": float(s.epochs[end]), "end_error": float(s.mean_trajectory[end])}
    svrg["semiconvergent"] = svrg["end_error"] > svrg["argmin_error"]

    rcfg = SolverConfig("rsvrg", c0=rsvrg_c0 or c0, max_epochs=rsvrg_epochs or svrg["end_epoch"],
                        truncation=default_truncation(problem, c1=c1))
    r = replicate(problem, rcfg, reps, base_seed, workers=workers)
    if r.diverged:
        raise DivergenceError(r.failures[0]["error"])
    p = _plateau_from_summary(r, StoppingRule("oracle_plateau"))
    tail = r.mean_trajectory[p:]
    worst = float(np.max(tail[1:] / tail[:-1] - 1)) if tail.size > 1 else 0.0
    rsvrg = {"plateau_epoch": float(r.epochs[p]), "plateau_error": float(r.mean_trajectory[p]),
             "end_error": float(r.mean_trajectory[-1]), "max_relative_increase": worst,
             "stable": worst <= rtol}
    return {"svrg": svrg, "rsvrg": rsvrg, "rtol": rtol, "passed": svrg["semiconvergent"] and rsvrg["stable"]}


def calibrate_c1(family: str, eps_list: Sequence[float], targets: Sequence[float], *, size: int = 1000,
                 seeds: Sequence[int] = range(5), grid: Optional[Sequence[float]] = None) -> dict:
    """Fit the truncation constant ``c1`` to reference limit errors.

    For each candidate the exact limit error of the truncated iteration is
    averaged (root mean square) over the noise seeds, and the mean squared
    log ratio to ``targets`` is minimized.  Returns the best value (the
    geometric midpoint of the optimal interval, since the loss is piecewise
    constant in ``c1``) and the loss per candidate.
    """
    grid = np.exp(np.linspace(np.log(0.05), np.log(20.0), 41)) if grid is None else np.asarray(grid, dtype=float)
    targets = np.asarray(targets, dtype=float)
    base = make_problem(family, size)
    probs = [[base.with_noise(eps, sd) for sd in seeds] for eps in eps_list]
    loss = []
    for c1 in grid:
        vals = []
        for row in probs:
            sq = [limit_error(pr, truncate(pr.operator, default_truncation(pr, c1=float(c1)), pr.delta,
                                           allow_large_delta=True)) ** 2 for pr in row]
            vals.append(math.sqrt(sum(sq) / len(sq)))
        loss.append(float(np.mean(np.log(np.array(vals) / targets) ** 2)))
    loss = np.array(loss)
    best = np.flatnonzero(loss <= loss.min() + 1e-12)
    # first contiguous run of optimal grid points
    run = best[:1 + int(np.argmax(np.diff(best) > 1)) if np.any(np.diff(best) > 1) else best.size]
    c1 = float(np.exp(0.5 * (np.log(grid[run[0]]) + np.log(grid[run[-1]]))))
    return {"family": family, "c1": c1, "loss": float(loss.min()), "grid": grid.tolist(), "losses": loss.tolist()}
