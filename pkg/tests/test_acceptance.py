"""Acceptance criteria for the package.

Each test records one line through the ``acceptance`` fixture; the summary is
printed at the end of the pytest run.  Criteria that the implementation does
not meet are marked ``xfail(strict=True)`` so that a silent fix is noticed.
"""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from svrgip.cli import run_cli
from svrgip.oracle import identity_suite, kernel_suite, variance_suite
from svrgip.problems import make_problem
from svrgip.study import fit_rate, rate_study, semiconvergence_check, trajectory_bound_study

STUDIES = Path(__file__).resolve().parents[1] / "studies"

C_IDENT = "Oracle identity suite: enumeration vs closed forms to 1e-12, < 5 s"
C_KERNEL = "Kernel bound grid: zero violations on the full (k, t) grid, < 1 s"
C_VAR = "Variance operator bound: zero violations over 100 random triples, < 5 s"
C_TRAJ = "Trajectory bound: fitted exponent of E||A Delta_k||^2 vs (k+M) <= -1.7, < 2 min"
C_RATE = "Rate slopes: SVRG and rSVRG within 0.15 of 2nu/(1+2nu), nu in {0.25, 0.5}, < 10 min"
C_TABLE = "Table reproduction at n = 1000 (phillips LM/rSVRG, gravity SVRG), < 30 min"
C_SEMI = "Semi-convergence: SVRG rises after argmin, rSVRG non-increasing after plateau (shaw, eps 5e-2)"
C_DET = "Determinism: byte-identical solve/study outputs, 1 vs 8 threads and on rerun"


def test_identity_suite(acceptance):
    t0 = time.perf_counter()
    rep = identity_suite()
    dt = time.perf_counter() - t0
    worst = max(rep["max_abs_deviation"].values())
    ok = acceptance(C_IDENT, rep["passed"] and worst <= 1e-12 and dt < 5,
                    f"{rep['cases']} cases, max deviation {worst:.2e}, {dt:.2f} s")
    assert ok


def test_kernel_bounds_default_domain(acceptance):
    t0 = time.perf_counter()
    rep = kernel_suite()
    dt = time.perf_counter() - t0
    ok = acceptance(C_KERNEL, rep["passed"] and dt < 1,
                    f"bound 3 on k >= t: zero violations, {dt:.2f} s", part="k >= t")
    assert ok


@pytest.mark.xfail(strict=True, reason="the third kernel bound is false for k < t; see the decisions ledger")
def test_kernel_bounds_full_grid(acceptance):
    t0 = time.perf_counter()
    rep = kernel_suite(full_grid=True)
    dt = time.perf_counter() - t0
    b = rep["bounds"]
    counts = {k: v["violations"] for k, v in b.items()}
    detail = (f"violations {counts}, worst bound-3 ratio {b['bound3']['worst_ratio']:.3f}, "
              f"all at k < t, {dt:.2f} s")
    ok = acceptance(C_KERNEL, rep["passed"] and dt < 1, detail, part="full grid")
    assert ok


def test_variance_operator_bound(acceptance):
    t0 = time.perf_counter()
    rep = variance_suite(100)
    dt = time.perf_counter() - t0
    v = sum(b["violations"] for b in rep["bounds"].values())
    ok = acceptance(C_VAR, rep["passed"] and v == 0 and dt < 5,
                    f"{rep['triples']} triples, {v} violations, {dt:.2f} s")
    assert ok


def test_trajectory_bound(acceptance):
    t0 = time.perf_counter()
    fit, prob, cfg = trajectory_bound_study(size=50, power=1.0, c0_factor=0.5, outer=200, reps=100)
    dt = time.perf_counter() - t0
    ok = acceptance(C_TRAJ, (not fit.degenerate) and fit.exponent <= -1.7 and dt < 120,
                    f"exponent {fit.exponent:.3f} (M = {cfg.M}, {fit.k.size} points), {dt:.1f} s")
    assert ok


RATE_GRID = np.logspace(-1, -4, 7)


@pytest.fixture(scope="module")
def rate_clock():
    return {"total": 0.0}


@pytest.mark.parametrize("method,nu,reps", [("svrg", 0.25, 5), ("svrg", 0.5, 5),
                                            ("rsvrg", 0.25, 4), ("rsvrg", 0.5, 4)])
def test_rate_slopes(acceptance, rate_clock, method, nu, reps):
    t0 = time.perf_counter()
    kw = {"k_top": 20} if method == "svrg" else {}
    st = rate_study(method, nu, RATE_GRID, size=50, power=2.0, reps=reps, relative=True, **kw)
    slope = fit_rate(st)
    rate_clock["total"] += time.perf_counter() - t0
    ok = abs(slope - st.target) <= 0.15 and rate_clock["total"] < 600
    acceptance(C_RATE, ok, f"slope {slope:.3f} vs {st.target:.3f} "
                           f"(cumulative {rate_clock['total']:.0f} s)", part=f"{method} nu={nu}")
    assert ok


def _study(spec_name, out):
    t0 = time.perf_counter()
    rc = run_cli(["study", "--spec", str(STUDIES / spec_name), "--out", str(out), "--threads", "4"])
    dt = time.perf_counter() - t0
    assert rc == 0
    rep = json.loads((out / f"{Path(spec_name).stem}.json").read_text())
    return {(c["method"], c["eps"]): c for c in rep["cells"]}, dt


def within(value, target, rel):
    return abs(value - target) <= rel * target


def test_table_phillips(acceptance, tmp_path):
    cells, dt = _study("acceptance_phillips.yaml", tmp_path)
    ok = True
    for eps, e_ref, k_ref in ((1e-2, 3.81e-2, 68), (5e-2, 9.44e-2, 12)):
        lm = cells[("landweber", eps)]
        good = within(lm["e_star"], e_ref, 0.3) and within(lm["k_star"], k_ref, 0.5)
        ok &= acceptance(C_TABLE, good, f"e_* {lm['e_star']:.4g} (ref {e_ref}), k_* {lm['k_star']:.4g} "
                                         f"(ref {k_ref})", part=f"phillips LM eps={eps}")
    lm, rs = cells[("landweber", 1e-2)], cells[("rsvrg", 1e-2)]
    good = rs["plateau"] <= lm["e_star"]
    ok &= acceptance(C_TABLE, good, f"rSVRG plateau {rs['plateau']:.4g} <= LM e_* {lm['e_star']:.4g}",
                     part="phillips ordering eps=0.01")
    ok &= acceptance(C_TABLE, dt < 30 * 60, f"{dt:.1f} s", part="phillips runtime")
    assert ok


@pytest.mark.xfail(strict=True, reason="SVRG argmin on gravity falls below the reference band; see the ledger")
def test_table_gravity(acceptance, tmp_path):
    cells, dt = _study("acceptance_gravity.yaml", tmp_path)
    sv = cells[("svrg", 1e-2)]
    ok = acceptance(C_TABLE, within(sv["e_star"], 1.56e-1, 0.3) and dt < 30 * 60,
                    f"e_* {sv['e_star']:.4g} at epoch {sv['k_star']:.4g} (ref 0.156 +/- 30%), {dt:.1f} s",
                    part="gravity SVRG eps=0.01")
    assert ok


def test_semiconvergence(acceptance):
    prob = make_problem("shaw", 1000, eps=5e-2)
    rep = semiconvergence_check(prob, 1 / prob.operator.L, reps=3)
    s, r = rep["svrg"], rep["rsvrg"]
    detail = (f"SVRG argmin {s['argmin_error']:.4f} @ {s['argmin_epoch']:.1f} ep, "
              f"{s['end_error']:.4f} @ {s['end_epoch']:.1f} ep; rSVRG plateau {r['plateau_error']:.4f}, "
              f"max relative increase after plateau {r['max_relative_increase']:.1e} (tol {rep['rtol']})")
    ok = acceptance(C_SEMI, rep["passed"] and s["end_epoch"] >= 5 * s["argmin_epoch"], detail)
    assert ok


DET_SPEC = """
name: det
problems: [gravity, shaw]
size: 200
nu: [0, 0.5]
eps: [1.0e-2]
reps: 8
base_seed: 5
methods:
  - {method: landweber, c0: normA^-2, stopping: {kind: discrepancy, tau: 1.01}}
  - {method: rsvrg, c0: c/4, stopping: {kind: oracle_plateau}, max_epochs: 80}
  - {method: svrg, c0: c, stopping: {kind: oracle_argmin}, max_epochs: 80}
"""


def _digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_determinism(acceptance, tmp_path):
    spec = tmp_path / "det.yaml"
    spec.write_text(DET_SPEC)
    solve = ["solve", "--problem", "phillips", "--size", "200", "--method", "svrg", "--eps", "1e-2",
             "--epochs", "30", "--seed", "4", "--stop", "oracle_argmin"]
    digests = []
    for run, threads in enumerate(("1", "8", "8")):
        out = tmp_path / f"run{run}"
        assert run_cli(solve + ["--out", str(out), "--threads", threads]) == 0
        assert run_cli(["study", "--spec", str(spec), "--out", str(out), "--threads", threads]) == 0
        digests.append(_digest(out))
    same = digests[0] == digests[1] == digests[2]
    ok = acceptance(C_DET, same and len(digests[0]) > 10,
                    f"{len(digests[0])} files identical across threads 1/8/8")
    assert ok
