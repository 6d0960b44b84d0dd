import dataclasses
import math

import numpy as np
import pytest

from svrgip.linop import BlockOperator, TruncationRule, compute_norms
from svrgip.oracle import OracleState, enumerate_paths
from svrgip.problems import InverseProblem, make_diagonal_problem, make_problem, rng_stream
from svrgip.solvers import (
    DivergenceError,
    EmptyOperatorError,
    SolverConfig,
    StoppingRule,
    a_priori_epochs,
    compute_step_constants,
    default_truncation,
    epochs_of,
    iterations_for,
    landweber_run,
    rsvrg_run,
    select_index,
    solve,
    svrg_path,
    svrg_run,
)


def custom(a, y, x_true=None, partition=None, delta=0.0, x0=None):
    op = compute_norms(BlockOperator.from_matrix(a, partition))
    y = np.asarray(y, dtype=float)
    x_true = np.ones(op.m) if x_true is None else np.asarray(x_true, dtype=float)
    return InverseProblem(operator=op, x_exact=x_true, y_exact=op.matvec(x_true), y_noisy=y, delta=delta,
                          x0=None if x0 is None else np.asarray(x0, dtype=float))


# ---- step constants

def test_step_constants_identity():
    op = compute_norms(BlockOperator.from_matrix(np.eye(2)))
    k = compute_step_constants(op, 4)
    assert k.L == 1.0
    assert k.C0_bar == pytest.approx(max(10 ** -0.5, 1 / (10 + math.log(4))), rel=1e-14)
    assert k.C0_bar == pytest.approx(0.316227766, rel=1e-8)
    assert k.C0 == pytest.approx(1 / (400 * math.log(4 * math.e ** 2)), rel=1e-14)
    assert k.C0 == pytest.approx(7.383e-4, rel=1e-3)


def test_step_constants_scalar():
    op = compute_norms(BlockOperator.from_matrix([[1.0]]))
    assert compute_step_constants(op, 2).C0_bar == pytest.approx(0.316227766, rel=1e-8)
    with pytest.raises(ValueError):
        compute_step_constants(op, 0)


def test_step_constants_scaling():
    a = np.random.default_rng(0).standard_normal((6, 4))
    k1 = compute_step_constants(compute_norms(BlockOperator.from_matrix(a)), 12)
    k3 = compute_step_constants(compute_norms(BlockOperator.from_matrix(3 * a)), 12)
    assert k3.L == pytest.approx(9 * k1.L, rel=1e-12)
    assert k3.C0 == pytest.approx(k1.C0 / 9, rel=1e-12)
    assert k3.C0_bar == pytest.approx(k1.C0_bar / 9, rel=1e-12)


@pytest.mark.parametrize("name", ["phillips", "gravity", "shaw"])
def test_c0_below_c0bar(name):
    pr = make_problem(name, 100)
    k = compute_step_constants(pr.operator, 200)
    assert 0 < k.C0 < k.C0_bar


# ---- Landweber

def test_landweber_scalar():
    pr = custom([[2.0]], [1.0], x_true=[0.5])
    rec = landweber_run(pr, SolverConfig("landweber", c0=0.25, max_epochs=3, stopping=StoppingRule("max_epochs")))
    assert rec.epochs.tolist() == [0.0, 1.0, 2.0, 3.0]
    assert rec.residual_norm[1] == 0.0
    assert rec.x_last[0] == 0.5


def test_landweber_discrepancy_at_start():
    pr = custom([[2.0]], [1.0], delta=1.0)
    rec = landweber_run(pr, SolverConfig("landweber", c0=0.25, stopping=StoppingRule("discrepancy")))
    assert rec.k_star_index == 0 and rec.k_star_epochs == 0
    assert rec.x_final[0] == 0.0 and rec.iterations_total == 0


def test_landweber_zero_noise_runs_to_cap():
    pr = make_problem("phillips", 64)
    rec = landweber_run(pr, SolverConfig("landweber", c0=pr.operator.op_norm ** -2, max_epochs=50,
                                         stopping=StoppingRule("discrepancy")))
    assert rec.stopped_by == "max_epochs" and rec.k_star_epochs == 50


def test_landweber_divergence_guard():
    pr = custom(np.eye(3), np.ones(3))
    with pytest.warns(RuntimeWarning):
        with pytest.raises(DivergenceError):
            landweber_run(pr, SolverConfig("landweber", c0=5.0, max_epochs=100))


# ---- SVRG

def test_svrg_single_block_equals_landweber():
    # one block: the variance term vanishes and every step is a full gradient step
    a = np.random.default_rng(1).standard_normal((5, 3))
    y = np.random.default_rng(2).standard_normal(5)
    op = compute_norms(BlockOperator.from_matrix(a, [5]))
    c0 = 0.5 / op.L
    path = svrg_path(op, y, np.zeros(3), c0, 2, np.zeros(7, dtype=int))
    x = np.zeros(3)
    for k in range(1, 8):
        x = x - c0 * (a.T @ (a @ x - y))
        np.testing.assert_allclose(path[k], x, rtol=1e-13, atol=1e-15)


def test_svrg_single_block_scalar_bitwise():
    pr = custom([[2.0]], [1.0], x_true=[0.5])
    cfg = SolverConfig("svrg", c0=0.125, M=1, max_epochs=12, stopping=StoppingRule("max_epochs"))
    s = svrg_run(pr, cfg)
    lw = landweber_run(pr, SolverConfig("landweber", c0=0.125, max_epochs=6, stopping=StoppingRule("max_epochs")))
    # n = M = 1: one inner step is two epochs
    assert s.rel_error.tolist() == lw.rel_error.tolist()
    assert s.epochs.tolist() == [2 * e for e in lw.epochs.tolist()]


def test_svrg_fixed_point():
    pr = make_diagonal_problem(8, 1.0, 0.0, 0.0)
    pr = dataclasses.replace(pr, x0=pr.x_exact.copy(), y_noisy=pr.y_exact.copy())
    rec = svrg_run(pr, SolverConfig("svrg", c0=0.5 / pr.operator.L, max_epochs=30))
    assert np.all(rec.x_last == pr.x_exact)


def test_svrg_m_one_is_scaled_landweber():
    pr = make_problem("gravity", 20, eps=1e-2, seed=1)
    op = pr.operator
    c0 = 1.0 / op.L
    idx = rng_stream(3, 0).integers(0, op.n, size=15)
    path = svrg_path(op, pr.y_noisy, pr.x0, c0, 1, idx)
    x = pr.x0.copy()
    for k in range(1, 16):
        x = x - (c0 / op.n) * (op.entries.T @ (op.entries @ x - pr.y_noisy))
        np.testing.assert_allclose(path[k], x, rtol=1e-12, atol=1e-14)


def test_svrg_monte_carlo_matches_enumeration():
    pr = make_diagonal_problem(2, 1.0, 0.0, 0.1, seed=5)
    cfg = SolverConfig("svrg", c0=0.5 / pr.operator.L, M=2)
    state = OracleState.from_problem(pr, cfg)
    exact = enumerate_paths(state, 3)
    runs = 100_000
    rng = np.random.default_rng(12)
    idx = rng.integers(0, 2, size=(runs, 3))
    # tiny problem: evaluate each index pattern once and weight by its frequency
    codes = idx[:, 0] * 4 + idx[:, 1] * 2 + idx[:, 2]
    counts = np.bincount(codes, minlength=8)
    finals = np.array([svrg_path(pr.operator, pr.y_noisy, pr.x0, cfg.c0, 2, [c >> 2, (c >> 1) & 1, c & 1])[-1]
                       for c in range(8)])
    mean = counts @ finals / runs
    sd = np.sqrt(counts @ (finals - mean) ** 2 / runs)
    assert np.all(np.abs(mean - exact.mean_iterate) <= 3 * sd / np.sqrt(runs) + 1e-15)


def test_epoch_accounting():
    pr = make_problem("shaw", 40, eps=1e-2)
    for epochs in (1.0, 7.3, 20.0):
        rec = svrg_run(pr, SolverConfig("svrg", c0=1.0 / pr.operator.L, max_epochs=epochs))
        n, M = pr.n, 2 * pr.n
        assert abs(rec.iterations_total - round(epochs * n * M / (n + M))) <= 1
        assert np.all(np.diff(rec.epochs) > 0)
        assert rec.epochs[-1] <= epochs + 1e-12
    assert epochs_of(80, 40, 80) == 3
    assert iterations_for(3, 40, 80) == 80


def test_step_guard():
    pr = make_problem("shaw", 20)
    with pytest.raises(ValueError):
        svrg_run(pr, SolverConfig("svrg", c0=2.0 / pr.operator.L))


def test_seed_determinism():
    pr = make_problem("phillips", 40, eps=1e-2, seed=2)
    for method in ("landweber", "svrg", "rsvrg"):
        c0 = 1.0 / pr.operator.L if method != "landweber" else pr.operator.op_norm ** -2
        cfg = SolverConfig(method, c0=c0, max_epochs=30, seed=9, replication=2)
        r1, r2 = solve(pr, cfg), solve(pr, cfg)
        assert r1.rel_error.tobytes() == r2.rel_error.tobytes()
        assert r1.residual_norm.tobytes() == r2.residual_norm.tobytes()
        assert r1.x_final.tobytes() == r2.x_final.tobytes()
    other = solve(pr, dataclasses.replace(cfg, replication=3))
    assert other.rel_error.tobytes() != r1.rel_error.tobytes()


def test_zero_noise_mean_monotone():
    pr = make_diagonal_problem(10, 1.0, 0.0, 0.0)
    c0 = compute_step_constants(pr.operator, 20).C0_bar
    sq = np.mean([svrg_run(pr, SolverConfig("svrg", c0=c0, max_epochs=300, replication=r)).sq_errors
                  for r in range(50)], axis=0)
    increases = int(np.sum(np.diff(sq) > 0))
    assert increases <= max(1, sq.size // 100)


# ---- rSVRG

def test_rsvrg_a_zero_equals_svrg():
    pr = make_problem("gravity", 40, eps=1e-2)
    cfg = SolverConfig("svrg", c0=1.0 / pr.operator.L, max_epochs=20, seed=4)
    s = svrg_run(pr, cfg)
    r = rsvrg_run(pr, dataclasses.replace(cfg, method="rsvrg", truncation=TruncationRule(a=0.0)))
    assert s.rel_error.tobytes() == r.rel_error.tobytes()
    assert s.x_last.tobytes() == r.x_last.tobytes()


def test_rsvrg_rank_one_projection():
    sig = np.array([1.0, 0.3, 0.1])
    x_true = np.array([1.0, -2.0, 0.5])
    x0 = np.array([0.2, 0.4, -0.7])
    pr = custom(np.diag(sig), sig * x_true, x_true=x_true, x0=x0, delta=0.5)
    cfg = SolverConfig("rsvrg", c0=0.5, max_epochs=3000, truncation=TruncationRule(a=1.0, b=1.0))
    rec = rsvrg_run(pr, cfg)  # threshold 0.5 keeps the first direction only
    expected = np.array([x_true[0], x0[1], x0[2]])
    np.testing.assert_allclose(rec.x_last, expected, atol=1e-12)
    # residual is measured with the untruncated operator
    assert rec.residual_norm[-1] == pytest.approx(np.linalg.norm(sig * expected - pr.y_noisy), rel=1e-12)


def test_rsvrg_empty_operator():
    pr = custom(np.diag([1.0, 0.5]), [1.0, 0.5], delta=0.5)
    with pytest.raises(EmptyOperatorError):
        rsvrg_run(pr, SolverConfig("rsvrg", c0=0.5, truncation=TruncationRule(a=10.0)))


def test_default_truncation_formula():
    pr = make_problem("phillips", 40, nu=0.5, eps=1e-2)
    rule = default_truncation(pr, c1=2.0)
    assert rule.b == pytest.approx(0.5)
    expected = pr.operator.op_norm / np.linalg.norm(pr.y_exact) * (40 ** 0.5 / 2.0) ** 0.5
    assert rule.a == pytest.approx(expected, rel=1e-14)


# ---- stopping rules

def test_a_priori_epochs():
    rule = StoppingRule.a_priori(1.0, 0.5)
    assert a_priori_epochs(rule, 1e-4) == 10000
    assert a_priori_epochs(StoppingRule.a_priori(2.0, 0.0), 0.3) == math.ceil(2 / 0.09)
    with pytest.raises(ValueError):
        a_priori_epochs(rule, 0.0)


def test_select_index_rules():
    errs = np.array([1.0, 0.5, 0.4, 0.3, 0.2])
    res = np.array([5.0, 3.0, 2.0, 1.0, 0.5])
    assert select_index(StoppingRule("oracle_argmin"), errs, res, 0.1) == 4
    assert select_index(StoppingRule("discrepancy", tau=1.01), res, res, 1.0) == 3
    assert select_index(StoppingRule("max_epochs"), errs, res, 0.1) == 4
    ep = np.arange(5.0) * 3
    assert select_index(StoppingRule.a_priori(1.0, 0.0), errs, res, 1 / math.sqrt(7), ep) == 3


def test_plateau_rule():
    errs = np.concatenate([np.linspace(1.0, 0.3, 6), np.full(15, 0.25)])
    rule = StoppingRule("oracle_plateau", window=10, tol=1e-3)
    assert select_index(rule, errs, errs, 0.0) == 6
    # the Landweber reference is crossed earlier than the plateau starts
    ref = dataclasses.replace(rule, lm_reference=0.5)
    assert select_index(ref, errs, errs, 0.0) == 4
    assert select_index(rule, np.linspace(1, 0.1, 8), None, 0.0) is None


def test_rule_validation():
    with pytest.raises(ValueError):
        StoppingRule("discrepancy", tau=1.0)
    with pytest.raises(ValueError):
        StoppingRule("a_priori")
    with pytest.raises(ValueError):
        StoppingRule("nope")
    with pytest.raises(ValueError):
        SolverConfig("svrg", c0=0.0)
    with pytest.raises(ValueError):
        SolverConfig("svrg", c0=1.0, M=0)
    with pytest.raises(ValueError):
        SolverConfig("adam", c0=1.0)


def test_decreasing_argmin_is_final():
    pr = make_diagonal_problem(6, 1.0, 0.0, 0.0)
    rec = landweber_run(pr, SolverConfig("landweber", c0=pr.operator.op_norm ** -2, max_epochs=20,
                                         stopping=StoppingRule("oracle_argmin")))
    assert np.all(np.diff(rec.rel_error) < 0)
    assert rec.k_star_index == rec.epochs.size - 1


def test_run_record_dict():
    pr = make_problem("shaw", 20, eps=1e-2)
    rec = svrg_run(pr, SolverConfig("svrg", c0=1.0 / pr.operator.L, max_epochs=9))
    d = rec.to_dict()
    assert d["config"]["M"] == 40 and len(d["trajectory"]) == rec.epochs.size
    assert "wall_time" not in d and "wall_time" in rec.to_dict(include_timing=True)
