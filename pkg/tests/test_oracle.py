import dataclasses
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svrgip.linop import BlockOperator, TruncationRule, compute_norms
from svrgip.oracle import (
    EnumerationTooLarge,
    OracleState,
    enumerate_expectation,
    enumerate_paths,
    exact_mean_adelta,
    exact_mean_error,
    identity_suite,
    kernel_suite,
    lambda_grid,
    run_suite,
    variance_suite,
    verify_kernel_bounds,
    verify_variance_operator_bound,
)
from svrgip.problems import InverseProblem, make_diagonal_problem
from svrgip.solvers import SolverConfig, svrg_path


def identity_problem(e0=(1.0, 1.0), noise=(0.0, 0.0)):
    op = compute_norms(BlockOperator.from_matrix(np.eye(2)))
    x_true = np.zeros(2)
    y = np.asarray(noise, dtype=float)
    return InverseProblem(operator=op, x_exact=x_true, y_exact=np.zeros(2), y_noisy=y,
                          delta=float(np.linalg.norm(y)), x0=np.asarray(e0, dtype=float))


def test_mean_error_k0():
    pr = make_diagonal_problem(3, 1.0, 0.5, 0.1, seed=2)
    state = OracleState.from_problem(pr, SolverConfig("svrg", c0=0.5 / pr.operator.L))
    np.testing.assert_array_equal(exact_mean_error(state, 0), state.e0)


def test_mean_error_identity_example():
    state = OracleState.from_problem(identity_problem(), SolverConfig("svrg", c0=0.1, M=4))
    np.testing.assert_allclose(exact_mean_error(state, 2), [0.9025, 0.9025], atol=1e-15)


@pytest.mark.parametrize("seed", range(4))
def test_mean_error_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    op = compute_norms(BlockOperator.from_matrix(rng.standard_normal((2, 2))))
    x_true = rng.standard_normal(2)
    y = op.matvec(x_true) + 0.1 * rng.standard_normal(2)
    pr = InverseProblem(operator=op, x_exact=x_true, y_exact=op.matvec(x_true), y_noisy=y,
                        delta=float(np.linalg.norm(y - op.matvec(x_true))), x0=rng.standard_normal(2))
    cfg = SolverConfig("svrg", c0=0.8 / op.L, M=2)
    state = OracleState.from_problem(pr, cfg)
    for k in range(4):
        mean = enumerate_expectation(pr, cfg, k, "mean_iterate")
        assert np.max(np.abs(mean - x_true - exact_mean_error(state, k))) <= 1e-12


def test_enumeration_against_solver_kernel():
    # the oracle recursion is written independently of the solver kernel
    pr = make_diagonal_problem(3, 1.0, 0.0, 0.2, seed=1)
    cfg = SolverConfig("svrg", c0=0.7 / pr.operator.L, M=2)
    res = enumerate_paths(OracleState.from_problem(pr, cfg), 3)
    paths = [svrg_path(pr.operator, pr.y_noisy, pr.x0, cfg.c0, 2, [a, b, c])[-1]
             for a in range(3) for b in range(3) for c in range(3)]
    np.testing.assert_allclose(res.mean_iterate, np.mean(paths, axis=0), atol=1e-14)


def test_single_block_is_deterministic():
    op = compute_norms(BlockOperator.from_matrix(np.array([[1.0, 0.2], [0.0, 0.5]]), [2]))
    x_true = np.array([1.0, -1.0])
    pr = InverseProblem(operator=op, x_exact=x_true, y_exact=op.matvec(x_true), y_noisy=op.matvec(x_true) + 0.01,
                        delta=0.0)
    cfg = SolverConfig("svrg", c0=0.5 / op.L, M=3)
    res = enumerate_paths(OracleState.from_problem(pr, cfg), 4)
    path = svrg_path(op, pr.y_noisy, pr.x0, cfg.c0, 3, [0, 0, 0, 0])
    np.testing.assert_allclose(res.mean_iterate, path[-1], atol=1e-15)
    assert res.variance == pytest.approx(0.0, abs=1e-28)


def test_variance_assembly_example():
    pr = make_diagonal_problem(2, 1.0, 0.0, 0.0)
    pr = dataclasses.replace(pr, x0=np.array([0.3, -0.2]))
    res = enumerate_paths(OracleState.from_problem(pr, SolverConfig("svrg", c0=0.5, M=4)), 2)
    assert abs(res.variance - res.variance_terms) <= 1e-12
    assert res.variance > 0


def test_anchor_adelta_is_zero():
    pr = make_diagonal_problem(2, 1.0, 0.5, 0.1, seed=3)
    state = OracleState.from_problem(pr, SolverConfig("svrg", c0=0.5 / pr.operator.L, M=2))
    for k in (0, 2, 4):
        assert enumerate_paths(state, k).mean_ADelta_sq == 0.0
        assert np.all(exact_mean_adelta(state, k) == 0)


def test_functional_names_and_limits():
    pr = make_diagonal_problem(2, 1.0, 0.0, 0.1)
    cfg = SolverConfig("svrg", c0=0.5 / pr.operator.L)
    with pytest.raises(ValueError):
        enumerate_expectation(pr, cfg, 2, "median")
    with pytest.raises(EnumerationTooLarge):
        enumerate_expectation(pr, cfg, 24, "mean_iterate")
    assert enumerate_expectation(pr, cfg, 2, "mean_sq_error") >= 0


def test_enumeration_thread_invariant():
    pr = make_diagonal_problem(3, 1.0, 0.0, 0.1, seed=4)
    state = OracleState.from_problem(pr, SolverConfig("svrg", c0=0.5 / pr.operator.L, M=3))
    a = enumerate_paths(state, 6, workers=1, chunk=64)
    b = enumerate_paths(state, 6, workers=8, chunk=64)
    assert a.mean_iterate.tobytes() == b.mean_iterate.tobytes()
    assert a.variance == b.variance and a.mean_ADelta_sq == b.mean_ADelta_sq


def test_rsvrg_state_orthogonality():
    pr = make_diagonal_problem(6, 1.0, 0.5, 0.05, seed=1)
    cfg = SolverConfig("rsvrg", c0=0.5 / pr.operator.L, truncation=TruncationRule(a=5.0, b=1.0))
    state = OracleState.from_problem(pr, cfg)
    assert np.linalg.matrix_rank(state.B) == 4
    assert np.max(np.abs(state.B @ state.B_delta)) <= 1e-10 * np.max(np.abs(state.B_dag)) ** 2
    for k in range(3):
        mean = enumerate_paths(state, k).mean_iterate
        assert np.max(np.abs(mean - state.x_dag - exact_mean_error(state, k))) <= 1e-12


# ---- kernel bounds

def test_kernel_scalar_example():
    reps = verify_kernel_bounds(np.array([0.5]), 1.0, [1.0], [2], [1], [0.5])
    assert reps["bound1"].worst_point["lhs"] == pytest.approx(0.125)
    assert reps["bound1"].worst_point["rhs"] == pytest.approx(0.5)
    assert reps["bound1"].passed


def test_kernel_s_zero():
    reps = verify_kernel_bounds(lambda_grid(1.0), 1.0, [0.0], range(1, 10), [1], [0.1])
    assert reps["bound1"].passed
    assert reps["bound1"].worst_point["rhs"] == 1.0


def test_kernel_default_suite_passes():
    rep = kernel_suite()
    assert rep["passed"] and not rep["full_grid"]


def test_kernel_third_bound_fails_for_k_below_t():
    # the third bound is not valid when k < t; this is reported, not hidden
    rep = kernel_suite(full_grid=True)
    b3 = rep["bounds"]["bound3"]
    assert rep["bounds"]["bound1"]["passed"] and rep["bounds"]["bound2"]["passed"]
    assert not b3["passed"]
    assert all(v["k"] < v["t"] for v in b3["listed_violations"])


def test_kernel_requires_contraction():
    with pytest.raises(ValueError):
        verify_kernel_bounds(np.array([2.0]), 1.0, [1], [1], [1], [0.1])


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 5.0), st.integers(0, 2 ** 31))
def test_kernel_bounds_random_matrices(c0, seed):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((4, 4))
    b = q @ q.T
    b *= rng.uniform(0.1, 1.0) / (c0 * np.linalg.eigvalsh(b).max())
    reps = verify_kernel_bounds(b, c0, [0, 0.5, 1, 2], range(1, 20), range(1, 20), [0.1, 0.5],
                                require_k_ge_t=True)
    assert all(r.passed for r in reps.values())


# ---- variance operator bound

def test_variance_bound_zero_delta():
    op = compute_norms(BlockOperator.from_matrix(np.eye(2)))
    r = verify_variance_operator_bound(op, np.eye(2), np.zeros(2))
    assert r["mean"].worst_point["lhs"] == 0 and r["mean"].worst_point["rhs"] == 0
    assert r["mean"].passed and r["uniform"].passed


def test_variance_bound_identity_example():
    op = compute_norms(BlockOperator.from_matrix(np.eye(2)))
    r = verify_variance_operator_bound(op, np.eye(2), np.array([1.0, 0.0]))
    assert r["mean"].worst_point["lhs"] == pytest.approx(0.25)
    assert r["mean"].worst_point["rhs"] == pytest.approx(0.5)
    assert r["mean"].passed


def test_variance_bound_random_pairs():
    rng = np.random.default_rng(0)
    op = compute_norms(BlockOperator.from_matrix(rng.standard_normal((4, 3))))
    for _ in range(20):
        r = verify_variance_operator_bound(op, rng.standard_normal((3, 3)), rng.standard_normal(3))
        assert r["mean"].passed and r["uniform"].passed


def test_suites_fast_and_clean():
    t0 = time.perf_counter()
    ident = identity_suite()
    assert ident["passed"], ident
    assert time.perf_counter() - t0 < 5
    assert variance_suite(100)["passed"]
    rep = run_suite("all")
    assert rep["passed"] and set(rep["suites"]) == {"identities", "kernel", "variance"}
    with pytest.raises(ValueError):
        run_suite("bogus")
