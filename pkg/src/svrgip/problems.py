"""Benchmark inverse problems, source-condition solutions and data noise.

The three test problems are discretizations of Fredholm integral equations
of the first kind in the form distributed with Hansen's Regularization Tools
(``phillips``, ``gravity`` example 1 and ``shaw``).  Operators are always
partitioned into single rows, so ``n`` equals the number of data points.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linop import BlockOperator, compute_norms

__all__ = [
    "PROBLEMS",
    "DegenerateSourceError",
    "InverseProblem",
    "rng_stream",
    "phillips",
    "gravity",
    "shaw",
    "generate_problem",
    "diagonal_operator",
    "source_solution",
    "add_noise",
    "noise_with_level",
    "make_problem",
    "make_diagonal_problem",
]

PROBLEMS = ("phillips", "gravity", "shaw")
NOISE_STREAM = 2 ** 63


class DegenerateSourceError(ValueError):
    """The requested source power annihilates the seed solution."""


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream)``.

    Distinct streams never overlap, so replication ``r`` can be drawn from
    ``rng_stream(seed, r)`` regardless of scheduling order.
    """
    key = np.array([int(seed) % 2 ** 64, int(stream) % 2 ** 64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def phillips(size: int):
    """Galerkin (box basis) discretization of Phillips' test problem on [-6, 6]."""
    if size % 4:
        raise ValueError("phillips requires a size that is a multiple of 4")
    h = 12.0 / size
    n4 = size // 4
    c = np.cos(np.arange(-1, n4 + 1) * 4 * np.pi / size)
    r1 = np.zeros(size)
    r1[:n4] = h + 9.0 / (h * np.pi ** 2) * (2 * c[1:n4 + 1] - c[:n4] - c[2:n4 + 2])
    r1[n4] = h / 2 + 9.0 / (h * np.pi ** 2) * (np.cos(4 * np.pi / size) - 1)
    idx = np.abs(np.subtract.outer(np.arange(size), np.arange(size)))
    a = r1[idx]

    cw = np.pi / 3
    nodes = np.arange(n4 + 1) * h
    x = np.zeros(size)
    x[2 * n4:3 * n4] = (h + np.diff(np.sin(nodes * cw)) / cw) / np.sqrt(h)
    x[n4:2 * n4] = x[3 * n4 - 1:2 * n4 - 1:-1]
    return a, x


def gravity(size: int, depth: float = 0.25):
    """Midpoint quadrature of the 1-D gravity surveying kernel on [0, 1] (example 1)."""
    dt = 1.0 / size
    t = dt * (np.arange(1, size + 1) - 0.5)
    diff = np.subtract.outer(t, t)
    a = dt * depth / (depth ** 2 + diff ** 2) ** 1.5
    x = np.sin(np.pi * t) + 0.5 * np.sin(2 * np.pi * t)
    return a, x


def shaw(size: int):
    """Shaw's 1-D image restoration kernel on [-pi/2, pi/2]."""
    if size % 2:
        raise ValueError("shaw requires an even size")
    h = np.pi / size
    theta = -np.pi / 2 + (np.arange(1, size + 1) - 0.5) * h
    co = np.cos(theta)
    psi = np.pi * np.sin(theta)
    u = np.add.outer(psi, psi)
    # np.sinc(z) = sin(pi z)/(pi z), so sin(u)/u = np.sinc(u/pi)
    a = h * (np.add.outer(co, co) * np.sinc(u / np.pi)) ** 2
    x = 2 * np.exp(-6 * (theta - 0.8) ** 2) + np.exp(-2 * (theta + 0.5) ** 2)
    return a, x


_GENERATORS = {"phillips": phillips, "gravity": gravity, "shaw": shaw}


def generate_problem(name: str, size: int):
    """Return ``(operator, x_e)`` for a named test problem.

    The operator comes back with norms and SVD computed.
    """
    try:
        gen = _GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {PROBLEMS}") from None
    if size < 4:
        raise ValueError("size must be at least 4")
    a, x = gen(size)
    return compute_norms(BlockOperator.from_matrix(a)), x


def diagonal_operator(m: int, power: float = 1.0) -> BlockOperator:
    """Diagonal operator with singular values ``j**-power``, one row per block."""
    return compute_norms(BlockOperator.from_matrix(np.diag(np.arange(1, m + 1) ** -float(power))))


def source_solution(op: BlockOperator, x_e: np.ndarray, nu: float) -> np.ndarray:
    """``(A^T A)^nu x_e`` normalized to unit max-norm, evaluated spectrally."""
    if nu < 0:
        raise ValueError("nu must be non-negative")
    x_e = np.asarray(x_e, dtype=np.float64)
    if nu == 0:
        v = x_e.copy()
    else:
        if op.svd is None:
            op = compute_norms(op)
        phi, s = op.svd.right, op.svd.values
        v = phi @ (s ** (2 * nu) * (phi.T @ x_e))
    scale = np.max(np.abs(v))
    if scale == 0:
        raise DegenerateSourceError("source power of x_e vanishes")
    return v / scale


def add_noise(y_exact: np.ndarray, eps: float, seed: int):
    """``y + eps * ||y||_inf * xi`` with standard normal ``xi``.

    Returns ``(y_noisy, delta)`` with ``delta`` the realized noise norm.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    y_exact = np.asarray(y_exact, dtype=np.float64)
    if eps == 0:
        return y_exact.copy(), 0.0
    xi = rng_stream(seed, NOISE_STREAM).standard_normal(y_exact.shape)
    y_noisy = y_exact + eps * np.max(np.abs(y_exact)) * xi
    return y_noisy, float(np.linalg.norm(y_noisy - y_exact))


def noise_with_level(y_exact: np.ndarray, delta: float, seed: int):
    """Gaussian noise direction rescaled to an exact norm ``delta``."""
    y_exact = np.asarray(y_exact, dtype=np.float64)
    if delta == 0:
        return y_exact.copy(), 0.0
    xi = rng_stream(seed, NOISE_STREAM).standard_normal(y_exact.shape)
    y_noisy = y_exact + delta * xi / np.linalg.norm(xi)
    return y_noisy, float(np.linalg.norm(y_noisy - y_exact))


@dataclass(eq=False)
class InverseProblem:
    """Operator, exact solution/data and one noisy data realization."""

    operator: BlockOperator
    x_exact: np.ndarray
    y_exact: np.ndarray
    y_noisy: np.ndarray
    delta: float
    rel_noise: float = 0.0
    nu: float = 0.0
    nu_e: float = 0.0
    x0: Optional[np.ndarray] = None
    seed: int = 0
    name: str = "custom"
    # ||w|| for x_exact - x0 = B^nu w, when known
    w_norm: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.x0 is None:
            self.x0 = np.zeros(self.operator.m)

    @property
    def n(self) -> int:
        return self.operator.n

    def with_noise(self, eps: float, seed: int) -> "InverseProblem":
        y_noisy, delta = add_noise(self.y_exact, eps, seed)
        return dataclasses.replace(self, y_noisy=y_noisy, delta=delta, rel_noise=eps, seed=seed)

    def metadata(self) -> dict:
        return {
            "name": self.name,
            "size": int(self.operator.m),
            "n": int(self.n),
            "nu": float(self.nu),
            "nu_e": float(self.nu_e),
            "eps": float(self.rel_noise),
            "seed": int(self.seed),
            "delta": float(self.delta),
            "w_norm": None if self.w_norm is None else float(self.w_norm),
            **self.meta,
        }


def make_problem(name: str, size: int, nu: float = 0.0, eps: float = 0.0, seed: int = 0,
                 nu_e: float = 0.0, raw_solution: bool = False) -> InverseProblem:
    """Build a named benchmark with a synthesized exact solution and noisy data.

    ``raw_solution=True`` keeps the package solution ``x_e`` as ``x_exact``
    instead of applying the source power.
    """
    op, x_e = generate_problem(name, size)
    if raw_solution:
        x_true = x_e.copy()
        w_norm = None
    else:
        x_true = source_solution(op, x_e, nu)
        w_norm = _synthesized_w_norm(op, x_e, nu)
    y = op.matvec(x_true)
    y_noisy, delta = add_noise(y, eps, seed)
    return InverseProblem(operator=op, x_exact=x_true, y_exact=y, y_noisy=y_noisy, delta=delta,
                          rel_noise=eps, nu=nu, nu_e=nu_e, seed=seed, name=name, w_norm=w_norm)


def _synthesized_w_norm(op: BlockOperator, x_e: np.ndarray, nu: float) -> float:
    # x = (A^T A)^nu x_e / s = B^nu (n^nu x_e / s) on the range of A^T
    s = op.svd.values
    coef = op.svd.right.T @ x_e
    scale = np.max(np.abs(op.svd.right @ (s ** (2 * nu) * coef))) if nu else np.max(np.abs(x_e))
    if nu:
        coef = coef[s > 0]
    return float(op.n ** nu * np.linalg.norm(coef) / scale)


def make_diagonal_problem(m: int, power: float, nu: float, delta: float, seed: int = 0,
                          w: Optional[np.ndarray] = None) -> InverseProblem:
    """Diagonal problem with ``x_exact = B^nu w`` exactly and noise of norm ``delta``.

    The default ``w_j = j**-0.5`` spreads the source mass evenly over dyadic
    spectral shells, which makes the worst-case rates visible.
    """
    op = diagonal_operator(m, power)
    if w is None:
        w = np.arange(1, m + 1) ** -0.5
    w = np.asarray(w, dtype=np.float64)
    lam = np.diag(op.entries) ** 2 / op.n
    x_true = lam ** nu * w
    y = op.matvec(x_true)
    y_noisy, realized = noise_with_level(y, delta, seed)
    return InverseProblem(operator=op, x_exact=x_true, y_exact=y, y_noisy=y_noisy, delta=realized,
                          nu=nu, seed=seed, name=f"diag-p{power:g}", w_norm=float(np.linalg.norm(w)),
                          meta={"power": float(power)})
