"""Dense block linear operators.

A :class:`BlockOperator` is a dense matrix whose rows are split into ``n``
contiguous blocks ``A_1, ..., A_n``.  The stochastic solvers sample one block
per inner step, so the per-block norms and ``L = max_i ||A_i||^2`` are cached
next to the full SVD, which is the single source for ``||A||`` and for
spectral truncation.
"""

from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "InvalidOperatorError",
    "SvdFactorization",
    "BlockOperator",
    "TruncationRule",
    "compute_norms",
    "truncate",
    "choose_truncation_level",
    "truncation_constant",
    "derived_operators",
    "save_operator",
    "load_operator",
    "operator_to_csv",
]

SVD_RTOL = 1e-10
_MAGIC = b"SVRGOP01"


class InvalidOperatorError(ValueError):
    """Raised for empty or inconsistently partitioned operators."""


@dataclass(frozen=True, eq=False)
class SvdFactorization:
    """Thin SVD ``A = sum_j s_j u_j v_j^T`` with descending ``s``."""

    left: np.ndarray
    values: np.ndarray
    right: np.ndarray

    @classmethod
    def of(cls, a: np.ndarray) -> "SvdFactorization":
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        return cls(left=u, values=s, right=vt.T.copy())

    @property
    def rank(self) -> int:
        return int(self.values.size)

    def reconstruct(self, count: Optional[int] = None) -> np.ndarray:
        j = self.rank if count is None else count
        return (self.left[:, :j] * self.values[:j]) @ self.right[:, :j].T

    def check(self, a: np.ndarray, rtol: float = SVD_RTOL) -> None:
        """Assert the factorization invariants against the matrix ``a``."""
        s = self.values
        if np.any(s < 0) or np.any(np.diff(s) > 0):
            raise AssertionError("singular values must be non-negative and descending")
        scale = max(np.linalg.norm(a), 1.0)
        resid = np.linalg.norm(a - self.reconstruct())
        if resid > rtol * scale:
            raise AssertionError(f"SVD reconstruction residual {resid:.3e}")
        for name, q in (("left", self.left), ("right", self.right)):
            if q.shape[1] and np.max(np.abs(q.T @ q - np.eye(q.shape[1]))) > rtol:
                raise AssertionError(f"{name} singular vectors are not orthonormal")


@dataclass(frozen=True, eq=False)
class BlockOperator:
    """Dense operator ``A = (A_1; ...; A_n)`` with a contiguous row partition.

    Construct with :meth:`from_matrix`; call :func:`compute_norms` to fill the
    cached norms and SVD.  Instances are treated as immutable.
    """

    entries: np.ndarray
    partition: tuple
    row_block_norms: Optional[np.ndarray] = None
    op_norm: Optional[float] = None
    svd: Optional[SvdFactorization] = None

    def __post_init__(self):
        a = self.entries
        if a.ndim != 2 or a.size == 0:
            raise InvalidOperatorError("operator must be a non-empty 2-D matrix")
        if any(int(b) < 1 for b in self.partition):
            raise InvalidOperatorError("every row block must hold at least one row")
        if sum(self.partition) != a.shape[0]:
            raise InvalidOperatorError(
                f"partition sums to {sum(self.partition)}, matrix has {a.shape[0]} rows")

    @classmethod
    def from_matrix(cls, a, partition: Optional[Sequence[int]] = None) -> "BlockOperator":
        a = np.array(a, dtype=np.float64, order="C", copy=True)
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2 or a.size == 0:
            raise InvalidOperatorError("operator must be a non-empty 2-D matrix")
        if partition is None:
            partition = (1,) * a.shape[0]
        a.setflags(write=False)
        return cls(entries=a, partition=tuple(int(b) for b in partition))

    @property
    def shape(self):
        return self.entries.shape

    @property
    def n(self) -> int:
        """Number of row blocks."""
        return len(self.partition)

    @property
    def m(self) -> int:
        return self.entries.shape[1]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.partition))).astype(np.int64)

    @property
    def L(self) -> float:
        if self.row_block_norms is None:
            raise InvalidOperatorError("norms not computed; call compute_norms first")
        return float(np.max(self.row_block_norms) ** 2)

    def block(self, i: int) -> np.ndarray:
        off = self.offsets
        return self.entries[off[i]:off[i + 1]]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.entries @ x

    def rmatvec(self, r: np.ndarray) -> np.ndarray:
        return self.entries.T @ r


def compute_norms(op: BlockOperator) -> BlockOperator:
    """Return a copy of ``op`` with block norms, ``||A||`` and SVD cached.

    An SVD already attached to ``op`` is reused.
    """
    svd = op.svd if op.svd is not None else SvdFactorization.of(op.entries)
    off = op.offsets
    norms = np.empty(op.n)
    for i in range(op.n):
        blk = op.entries[off[i]:off[i + 1]]
        if blk.shape[0] == 1:
            norms[i] = np.sqrt(np.dot(blk[0], blk[0]))
        else:
            norms[i] = np.linalg.norm(blk, 2)
    op_norm = float(svd.values[0]) if svd.rank else 0.0
    out = dataclasses.replace(op, row_block_norms=norms, op_norm=op_norm, svd=svd)
    # ||A|| <= sqrt(sum ||A_i||^2) and L <= ||A||^2 <= n L, up to rounding
    slack = 1e-12 * max(op_norm, 1.0) ** 2
    lip = out.L
    if op_norm ** 2 > np.sum(norms ** 2) + slack or not (lip - slack <= op_norm ** 2 <= op.n * lip + slack):
        raise AssertionError("norm invariants violated")
    return out


@dataclass(frozen=True)
class TruncationRule:
    """Keep singular values ``s_j >= a * delta**b``; ``a == 0`` disables truncation."""

    a: float
    b: float = 1.0

    def __post_init__(self):
        if self.a < 0:
            raise ValueError("truncation level a must be non-negative")
        if self.b <= 0:
            raise ValueError("truncation exponent b must be positive")

    def threshold(self, delta: float) -> float:
        if self.a == 0:
            return 0.0
        return self.a * delta ** self.b

    def index(self, values: np.ndarray, delta: float) -> int:
        """Number ``J`` of kept singular values (ties at the threshold are kept)."""
        if self.a == 0:
            return int(values.size)
        return int(np.count_nonzero(values >= self.threshold(delta)))


def truncate(op: BlockOperator, rule: TruncationRule, delta: float, *,
             allow_large_delta: bool = False) -> BlockOperator:
    """Spectral truncation of ``op`` at ``rule.threshold(delta)``.

    With ``rule.a == 0`` the input operator itself is returned.  The rule is
    only meaningful for ``0 < delta < 1``; benchmark data with a larger
    absolute noise norm must opt in with ``allow_large_delta``.
    """
    if rule.a == 0:
        return op
    if delta <= 0 or (delta >= 1 and not allow_large_delta):
        raise ValueError(f"truncation requires 0 < delta < 1, got {delta!r}")
    if op.svd is None:
        op = compute_norms(op)
    svd = op.svd
    j = rule.index(svd.values, delta)
    kept = SvdFactorization(left=svd.left[:, :j].copy(), values=svd.values[:j].copy(),
                            right=svd.right[:, :j].copy())
    if j == 0:
        entries = np.zeros_like(op.entries)
    else:
        entries = kept.reconstruct()
    out = BlockOperator(entries=np.ascontiguousarray(entries), partition=op.partition, svd=kept)
    out.entries.setflags(write=False)
    return compute_norms(out)


def truncation_constant(a: float, n: int, nu: float, w_norm: float) -> float:
    """Limit-error constant ``n^-nu a^(2 nu) ||w|| + 1/a``."""
    return n ** (-nu) * a ** (2 * nu) * w_norm + 1.0 / a


def choose_truncation_level(n: int, nu: float, w_norm: float, *, minimizer: bool = False,
                            fallback: Optional[float] = None) -> float:
    """Truncation level ``a`` for ``b = 1/(1+2 nu)``.

    The default is the choice ``(n^nu/||w||)^(1/(1+2nu))`` that stays bounded
    as ``nu -> 0``; ``minimizer=True`` returns the exact minimizer
    ``(n^nu/(2 nu ||w||))^(1/(1+2nu))`` of :func:`truncation_constant`.
    For ``nu <= 0`` the formula degenerates and ``fallback`` is returned.
    """
    if nu <= 0:
        if fallback is None:
            raise ValueError("nu <= 0: supply an explicit truncation level")
        return float(fallback)
    if w_norm <= 0:
        raise ValueError("w_norm must be positive")
    denom = 2 * nu * w_norm if minimizer else w_norm
    return float((n ** nu / denom) ** (1.0 / (1 + 2 * nu)))


def derived_operators(op: BlockOperator, c0: float):
    """Return ``(B, P)`` with ``B = A^T A / n`` and ``P = I - c0 B``."""
    if c0 < 0:
        raise ValueError("c0 must be non-negative")
    a = op.entries
    gram = a.T @ a / op.n
    gram = 0.5 * (gram + gram.T)
    return gram, np.eye(op.m) - c0 * gram


def save_operator(op: BlockOperator, fh) -> None:
    """Write ``op`` as a little-endian binary container.

    Layout: magic, ``uint64`` rows/cols/blocks, ``int64`` partition, then the
    row-major ``float64`` entries.
    """
    rows, cols = op.shape
    fh.write(_MAGIC)
    fh.write(struct.pack("<QQQ", rows, cols, op.n))
    fh.write(np.asarray(op.partition, dtype="<i8").tobytes())
    fh.write(np.ascontiguousarray(op.entries, dtype="<f8").tobytes())


def load_operator(fh) -> BlockOperator:
    if fh.read(len(_MAGIC)) != _MAGIC:
        raise InvalidOperatorError("not an operator container")
    rows, cols, nblk = struct.unpack("<QQQ", fh.read(24))
    part = np.frombuffer(fh.read(8 * nblk), dtype="<i8")
    data = np.frombuffer(fh.read(8 * rows * cols), dtype="<f8")
    if data.size != rows * cols:
        raise InvalidOperatorError("truncated operator container")
    return BlockOperator.from_matrix(data.reshape(rows, cols), partition=part.tolist())


def operator_to_csv(op: BlockOperator) -> str:
    """CSV dump: a ``block`` column followed by the row entries."""
    buf = io.StringIO()
    buf.write("block," + ",".join(f"c{j}" for j in range(op.m)) + "\n")
    blk = np.repeat(np.arange(op.n), op.partition)
    for b, row in zip(blk, op.entries):
        buf.write(f"{b}," + ",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()
