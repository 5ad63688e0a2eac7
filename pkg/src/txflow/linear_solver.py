"""Sparse direct solve of the stamped system.

Factorization is SuperLU (via :mod:`scipy.sparse.linalg`) with partial
pivoting. The column ordering found on a first factorization can be handed
back in to skip the fill-reducing analysis on later systems with the same
pattern.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csc_matrix, issparse
from scipy.sparse.csgraph import structural_rank
from scipy.sparse.linalg import splu

from txflow.errors import DimensionMismatch, NumericallySingular, StructurallySingular
from txflow.stamps import SparseSystem

SINGULAR_RTOL = 1e-14


@dataclass(frozen=True)
class Factors:
    matrix: csc_matrix
    lu: object  # scipy SuperLU
    ordering: np.ndarray  # column permutation applied before factorizing
    pivot_growth: float

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def _raw_solve(self, b: np.ndarray, trans: str = "N") -> np.ndarray:
        # A[:, p] = L U (with SuperLU's own row pivoting inside lu)
        if trans == "N":
            y = self.lu.solve(b)
            x = np.empty_like(y)
            x[self.ordering] = y
            return x
        # A^T z = b  <=>  (A[:, p])^T z = b[p]
        return self.lu.solve(np.ascontiguousarray(b[self.ordering]), trans="T")


def _as_csc(sys) -> csc_matrix:
    if isinstance(sys, SparseSystem):
        return sys.matrix()
    if issparse(sys):
        return csc_matrix(sys)
    return csc_matrix(np.asarray(sys, dtype=float))


def factorize(sys, ordering: np.ndarray | None = None) -> Factors:
    """LU-factorize a :class:`SparseSystem` (or any square matrix).

    With ``ordering=None`` a COLAMD fill-reducing ordering is computed;
    otherwise the given column permutation is used as is.
    """
    a = _as_csc(sys)
    n, m = a.shape
    if n != m or n < 1:
        raise DimensionMismatch(f"matrix must be square and non-empty, got {a.shape}")
    a.sum_duplicates()
    a.eliminate_zeros()
    col_nnz = np.diff(a.indptr)
    row_nnz = np.bincount(a.indices, minlength=n)
    if np.any(col_nnz == 0) or np.any(row_nnz == 0):
        raise StructurallySingular("matrix has an empty row or column")
    maxabs = float(np.abs(a.data).max()) if a.nnz else 0.0
    try:
        if ordering is None:
            lu = splu(a, permc_spec="COLAMD")
            ordering = np.asarray(lu.perm_c).argsort()
            # re-factor on the explicitly permuted matrix so both paths agree bitwise
            lu = splu(a[:, ordering], permc_spec="NATURAL")
        else:
            ordering = np.asarray(ordering)
            lu = splu(a[:, ordering], permc_spec="NATURAL")
    except RuntimeError as exc:
        # SuperLU reports any exactly zero pivot; tell pattern defects from cancellation
        if structural_rank(a) < n:
            raise StructurallySingular(str(exc)) from exc
        raise NumericallySingular(str(exc)) from exc
    udiag = np.abs(lu.U.diagonal())
    if not np.all(np.isfinite(udiag)) or udiag.min() <= SINGULAR_RTOL * maxabs:
        raise NumericallySingular(f"pivot {udiag.min():.3e} below {SINGULAR_RTOL:g}*max|A|")
    growth = float(np.abs(lu.U.data).max() / maxabs) if maxabs > 0 else 1.0
    return Factors(matrix=a, lu=lu, ordering=ordering, pivot_growth=growth)


def solve(factors: Factors, rhs) -> np.ndarray:
    """Solve ``A x = rhs`` with one step of iterative refinement.

    The refined iterate is kept only if it does not increase the residual.
    """
    b = np.asarray(rhs, dtype=float)
    if b.shape != (factors.n,):
        raise DimensionMismatch(f"rhs has shape {b.shape}, expected ({factors.n},)")
    a = factors.matrix
    x0 = factors._raw_solve(b)
    r0 = b - a @ x0
    x1 = x0 + factors._raw_solve(r0)
    r1 = b - a @ x1
    if np.linalg.norm(r1, np.inf) <= np.linalg.norm(r0, np.inf):
        return x1
    return x0


def residual_bound_ok(a, x, b, rtol: float = 1e-10) -> bool:
    a_inf = abs(a).sum(axis=1).max() if issparse(a) else np.abs(a).sum(axis=1).max()
    res = np.linalg.norm(b - a @ x, np.inf)
    return res <= rtol * (a_inf * np.linalg.norm(x, np.inf) + np.linalg.norm(b, np.inf))


def inverse_one_norm_estimate(factors: Factors, max_iter: int = 5) -> float:
    """Hager's estimator of ``||A^{-1}||_1`` with Higham's alternating-sign check."""
    n = factors.n
    x = np.full(n, 1.0 / n)
    est = 0.0
    prev_j = -1
    for _ in range(max_iter):
        y = factors._raw_solve(x)
        est = np.abs(y).sum()
        xi = np.where(y >= 0, 1.0, -1.0)
        z = factors._raw_solve(xi, trans="T")
        j = int(np.argmax(np.abs(z)))
        if np.abs(z[j]) <= z @ x or j == prev_j:
            break
        x = np.zeros(n)
        x[j] = 1.0
        prev_j = j
    # extra probe catches matrices where the gradient ascent stalls
    alt = np.array([(-1.0) ** i * (1.0 + i / max(n - 1, 1)) for i in range(n)])
    y = factors._raw_solve(alt)
    alt_est = 2.0 * np.abs(y).sum() / (3.0 * n)
    return float(max(est, alt_est))


def condition_estimate(sys, factors: Factors | None = None) -> float:
    """1-norm condition number estimate ``||A||_1 * est(||A^{-1}||_1)``."""
    if factors is None:
        factors = factorize(sys)
    a = factors.matrix
    norm_a = float(abs(a).sum(axis=0).max())
    return norm_a * inverse_one_norm_estimate(factors)
