"""Sparse matrix-vector product and (preconditioned) conjugate gradient.

Convergence is measured as the relative l2 residual ||r|| / ||b||, checked
from a single scalar per iteration.  All reductions run in a fixed order, so
a solve is reproducible and cg() is bit-identical to pcg() with an identity
preconditioner.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass

import numpy as np

from ._threads import worker_pool
from .assembly import CsrMatrix

__all__ = [
    "SolverError",
    "SolveMode",
    "SolverConfig",
    "SolveReport",
    "spmv",
    "cg",
    "pcg",
    "jacobi_precond",
    "IdentityPreconditioner",
    "JacobiPreconditioner",
]


class SolverError(ValueError):
    pass


class SolveMode(enum.Enum):
    CG = "cg"
    PCG_JACOBI = "pcg-jacobi"
    PCG_LDLT = "pcg-ldlt"


@dataclass
class SolverConfig:
    tolerance: float = 1e-9
    max_iterations: int = 1000
    mode: SolveMode = SolveMode.CG

    def __post_init__(self):
        if not self.tolerance > 0:
            raise SolverError(f"tolerance must be positive, got {self.tolerance}")


@dataclass
class SolveReport:
    iterations: int
    final_residual: float
    converged: bool
    wall_time: float


def _row_sums(values: np.ndarray, x_gathered: np.ndarray, row_ptr: np.ndarray, out: np.ndarray):
    prod = values * x_gathered
    starts = row_ptr[:-1]
    nonempty = np.flatnonzero(row_ptr[1:] > starts)
    if nonempty.size:
        # reduceat over the starts of non-empty rows sums each row's entries
        # left to right; empty rows between two starts contribute nothing.
        out[nonempty] = np.add.reduceat(prod, starts[nonempty])


def spmv(a: CsrMatrix, x: np.ndarray, workers: int = 1) -> np.ndarray:
    """y = A @ x with per-row sequential accumulation (deterministic)."""
    if len(x) != a.ncols:
        raise SolverError(f"dimension mismatch: matrix is {a.nrows}x{a.ncols}, vector has {len(x)}")
    y = np.zeros(a.nrows)
    if a.nnz == 0:
        return y
    if workers <= 1:
        _row_sums(a.values, x[a.col_ind], a.row_ptr, y)
        return y
    # Row partition; each worker owns a contiguous row range, so results are
    # identical to the sequential path for any worker count.
    splits = np.linspace(0, a.nrows, workers + 1).astype(np.int64)

    def run(w):
        r0, r1 = splits[w], splits[w + 1]
        if r0 == r1:
            return
        lo, hi = a.row_ptr[r0], a.row_ptr[r1]
        sub_ptr = a.row_ptr[r0: r1 + 1] - lo
        _row_sums(a.values[lo:hi], x[a.col_ind[lo:hi]], sub_ptr, y[r0:r1])

    list(worker_pool(workers).map(run, range(workers)))
    return y


class IdentityPreconditioner:
    def apply(self, r: np.ndarray) -> np.ndarray:
        return r


class JacobiPreconditioner:
    def __init__(self, diag: np.ndarray):
        self.inv_diag = 1.0 / diag

    def apply(self, r: np.ndarray) -> np.ndarray:
        return r * self.inv_diag


def jacobi_precond(a: CsrMatrix) -> JacobiPreconditioner:
    """Diagonal preconditioner; the diagonal is extracted straight from CSR."""
    d = a.diagonal()
    if np.any(d == 0.0):
        raise SolverError(f"zero diagonal entry at row {int(np.flatnonzero(d == 0.0)[0])}")
    return JacobiPreconditioner(d)


def pcg(a: CsrMatrix, b: np.ndarray, precond, config: SolverConfig, x0=None, workers: int = 1):
    """Preconditioned conjugate gradient for SPD systems.

    The convergence test reads only the scalar relative residual norm each
    iteration.  Returns (x, SolveReport); a report with converged=False is
    returned instead of raising, the caller decides how to proceed.
    """
    t0 = time.perf_counter()
    if precond is None:
        precond = IdentityPreconditioner()
    x = np.zeros(a.ncols) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    b = np.asarray(b, dtype=np.float64)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(a.ncols), SolveReport(0, 0.0, True, time.perf_counter() - t0)
    r = b - spmv(a, x, workers) if x0 is not None else b.copy()
    res = float(np.linalg.norm(r)) / bnorm
    if res <= config.tolerance:
        return x, SolveReport(0, res, True, time.perf_counter() - t0)
    z = precond.apply(r)
    p = z.copy()
    rz = float(r @ z)
    iterations = 0
    converged = False
    while iterations < config.max_iterations:
        ap = spmv(a, p, workers)
        alpha = rz / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        iterations += 1
        res = float(np.linalg.norm(r)) / bnorm
        if res <= config.tolerance:
            converged = True
            break
        z = precond.apply(r)
        rz_next = float(r @ z)
        p = z + (rz_next / rz) * p
        rz = rz_next
    return x, SolveReport(iterations, res, converged, time.perf_counter() - t0)


def cg(a: CsrMatrix, b: np.ndarray, config: SolverConfig, x0=None, workers: int = 1):
    """Plain conjugate gradient (identity-preconditioned pcg)."""
    return pcg(a, b, IdentityPreconditioner(), config, x0=x0, workers=workers)
