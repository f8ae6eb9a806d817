"""Lagrange-multiplier contact pipeline against a static half-space.

Each step runs in three stages: an unconstrained free motion (the plain
implicit step), constraint resolution in constraint space, and a motion
correction.  Constraints never touch the system matrix: the compliance
operator W = J A^-1 J^T is built column by column from solves with the
already-assembled system, using the asynchronous factors when they are
ready and (preconditioned) CG otherwise.

Conventions: a constraint row measures violation (penetration depth,
positive when violated), J = d(violation)/dx, and the corrected
accelerations are a_free - A^-1 J^T lambda with lambda >= 0 for unilateral
rows, which yields the standard complementarity system
    0 <= lambda  perp  h^2 W lambda - violation_free >= 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .integrator import BackwardEulerIntegrator, SimState, StepResult

logger = logging.getLogger(__name__)

__all__ = [
    "ContactError",
    "ConstraintSet",
    "detect_plane_contacts",
    "build_compliance",
    "projected_gauss_seidel",
    "correct_motion",
    "ContactStepInfo",
    "PlaneContactPipeline",
]

BILATERAL = "bilateral"
UNILATERAL = "unilateral"


class ContactError(RuntimeError):
    pass


@dataclass
class ConstraintSet:
    """Sparse constraint Jacobian (one row per constraint) plus violations.

    Row i is stored as (col_ind[indptr[i]:indptr[i+1]], coeffs[...]) over the
    3n DOFs.  `violation` is positive where the constraint is violated.
    """

    ndof: int
    indptr: np.ndarray
    col_ind: np.ndarray
    coeffs: np.ndarray
    violation: np.ndarray
    types: list[str]

    @property
    def nconstraints(self) -> int:
        return len(self.violation)

    def row_dense(self, i: int) -> np.ndarray:
        row = np.zeros(self.ndof)
        lo, hi = self.indptr[i], self.indptr[i + 1]
        row[self.col_ind[lo:hi]] = self.coeffs[lo:hi]
        return row

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """J @ x."""
        out = np.empty(self.nconstraints)
        for i in range(self.nconstraints):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            out[i] = self.coeffs[lo:hi] @ x[self.col_ind[lo:hi]]
        return out

    def rmatvec(self, lam: np.ndarray) -> np.ndarray:
        """J^T @ lam."""
        out = np.zeros(self.ndof)
        for i in range(self.nconstraints):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            out[self.col_ind[lo:hi]] += lam[i] * self.coeffs[lo:hi]
        return out


def detect_plane_contacts(positions: np.ndarray, plane_z: float) -> ConstraintSet:
    """Unilateral contacts for nodes below the plane z = plane_z.

    violation = plane_z - z (penetration depth), so J has a single -1 entry
    on the node's z DOF.
    """
    pen = plane_z - positions[:, 2]
    nodes = np.flatnonzero(pen > 0.0)
    m = len(nodes)
    return ConstraintSet(
        ndof=3 * len(positions),
        indptr=np.arange(m + 1, dtype=np.int64),
        col_ind=3 * nodes + 2,
        coeffs=np.full(m, -1.0),
        violation=pen[nodes],
        types=[UNILATERAL] * m,
    )


def build_compliance(constraints: ConstraintSet, solve_fn) -> tuple[np.ndarray, np.ndarray]:
    """Compliance matrix W = J A^-1 J^T, one solve per constraint column.

    `solve_fn(rhs)` must apply A^-1 (preconditioner factors or an iterative
    solve).  Returns (W, S) where S stacks the solution columns A^-1 J^T e_i;
    the correction stage reuses S so it stays exactly consistent with W.
    W is symmetrized by averaging.
    """
    m = constraints.nconstraints
    ndof = constraints.ndof
    s_cols = np.empty((ndof, m))
    for i in range(m):
        s_cols[:, i] = solve_fn(constraints.row_dense(i))
    w = np.empty((m, m))
    for i in range(m):
        w[i] = constraints.matvec(s_cols[:, i])
    w = 0.5 * (w + w.T)
    return w, s_cols


def projected_gauss_seidel(
    w: np.ndarray,
    rhs: np.ndarray,
    types,
    tol: float = 1e-12,
    max_sweeps: int = 500,
) -> np.ndarray:
    """Solve W lambda = rhs with lambda >= 0 on unilateral rows.

    Gauss-Seidel sweeps in constraint order; after each unilateral update the
    multiplier is clamped at zero.  Stops when max |d lambda| <= tol * max
    |lambda| (or everything is exactly zero).  Rows with a zero diagonal
    cannot be iterated and are dropped (multiplier forced to zero).
    """
    m = len(rhs)
    lam = np.zeros(m)
    if m == 0:
        return lam
    diag = np.diagonal(w).copy()
    usable = diag != 0.0
    if not usable.all():
        logger.warning("dropping %d constraint(s) with zero compliance diagonal",
                       int(np.count_nonzero(~usable)))
    unilateral = np.array([t == UNILATERAL for t in types])
    for _ in range(max_sweeps):
        delta_max = 0.0
        for i in range(m):
            if not usable[i]:
                lam[i] = 0.0
                continue
            new = lam[i] + (rhs[i] - w[i] @ lam) / diag[i]
            if unilateral[i] and new < 0.0:
                new = 0.0
            delta_max = max(delta_max, abs(new - lam[i]))
            lam[i] = new
        scale = np.abs(lam).max()
        if delta_max <= tol * scale or scale == 0.0:
            break
    return lam


def correct_motion(
    free: StepResult,
    state: SimState,
    constraints: ConstraintSet,
    lam: np.ndarray,
    s_cols: np.ndarray,
    dt: float,
    fixed_nodes: np.ndarray,
) -> StepResult:
    """Apply a_corr = a_free - S lambda and rebuild velocities/positions."""
    delta = s_cols @ lam
    acc = free.accelerations - delta.reshape(-1, 3)
    acc[fixed_nodes] = 0.0
    vel = state.velocities + dt * acc
    pos = state.positions + dt * vel
    vel[fixed_nodes] = state.velocities[fixed_nodes]
    pos[fixed_nodes] = state.positions[fixed_nodes]
    return StepResult(
        positions=pos,
        velocities=vel,
        accelerations=acc,
        f_int=free.f_int,
        f_ext=free.f_ext,
        matrix=free.matrix,
        rhs=free.rhs,
        report=free.report,
        pattern_rebuilt=free.pattern_rebuilt,
        assembly_time=free.assembly_time,
        solve_time=free.solve_time,
    )


@dataclass
class ContactStepInfo:
    result: StepResult
    ncontacts: int
    complementarity_residual: float
    max_penetration: float


class PlaneContactPipeline:
    """Free motion / constraint resolution / motion correction, per step."""

    def __init__(self, integrator: BackwardEulerIntegrator, plane_z: float):
        self.integrator = integrator
        self.plane_z = plane_z

    def step(self, state: SimState, solve, apply_inverse=None) -> ContactStepInfo:
        """One constrained step, committed into `state`.

        `solve` is the linear solver used for the free motion; the optional
        `apply_inverse(rhs)` (asynchronous factors) is used for the compliance
        columns, falling back to CG solves against the assembled matrix when
        it is not available.  If the compliance solve fails the free motion
        is committed unchanged.
        """
        integ = self.integrator
        free = integ.compute_step(state, solve)
        constraints = detect_plane_contacts(free.positions, self.plane_z)
        m = constraints.nconstraints
        if m == 0:
            integ.commit(state, free)
            return ContactStepInfo(free, 0, 0.0, self._max_penetration(state))

        if apply_inverse is None:
            def apply_inverse(rhs):
                x, report = solve(free.matrix, rhs)
                if not report.converged:
                    raise ContactError(f"compliance solve stalled at residual {report.final_residual:g}")
                return x

        try:
            w, s_cols = build_compliance(constraints, apply_inverse)
        except ContactError:
            logger.warning("compliance solve failed; committing free motion", exc_info=True)
            integ.commit(state, free)
            return ContactStepInfo(free, m, float("nan"), self._max_penetration(state))

        h = integ.config.dt
        m_mat = h * h * w
        lam = projected_gauss_seidel(m_mat, constraints.violation, constraints.types)
        corrected = correct_motion(free, state, constraints, lam, s_cols, h, integ.mesh.fixed_nodes)
        integ.commit(state, corrected)
        gap = m_mat @ lam - constraints.violation
        residual = float(np.abs(lam * gap).sum())
        return ContactStepInfo(corrected, m, residual, self._max_penetration(state))

    def _max_penetration(self, state: SimState) -> float:
        return float(np.maximum(self.plane_z - state.positions[:, 2], 0.0).max(initial=0.0))
