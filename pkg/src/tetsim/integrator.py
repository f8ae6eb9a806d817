"""Backward-Euler time stepping on the assembled system.

One fused collection pass gathers mass and stiffness triplets; the system
matrix  A = (1 + h*alpha) M + h (h + beta) K  is obtained by compressing that
single pass with per-triplet coefficients, and the right-hand side

    b = f_ext - f(x_t, v_t) - (h + beta) K v_t - alpha M v_t

is accumulated from the same element data (K v_t comes from the element
stiffness blocks times element velocities, so no extra matrix product is
needed).  Solving A a = b and updating v += h a, x += h v is one implicit
step; pinned DOFs keep identity rows in A and zero entries in b, so their
kinematics never change.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .assembly import CsrMatrix, MatrixAssembler
from .krylov import SolveReport
from .mesh import Mesh
from .models import lumped_mass

__all__ = [
    "IntegratorError",
    "StepError",
    "IntegratorConfig",
    "SimState",
    "StepResult",
    "BackwardEulerIntegrator",
]


class IntegratorError(ValueError):
    pass


class StepError(RuntimeError):
    """Linear solve failed during a step; carries the solver report."""

    def __init__(self, message: str, report: SolveReport):
        super().__init__(message)
        self.report = report


@dataclass
class IntegratorConfig:
    dt: float
    rayleigh_mass: float = 0.0
    rayleigh_stiffness: float = 0.0
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    newton_iterations: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise IntegratorError(f"dt must be positive, got {self.dt}")
        if self.rayleigh_mass < 0 or self.rayleigh_stiffness < 0:
            raise IntegratorError("Rayleigh coefficients must be non-negative")
        if self.newton_iterations < 1:
            raise IntegratorError("newton_iterations must be >= 1")


@dataclass
class SimState:
    """Nodal kinematics plus the force vectors of the last assembled step."""

    positions: np.ndarray      # (n, 3)
    velocities: np.ndarray     # (n, 3)
    accelerations: np.ndarray  # (n, 3)
    f_int: np.ndarray          # (3n,)
    f_ext: np.ndarray          # (3n,)
    time: float = 0.0

    @classmethod
    def rest(cls, mesh: Mesh) -> "SimState":
        n = mesh.node_count
        return cls(
            positions=mesh.nodes.copy(),
            velocities=np.zeros((n, 3)),
            accelerations=np.zeros((n, 3)),
            f_int=np.zeros(3 * n),
            f_ext=np.zeros(3 * n),
        )

    def copy(self) -> "SimState":
        return SimState(
            self.positions.copy(),
            self.velocities.copy(),
            self.accelerations.copy(),
            self.f_int.copy(),
            self.f_ext.copy(),
            self.time,
        )


@dataclass
class StepResult:
    """Candidate kinematics of one implicit step, before being committed."""

    positions: np.ndarray
    velocities: np.ndarray
    accelerations: np.ndarray
    f_int: np.ndarray
    f_ext: np.ndarray
    matrix: CsrMatrix
    rhs: np.ndarray
    report: SolveReport
    pattern_rebuilt: bool
    assembly_time: float
    solve_time: float


class BackwardEulerIntegrator:
    """Owns the assembler and the cached mass data for one mesh/model pair."""

    def __init__(self, mesh: Mesh, model, config: IntegratorConfig, workers: int = 1):
        self.mesh = mesh
        self.model = model
        self.config = config
        self.workers = workers
        self.fixed_dofs = mesh.fixed_dofs()
        self.assembler = MatrixAssembler(mesh.ndof, self.fixed_dofs)
        self.mass_diag = lumped_mass(mesh, model.params)
        self._mass_rows = (3 * mesh.elements[:, :, None] + np.arange(3)).reshape(-1).copy()
        self._mass_vals = np.repeat(model.params.density * mesh.signed_volumes() / 4.0, 12)
        self._gravity_force = (
            self.mass_diag.reshape(-1, 3) * np.asarray(config.gravity)
        ).ravel()
        self._coeffs: np.ndarray | None = None

    def _coefficients(self, n_mass: int, n_total: int) -> np.ndarray:
        h = self.config.dt
        cm = 1.0 + h * self.config.rayleigh_mass
        ck = h * (h + self.config.rayleigh_stiffness)
        if self._coeffs is None or len(self._coeffs) != n_total:
            self._coeffs = np.empty(n_total)
            self._coeffs[:n_mass] = cm
            self._coeffs[n_mass:] = ck
        return self._coeffs

    def assemble_system(self, state: SimState) -> tuple[CsrMatrix, np.ndarray, dict]:
        """One fused mass-and-stiffness pass; returns (A, b, info)."""
        cfg = self.config
        h = cfg.dt
        t0 = time.perf_counter()
        stream = self.assembler.begin()
        stream.add_block(self._mass_rows, self._mass_rows, self._mass_vals)
        n_mass = stream.cursor
        v_flat = state.velocities.ravel()
        f_int, kv = self.model.accumulate(state.positions, stream=stream, velocities=v_flat)
        coeffs = self._coefficients(n_mass, stream.cursor)
        a_mat, rebuilt = self.assembler.finish(coeffs=coeffs, workers=self.workers)

        f_ext = state.f_ext + self._gravity_force
        b = f_ext - f_int - (h + cfg.rayleigh_stiffness) * kv
        if cfg.rayleigh_mass:
            b -= cfg.rayleigh_mass * (self.mass_diag * v_flat)
        b[self.fixed_dofs] = 0.0
        info = {
            "pattern_rebuilt": rebuilt,
            "assembly_time": time.perf_counter() - t0,
            "f_int": f_int,
            "f_ext": f_ext,
        }
        return a_mat, b, info

    def compute_step(self, state: SimState, solve) -> StepResult:
        """Run one implicit step without committing it to the state.

        `solve` is a callable (A, b) -> (x, SolveReport).  With
        newton_iterations > 1 the system is relinearized around the updated
        trial kinematics; the default single iteration is the plain
        linearized implicit step.
        """
        cfg = self.config
        h = cfg.dt
        trial = state
        assembly_time = 0.0
        solve_time = 0.0
        rebuilt_any = False
        for _ in range(cfg.newton_iterations):
            a_mat, b, info = self.assemble_system(trial)
            assembly_time += info["assembly_time"]
            rebuilt_any = rebuilt_any or info["pattern_rebuilt"]
            t0 = time.perf_counter()
            accel, report = solve(a_mat, b)
            solve_time += time.perf_counter() - t0
            if not report.converged:
                raise StepError(
                    f"linear solve did not converge: residual {report.final_residual:g} "
                    f"after {report.iterations} iterations",
                    report,
                )
            if not np.all(np.isfinite(accel)):
                raise StepError("solver produced non-finite accelerations", report)
            accel = accel.copy()
            accel[self.fixed_dofs] = 0.0
            acc = accel.reshape(-1, 3)
            vel = state.velocities + h * acc
            pos = state.positions + h * vel
            fixed = self.mesh.fixed_nodes
            vel[fixed] = state.velocities[fixed]
            pos[fixed] = state.positions[fixed]
            trial = SimState(pos, vel, acc, info["f_int"], info["f_ext"], state.time + h)
        return StepResult(
            positions=trial.positions,
            velocities=trial.velocities,
            accelerations=trial.accelerations,
            f_int=trial.f_int,
            f_ext=trial.f_ext,
            matrix=a_mat,
            rhs=b,
            report=report,
            pattern_rebuilt=rebuilt_any,
            assembly_time=assembly_time,
            solve_time=solve_time,
        )

    def commit(self, state: SimState, result: StepResult):
        # state.f_ext stays the persistent applied loads; gravity is re-added
        # every assembly, so the full external force lives on the result only.
        state.positions = result.positions
        state.velocities = result.velocities
        state.accelerations = result.accelerations
        state.f_int = result.f_int
        state.time += self.config.dt

    def step(self, state: SimState, solve) -> StepResult:
        """Advance the state by one implicit step (in place)."""
        result = self.compute_step(state, solve)
        self.commit(state, result)
        return result
