"""Scenario runner: JSON config in, metrics CSV and VTK snapshots out.

Commands:
    tetsim run <config.json>
    tetsim bench <config.json> --variants fast,full,cg,pcg,trisolve

Environment overrides (nothing else is read from the environment):
    TETSIM_WORKERS     worker count
    TETSIM_OUTPUT_DIR  directory prepended to relative output paths
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import krylov, ndprecond
from .contact import PlaneContactPipeline
from .integrator import BackwardEulerIntegrator, IntegratorConfig, SimState
from .krylov import SolveMode, SolverConfig
from .mesh import Mesh, generate_beam, load_tetgen, vertex_adjacency
from .models import MaterialParams, make_model
from .ndprecond import AsyncPreconditioner, PrecondStatus, expand_plan, nested_dissection

__all__ = [
    "ConfigError",
    "ScenarioConfig",
    "StepMetrics",
    "ScenarioRunner",
    "METRICS_HEADER",
    "run",
    "bench",
    "main",
    "write_vtk",
]

METRICS_HEADER = "step,assembly_ms,pattern_rebuilt,solve_ms,cg_iterations,residual,precond_status,staleness"

_FIX_PLANES = ("xmin", "xmax", "ymin", "ymax", "zmin", "zmax")
_LAWS = ("corotational", "stvk")
_MODES = tuple(m.value for m in SolveMode)
_POLICIES = ("on-completion", "every-k")


class ConfigError(ValueError):
    pass


@dataclass
class MeshConfig:
    generator: dict | None = None
    node_file: str | None = None
    ele_file: str | None = None
    fixed_nodes: list[int] = field(default_factory=list)
    fix_plane: str | None = None


@dataclass
class ScenarioConfig:
    mesh: MeshConfig
    law: str = "corotational"
    young_modulus: float = 1e5
    poisson_ratio: float = 0.3
    density: float = 1000.0
    dt: float = 0.01
    rayleigh_mass: float = 0.0
    rayleigh_stiffness: float = 0.0
    gravity: tuple = (0.0, 0.0, -9.81)
    solver_mode: str = "cg"
    tolerance: float = 1e-9
    max_iterations: int = 2000
    precond_enabled: bool = False
    leaf_threshold: int = 64
    tile: int = 16
    policy: str = "on-completion"
    refactor_every: int = 4
    contact_enabled: bool = False
    plane_z: float = 0.0
    steps: int = 10
    seed: int = 0
    workers: int = 1
    metrics_csv: str | None = None
    snapshot_every: int = 0
    snapshot_dir: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be an object, got {type(data).__name__}")
        mesh_d = data.get("mesh")
        if not isinstance(mesh_d, dict):
            raise ConfigError("mesh: section is required")
        mesh = MeshConfig(
            generator=mesh_d.get("generator"),
            node_file=mesh_d.get("node_file"),
            ele_file=mesh_d.get("ele_file"),
            fixed_nodes=list(mesh_d.get("fixed_nodes", [])),
            fix_plane=mesh_d.get("fix_plane"),
        )
        if mesh.generator is None and (mesh.node_file is None or mesh.ele_file is None):
            raise ConfigError("mesh: either generator or node_file/ele_file is required")
        if mesh.fix_plane is not None and mesh.fix_plane not in _FIX_PLANES:
            raise ConfigError(f"mesh.fix_plane: expected one of {_FIX_PLANES}, got {mesh.fix_plane!r}")
        if mesh.generator is not None:
            for k in ("nx", "ny", "nz", "spacing"):
                if k not in mesh.generator:
                    raise ConfigError(f"mesh.generator.{k}: missing")
        for name in ("node_file", "ele_file"):
            p = getattr(mesh, name)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"mesh.{name}: file {p!r} does not exist")

        mat = data.get("material", {})
        law = mat.get("law", "corotational")
        if law not in _LAWS:
            raise ConfigError(f"material.law: expected one of {_LAWS}, got {law!r}")
        integ = data.get("integrator", {})
        solver = data.get("solver", {})
        mode = solver.get("mode", "cg")
        if mode not in _MODES:
            raise ConfigError(f"solver.mode: expected one of {_MODES}, got {mode!r}")
        precond = data.get("precond", {})
        policy = precond.get("policy", "on-completion")
        if policy not in _POLICIES:
            raise ConfigError(f"precond.policy: expected one of {_POLICIES}, got {policy!r}")
        contact = data.get("contact", {})
        run_d = data.get("run", {})
        output = data.get("output", {})
        gravity = integ.get("gravity", (0.0, 0.0, -9.81))
        if len(gravity) != 3:
            raise ConfigError(f"integrator.gravity: expected 3 components, got {gravity!r}")
        cfg = cls(
            mesh=mesh,
            law=law,
            young_modulus=float(mat.get("young_modulus", 1e5)),
            poisson_ratio=float(mat.get("poisson_ratio", 0.3)),
            density=float(mat.get("density", 1000.0)),
            dt=float(integ.get("dt", 0.01)),
            rayleigh_mass=float(integ.get("rayleigh_mass", 0.0)),
            rayleigh_stiffness=float(integ.get("rayleigh_stiffness", 0.0)),
            gravity=tuple(float(g) for g in gravity),
            solver_mode=mode,
            tolerance=float(solver.get("tolerance", 1e-9)),
            max_iterations=int(solver.get("max_iterations", 2000)),
            precond_enabled=bool(precond.get("enabled", False)),
            leaf_threshold=int(precond.get("leaf_threshold", 64)),
            tile=int(precond.get("tile", 16)),
            policy=policy,
            refactor_every=int(precond.get("refactor_every", 4)),
            contact_enabled=bool(contact.get("enabled", False)),
            plane_z=float(contact.get("plane_z", 0.0)),
            steps=int(run_d.get("steps", 10)),
            seed=int(run_d.get("seed", 0)),
            workers=int(run_d.get("workers", 1)),
            metrics_csv=output.get("metrics_csv"),
            snapshot_every=int(output.get("snapshot_every", 0)),
            snapshot_dir=output.get("snapshot_dir"),
        )
        if cfg.steps < 0:
            raise ConfigError(f"run.steps: must be >= 0, got {cfg.steps}")
        if cfg.workers < 1:
            raise ConfigError(f"run.workers: must be >= 1, got {cfg.workers}")
        return cfg

    def to_dict(self) -> dict:
        return {
            "mesh": {
                "generator": self.mesh.generator,
                "node_file": self.mesh.node_file,
                "ele_file": self.mesh.ele_file,
                "fixed_nodes": list(self.mesh.fixed_nodes),
                "fix_plane": self.mesh.fix_plane,
            },
            "material": {
                "law": self.law,
                "young_modulus": self.young_modulus,
                "poisson_ratio": self.poisson_ratio,
                "density": self.density,
            },
            "integrator": {
                "dt": self.dt,
                "rayleigh_mass": self.rayleigh_mass,
                "rayleigh_stiffness": self.rayleigh_stiffness,
                "gravity": list(self.gravity),
            },
            "solver": {
                "mode": self.solver_mode,
                "tolerance": self.tolerance,
                "max_iterations": self.max_iterations,
            },
            "precond": {
                "enabled": self.precond_enabled,
                "leaf_threshold": self.leaf_threshold,
                "tile": self.tile,
                "policy": self.policy,
                "refactor_every": self.refactor_every,
            },
            "contact": {"enabled": self.contact_enabled, "plane_z": self.plane_z},
            "run": {"steps": self.steps, "seed": self.seed, "workers": self.workers},
            "output": {
                "metrics_csv": self.metrics_csv,
                "snapshot_every": self.snapshot_every,
                "snapshot_dir": self.snapshot_dir,
            },
        }


def load_config(path) -> ScenarioConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path!r} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path!r} is not valid JSON: {exc}") from None
    return ScenarioConfig.from_dict(data)


def build_mesh(cfg: ScenarioConfig) -> Mesh:
    mc = cfg.mesh
    if mc.generator is not None:
        g = mc.generator
        mesh = generate_beam(int(g["nx"]), int(g["ny"]), int(g["nz"]), float(g["spacing"]))
    else:
        mesh = load_tetgen(mc.node_file, mc.ele_file)
    fixed = list(mc.fixed_nodes)
    if mc.fix_plane is not None:
        axis = "xyz".index(mc.fix_plane[0])
        coords = mesh.nodes[:, axis]
        target = coords.min() if mc.fix_plane.endswith("min") else coords.max()
        span = max(coords.max() - coords.min(), 1.0)
        fixed.extend(np.flatnonzero(np.abs(coords - target) <= 1e-9 * span).tolist())
    if fixed:
        mesh = mesh.with_fixed_nodes(np.asarray(sorted(set(fixed)), dtype=np.int64))
    return mesh


@dataclass
class StepMetrics:
    step: int
    assembly_ms: float
    pattern_rebuilt: bool
    solve_ms: float
    cg_iterations: int
    residual: float
    precond_status: str
    staleness: int

    def row(self) -> list[str]:
        return [
            str(self.step),
            f"{self.assembly_ms:.3f}",
            str(int(self.pattern_rebuilt)),
            f"{self.solve_ms:.3f}",
            str(self.cg_iterations),
            f"{self.residual:.17g}",
            self.precond_status,
            str(self.staleness),
        ]


def write_vtk(mesh: Mesh, positions: np.ndarray, path, title: str = "tetsim snapshot"):
    """Legacy ASCII VTK unstructured grid (POINTS + tetra CELLS)."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\n")
        fh.write("ASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.node_count} double\n")
        for x, y, z in positions:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        m = mesh.element_count
        fh.write(f"CELLS {m} {5 * m}\n")
        for conn in mesh.elements:
            fh.write(f"4 {conn[0]} {conn[1]} {conn[2]} {conn[3]}\n")
        fh.write(f"CELL_TYPES {m}\n")
        for _ in range(m):
            fh.write("10\n")


class _FactorPreconditioner:
    """Adapter exposing LDL^T factors through the pcg preconditioner protocol."""

    def __init__(self, factors, workers: int = 1):
        self.factors = factors
        self.workers = workers

    def apply(self, r):
        return self.factors.apply(r, workers=self.workers)


class ScenarioRunner:
    """Builds a scenario from config and advances it step by step."""

    def __init__(self, cfg: ScenarioConfig, workers: int | None = None,
                 force_full_assembly: bool = False, solver_mode: str | None = None,
                 precond_enabled: bool | None = None):
        self.cfg = cfg
        self.workers = workers if workers is not None else cfg.workers
        self.mesh = build_mesh(cfg)
        params = MaterialParams(cfg.young_modulus, cfg.poisson_ratio, cfg.density)
        self.model = make_model(cfg.law, self.mesh, params)
        icfg = IntegratorConfig(
            dt=cfg.dt,
            rayleigh_mass=cfg.rayleigh_mass,
            rayleigh_stiffness=cfg.rayleigh_stiffness,
            gravity=cfg.gravity,
        )
        self.integrator = BackwardEulerIntegrator(self.mesh, self.model, icfg, workers=self.workers)
        self.integrator.assembler.force_rebuild = force_full_assembly
        mode = SolveMode(solver_mode if solver_mode is not None else cfg.solver_mode)
        self.solver_config = SolverConfig(cfg.tolerance, cfg.max_iterations, mode)
        use_precond = cfg.precond_enabled if precond_enabled is None else precond_enabled
        self.precond = None
        if use_precond and mode is SolveMode.PCG_LDLT:
            plan = expand_plan(nested_dissection(vertex_adjacency(self.mesh), cfg.leaf_threshold))
            self.precond = AsyncPreconditioner(
                plan, policy=cfg.policy, refactor_every=cfg.refactor_every, tile=cfg.tile
            )
        self.contact = PlaneContactPipeline(self.integrator, cfg.plane_z) if cfg.contact_enabled else None
        self.state = SimState.rest(self.mesh)
        self.rng = np.random.default_rng(cfg.seed)
        self.step_index = 0

    def solve(self, a, b):
        scfg = self.solver_config
        if scfg.mode is SolveMode.CG:
            return krylov.cg(a, b, scfg, workers=self.workers)
        if scfg.mode is SolveMode.PCG_LDLT and self.precond is not None \
                and self.precond.status is PrecondStatus.READY:
            pre = _FactorPreconditioner(self.precond.factors, self.workers)
            return krylov.pcg(a, b, pre, scfg, workers=self.workers)
        # PCG-Jacobi, and the cold-start fallback before factors are ready.
        return krylov.pcg(a, b, krylov.jacobi_precond(a), scfg, workers=self.workers)

    def run_step(self) -> StepMetrics:
        self.step_index += 1
        # Publish any factorization that finished mid-step, then snapshot the
        # preconditioner state the solver is about to see; the end-of-step
        # update below publishes/submits for the *next* step.
        status = "off"
        staleness = -1
        if self.precond is not None:
            self.precond.poll()
            status = self.precond.status.value
            staleness = self.precond.staleness(self.step_index)
        if self.contact is not None:
            apply_inverse = None
            if self.precond is not None and self.precond.status is PrecondStatus.READY:
                factors = self.precond.factors
                apply_inverse = lambda rhs: factors.apply(rhs, workers=self.workers)  # noqa: E731
            info = self.contact.step(self.state, self.solve, apply_inverse)
            result = info.result
        else:
            result = self.integrator.step(self.state, self.solve)
        if self.precond is not None:
            self.precond.update(result.matrix, self.step_index)
        return StepMetrics(
            step=self.step_index,
            assembly_ms=result.assembly_time * 1e3,
            pattern_rebuilt=result.pattern_rebuilt,
            solve_ms=result.solve_time * 1e3,
            cg_iterations=result.report.iterations,
            residual=result.report.final_residual,
            precond_status=status,
            staleness=staleness,
        )

    def close(self):
        if self.precond is not None:
            self.precond.close()


def _out_path(path_str: str) -> Path:
    base = os.environ.get("TETSIM_OUTPUT_DIR")
    p = Path(path_str)
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def run(config_path, workers: int | None = None, quiet: bool = False) -> int:
    """Execute a scenario; returns the process exit code."""
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        runner = ScenarioRunner(cfg, workers=workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # mesh/model setup failures
        print(f"error in {type(exc).__module__.rsplit('.', 1)[-1]}: {exc}", file=sys.stderr)
        return 1
    try:
        rows = []
        for _ in range(cfg.steps):
            metrics = runner.run_step()
            rows.append(metrics)
            if not quiet:
                print(",".join(metrics.row()))
            if cfg.snapshot_every and runner.step_index % cfg.snapshot_every == 0:
                name = Path(cfg.snapshot_dir or ".") / f"step_{runner.step_index:06d}.vtk"
                write_vtk(runner.mesh, runner.state.positions, _out_path(str(name)),
                          title=f"step {runner.step_index}")
        if cfg.metrics_csv:
            path = _out_path(cfg.metrics_csv)
            with open(path, "w", newline="", encoding="ascii") as fh:
                writer = csv.writer(fh)
                writer.writerow(METRICS_HEADER.split(","))
                for m in rows:
                    writer.writerow(m.row())
        return 0
    except Exception as exc:
        module = type(exc).__module__.rsplit(".", 1)[-1]
        print(f"error in {module}: {exc}", file=sys.stderr)
        return 1
    finally:
        runner.close()


_BENCH_VARIANTS = ("fast", "full", "cg", "pcg", "trisolve")


def _median(xs):
    return statistics.median(xs) if xs else float("nan")


def bench(config_path, variants=None, workers: int | None = None, quiet: bool = False) -> int:
    """Run scenario variants and print median per-step costs and iterations."""
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    variants = list(variants) if variants else ["fast", "full", "cg", "pcg"]
    for v in variants:
        if v not in _BENCH_VARIANTS:
            print(f"config error: unknown bench variant {v!r}; expected {_BENCH_VARIANTS}", file=sys.stderr)
            return 2
    results = {}
    try:
        for variant in variants:
            if variant == "trisolve":
                results[variant] = _bench_trisolve(cfg, workers)
                continue
            kwargs = {}
            if variant == "fast":
                kwargs = dict(force_full_assembly=False)
            elif variant == "full":
                kwargs = dict(force_full_assembly=True)
            elif variant == "cg":
                kwargs = dict(solver_mode="cg", precond_enabled=False)
            elif variant == "pcg":
                kwargs = dict(solver_mode="pcg-ldlt", precond_enabled=True)
            runner = ScenarioRunner(cfg, workers=workers, **kwargs)
            try:
                rows = [runner.run_step() for _ in range(cfg.steps)]
            finally:
                runner.close()
            results[variant] = {
                "assembly_ms": _median([r.assembly_ms for r in rows]),
                "solve_ms": _median([r.solve_ms for r in rows]),
                "iterations": _median([r.cg_iterations for r in rows]),
            }
    except Exception as exc:
        module = type(exc).__module__.rsplit(".", 1)[-1]
        print(f"error in {module}: {exc}", file=sys.stderr)
        return 1
    header = f"{'variant':<10} {'assembly_ms':>12} {'solve_ms':>10} {'iterations':>11}"
    print(header)
    for variant, r in results.items():
        extra = f"  (parallel vs sequential max diff {r['max_diff']:.3e})" if "max_diff" in r else ""
        print(
            f"{variant:<10} {r['assembly_ms']:>12.3f} {r['solve_ms']:>10.3f} "
            f"{r['iterations']:>11.1f}{extra}"
        )
    return 0


def _bench_trisolve(cfg: ScenarioConfig, workers: int | None) -> dict:
    """Factor the end-of-scenario matrix, compare sequential vs parallel solves."""
    runner = ScenarioRunner(cfg, workers=workers, solver_mode="cg", precond_enabled=False)
    try:
        for _ in range(max(cfg.steps, 1)):
            runner.run_step()
        a, _, _ = runner.integrator.assemble_system(runner.state)
        plan = expand_plan(nested_dissection(vertex_adjacency(runner.mesh), cfg.leaf_threshold))
        factors = ndprecond.ldlt_factor(a, plan, tile=cfg.tile)
        rng = np.random.default_rng(cfg.seed)
        r = rng.standard_normal(a.nrows)
        t0 = time.perf_counter()
        z_seq = factors.apply(r, workers=1)
        t_seq = (time.perf_counter() - t0) * 1e3
        w = runner.workers if workers is None else workers
        t0 = time.perf_counter()
        z_par = factors.apply(r, workers=max(w, 2))
        t_par = (time.perf_counter() - t0) * 1e3
        denom = np.abs(z_seq).max()
        max_diff = float(np.abs(z_par - z_seq).max() / (denom if denom else 1.0))
        return {"assembly_ms": t_seq, "solve_ms": t_par, "iterations": 0, "max_diff": max_diff}
    finally:
        runner.close()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tetsim", description="implicit FEM scenario runner")
    parser.add_argument("--workers", type=int, default=None, help="override run.workers")
    parser.add_argument("--quiet", action="store_true", help="suppress per-step output")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a scenario")
    p_run.add_argument("config")
    p_bench = sub.add_parser("bench", help="compare scenario variants")
    p_bench.add_argument("config")
    p_bench.add_argument("--variants", default="fast,full,cg,pcg",
                         help="comma-separated subset of " + ",".join(_BENCH_VARIANTS))
    args = parser.parse_args(argv)

    workers = args.workers
    env_workers = os.environ.get("TETSIM_WORKERS")
    if workers is None and env_workers:
        workers = int(env_workers)

    if args.command == "run":
        return run(args.config, workers=workers, quiet=args.quiet)
    return bench(args.config, variants=args.variants.split(","), workers=workers, quiet=args.quiet)


if __name__ == "__main__":
    sys.exit(main())
