"""Implicit tetrahedral FEM simulation core.

Pipeline: element models emit (row, col, value) triplets in a topology-fixed
order; a reusable compression mapping turns them into CSR without re-sorting;
the implicit system is solved with (preconditioned) conjugate gradient, the
preconditioner being an asynchronously refreshed nested-dissection LDL^T with
level-scheduled parallel triangular solves.  Frictionless plane contact rides
on top via Lagrange multipliers without ever touching the matrix pattern.
"""

from .assembly import (
    CompressionMapping,
    CsrMatrix,
    MatrixAssembler,
    TripletStream,
    build_pattern,
    compress,
    compress_parallel,
    dump_matrixmarket,
)
from .contact import PlaneContactPipeline, projected_gauss_seidel
from .integrator import BackwardEulerIntegrator, IntegratorConfig, SimState
from .krylov import SolveMode, SolverConfig, cg, jacobi_precond, pcg, spmv
from .mesh import Graph, Mesh, generate_beam, load_tetgen, save_tetgen, vertex_adjacency
from .models import (
    CorotationalModel,
    MaterialParams,
    StVenantKirchhoffModel,
    lumped_mass,
    make_model,
    precompute,
)
from .ndprecond import (
    AsyncPreconditioner,
    DissectionPlan,
    LdlFactors,
    expand_plan,
    ldlt_factor,
    nested_dissection,
)

__version__ = "0.1.0"

__all__ = [
    "AsyncPreconditioner",
    "BackwardEulerIntegrator",
    "CompressionMapping",
    "CorotationalModel",
    "CsrMatrix",
    "DissectionPlan",
    "Graph",
    "IntegratorConfig",
    "LdlFactors",
    "MaterialParams",
    "MatrixAssembler",
    "Mesh",
    "PlaneContactPipeline",
    "SimState",
    "SolveMode",
    "SolverConfig",
    "StVenantKirchhoffModel",
    "TripletStream",
    "build_pattern",
    "cg",
    "compress",
    "compress_parallel",
    "dump_matrixmarket",
    "expand_plan",
    "generate_beam",
    "jacobi_precond",
    "ldlt_factor",
    "load_tetgen",
    "lumped_mass",
    "make_model",
    "nested_dissection",
    "pcg",
    "precompute",
    "projected_gauss_seidel",
    "save_tetgen",
    "spmv",
    "vertex_adjacency",
]
