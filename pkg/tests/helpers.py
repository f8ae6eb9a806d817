"""Shared oracles and builders for the test suite.

Everything here is deliberately written as straight textbook code, separate
from the production paths it is used to check.
"""

import numpy as np

from tetsim.assembly import CsrMatrix
from tetsim.mesh import Graph


def csr_from_dense(dense) -> CsrMatrix:
    n, m = dense.shape
    rows, cols = np.nonzero(dense)
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=row_ptr[1:])
    return CsrMatrix(n, m, row_ptr, cols.astype(np.int64), np.asarray(dense)[rows, cols])


def random_spd(rng, n, shift=1.0):
    m = rng.standard_normal((n, n))
    return m @ m.T + shift * np.eye(n)


def graph_from_edges(n, edges) -> Graph:
    pairs = set()
    for a, b in edges:
        if a != b:
            pairs.add((a, b))
            pairs.add((b, a))
    pairs = sorted(pairs)
    src = np.array([p[0] for p in pairs], dtype=np.int64)
    dst = np.array([p[1] for p in pairs], dtype=np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
    return Graph(n=n, indptr=indptr, indices=dst)


def grid_graph(k) -> Graph:
    """2D k-by-k lattice with 4-neighbor connectivity."""
    def nid(i, j):
        return i * k + j

    edges = []
    for i in range(k):
        for j in range(k):
            if i + 1 < k:
                edges.append((nid(i, j), nid(i + 1, j)))
            if j + 1 < k:
                edges.append((nid(i, j), nid(i, j + 1)))
    return graph_from_edges(k * k, edges)


def laplacian_matrix(graph, shift=1.0) -> CsrMatrix:
    """SPD matrix with the graph's sparsity pattern (Laplacian + shift*I)."""
    n = graph.n
    dense = np.zeros((n, n))
    for v in range(n):
        for w in graph.neighbors(v):
            dense[v, w] = -1.0
        dense[v, v] = graph.degree(v) + shift
    return csr_from_dense(dense)


def forward_substitution(l_csr: CsrMatrix, r) -> np.ndarray:
    """Row-sweep solve of (I + L) y = r for strictly lower triangular L."""
    y = np.asarray(r, dtype=np.float64).copy()
    for i in range(l_csr.nrows):
        lo, hi = l_csr.row_ptr[i], l_csr.row_ptr[i + 1]
        if hi > lo:
            y[i] -= l_csr.values[lo:hi] @ y[l_csr.col_ind[lo:hi]]
    return y


def backward_substitution(l_csr: CsrMatrix, w) -> np.ndarray:
    """Column-sweep solve of (I + L)^T z = w for strictly lower triangular L."""
    z = np.asarray(w, dtype=np.float64).copy()
    for j in range(l_csr.nrows - 1, -1, -1):
        lo, hi = l_csr.row_ptr[j], l_csr.row_ptr[j + 1]
        if hi > lo:
            z[l_csr.col_ind[lo:hi]] -= l_csr.values[lo:hi] * z[j]
    return z


def boolean_elimination_fill(pattern_dense, perm) -> int:
    """Strict-lower nonzero count of the Cholesky factor, by boolean elimination."""
    p = np.asarray(pattern_dense, dtype=bool)[np.ix_(perm, perm)].copy()
    n = len(p)
    count = 0
    for k in range(n):
        below = np.flatnonzero(p[k + 1:, k]) + k + 1
        count += len(below)
        if len(below):
            p[np.ix_(below, below)] = True
    return count


def assemble_fe_matrix(mesh, params, law="corotational", dt=0.01):
    """Small helper: one implicit-system assembly at rest."""
    from tetsim.integrator import BackwardEulerIntegrator, IntegratorConfig, SimState
    from tetsim.models import make_model

    model = make_model(law, mesh, params)
    integ = BackwardEulerIntegrator(mesh, model, IntegratorConfig(dt=dt))
    a, b, _ = integ.assemble_system(SimState.rest(mesh))
    return a, b
