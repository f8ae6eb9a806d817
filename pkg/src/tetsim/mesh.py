"""Tetrahedral mesh containers, procedural generators and TetGen file I/O.

The element list order is part of the contract: matrix assembly derives its
deterministic fill order from it, so generators and loaders must produce
bit-identical meshes for identical inputs.  Meshes are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "ElementKind",
    "Mesh",
    "Graph",
    "MeshError",
    "TetgenParseError",
    "generate_beam",
    "load_tetgen",
    "save_tetgen",
    "vertex_adjacency",
]


class MeshError(ValueError):
    """Invalid mesh data (bad indices, degenerate elements, ...)."""


class TetgenParseError(MeshError):
    """Malformed TetGen file; carries file path and 1-based line number."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class ElementKind(enum.Enum):
    TETRA4 = "tetra4"


@dataclass(frozen=True)
class Mesh:
    """Immutable tetrahedral mesh.

    nodes        (n, 3) float64 positions in meters
    elements     (m, 4) int64 node indices; list order defines the fill order
    fixed_nodes  sorted unique node indices pinned by the scenario
    """

    nodes: np.ndarray
    elements: np.ndarray
    element_kind: ElementKind = ElementKind.TETRA4
    fixed_nodes: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        nodes = np.ascontiguousarray(np.asarray(self.nodes, dtype=np.float64))
        elements = np.ascontiguousarray(np.asarray(self.elements, dtype=np.int64))
        fixed = np.asarray(self.fixed_nodes, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 3:
            raise MeshError(f"nodes must be (n, 3), got {nodes.shape}")
        if elements.size and (elements.ndim != 2 or elements.shape[1] != 4):
            raise MeshError(f"elements must be (m, 4), got {elements.shape}")
        elements = elements.reshape(-1, 4)
        if elements.size:
            if elements.min() < 0 or elements.max() >= len(nodes):
                raise MeshError("element index out of range")
        fixed = np.unique(fixed)
        if fixed.size and (fixed[0] < 0 or fixed[-1] >= len(nodes)):
            raise MeshError("fixed node index out of range")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "fixed_nodes", fixed)
        vol = self.signed_volumes()
        if vol.size and np.any(vol == 0.0):
            bad = int(np.flatnonzero(vol == 0.0)[0])
            raise MeshError(f"element {bad} is degenerate (zero rest volume)")
        for a in (self.nodes, self.elements, self.fixed_nodes):
            a.setflags(write=False)

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def element_count(self) -> int:
        return len(self.elements)

    @property
    def ndof(self) -> int:
        """Number of scalar degrees of freedom (3 per node)."""
        return 3 * len(self.nodes)

    def signed_volumes(self) -> np.ndarray:
        """Signed volume of every element (positive for right-handed tets)."""
        if not len(self.elements):
            return np.empty(0)
        p = self.nodes[self.elements]
        edges = p[:, 1:] - p[:, :1]  # (m, 3, 3), rows are p1-p0, p2-p0, p3-p0
        return np.linalg.det(edges) / 6.0

    def with_fixed_nodes(self, fixed_nodes) -> "Mesh":
        """Return a copy of the mesh with a different set of pinned nodes."""
        return replace(self, fixed_nodes=np.asarray(fixed_nodes, dtype=np.int64))

    def fixed_dofs(self) -> np.ndarray:
        """Pinned scalar DOF indices (3 per fixed node, sorted)."""
        return (3 * self.fixed_nodes[:, None] + np.arange(3)).ravel()


@dataclass(frozen=True)
class Graph:
    """Undirected vertex graph in flat adjacency form (sorted neighbor lists)."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        self.indptr.setflags(write=False)
        self.indices.setflags(write=False)

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]: self.indptr[v + 1]]

    def degree(self, v: int) -> int:
        return int(self.indptr[v + 1] - self.indptr[v])


# Axis permutations of the 6-tet subdivision of a hex cell, in a fixed order.
# Every tet contains the cell's main diagonal, so orientation is uniform and
# the split is unique (no 5-tet parity ambiguity between neighbor cells).
_CELL_SPLITS = list(itertools.permutations(range(3)))


def _perm_parity(perm) -> int:
    inversions = sum(1 for a, b in itertools.combinations(perm, 2) if a > b)
    return -1 if inversions % 2 else 1


def generate_beam(nx: int, ny: int, nz: int, spacing: float) -> Mesh:
    """Generate a regular beam of (nx * ny * nz) nodes on a cubic grid.

    Each of the (nx-1)(ny-1)(nz-1) cells is split into 6 tetrahedra sharing
    the cell's main diagonal.  Node and element ordering is deterministic:
    node id = i + nx*(j + ny*k), cells traversed k-major, splits in a fixed
    axis-permutation order.
    """
    if nx < 2 or ny < 2 or nz < 2:
        raise MeshError(f"beam dimensions must be >= 2, got ({nx}, {ny}, {nz})")
    if not spacing > 0.0:
        raise MeshError(f"spacing must be positive, got {spacing}")

    k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    nodes = spacing * np.stack([i, j, k], axis=-1).reshape(-1, 3).astype(np.float64)

    def nid(ii, jj, kk):
        return ii + nx * (jj + ny * kk)

    elements = []
    for ck in range(nz - 1):
        for cj in range(ny - 1):
            for ci in range(nx - 1):
                corner = np.array([ci, cj, ck])
                for perm in _CELL_SPLITS:
                    path = [corner.copy()]
                    for axis in perm:
                        nxt = path[-1].copy()
                        nxt[axis] += 1
                        path.append(nxt)
                    ids = [nid(*p) for p in path]
                    if _perm_parity(perm) < 0:
                        ids[1], ids[2] = ids[2], ids[1]
                    elements.append(ids)
    return Mesh(nodes=nodes, elements=np.asarray(elements, dtype=np.int64))


def _data_lines(path):
    """Yield (lineno, tokens) for non-empty, non-comment lines."""
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def load_tetgen(node_path, ele_path) -> Mesh:
    """Load a mesh from a TetGen ASCII `.node`/`.ele` file pair.

    Comment lines starting with `#` are ignored, as are attribute and
    boundary-marker columns.  1-based files (first listed index is 1) are
    converted to 0-based.
    """
    node_path, ele_path = Path(node_path), Path(ele_path)

    lines = _data_lines(node_path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise TetgenParseError(node_path, 1, "missing header line") from None
    if len(header) < 2:
        raise TetgenParseError(node_path, lineno, "node header needs at least <count> <dim>")
    try:
        n_nodes, dim = int(header[0]), int(header[1])
    except ValueError:
        raise TetgenParseError(node_path, lineno, f"bad node header {header!r}") from None
    if dim != 3:
        raise TetgenParseError(node_path, lineno, f"only 3D meshes supported, got dim={dim}")

    coords = np.empty((n_nodes, 3))
    node_base = None
    for row in range(n_nodes):
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise TetgenParseError(node_path, lineno, f"expected {n_nodes} nodes, file ended after {row}") from None
        if len(tok) < 4:
            raise TetgenParseError(node_path, lineno, f"node line needs index and 3 coordinates, got {tok!r}")
        try:
            idx = int(tok[0])
            xyz = [float(t) for t in tok[1:4]]
        except ValueError:
            raise TetgenParseError(node_path, lineno, f"bad node line {tok!r}") from None
        if node_base is None:
            if idx not in (0, 1):
                raise TetgenParseError(node_path, lineno, f"first node index must be 0 or 1, got {idx}")
            node_base = idx
        if idx != row + node_base:
            raise TetgenParseError(node_path, lineno, f"non-consecutive node index {idx}")
        coords[row] = xyz

    lines = _data_lines(ele_path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise TetgenParseError(ele_path, 1, "missing header line") from None
    try:
        n_ele = int(header[0])
        nodes_per = int(header[1]) if len(header) > 1 else 4
    except ValueError:
        raise TetgenParseError(ele_path, lineno, f"bad element header {header!r}") from None
    if nodes_per != 4:
        raise TetgenParseError(ele_path, lineno, f"only 4-node tetrahedra supported, got {nodes_per}")

    elements = np.empty((n_ele, 4), dtype=np.int64)
    ele_base = None
    for row in range(n_ele):
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise TetgenParseError(ele_path, lineno, f"expected {n_ele} elements, file ended after {row}") from None
        if len(tok) < 5:
            raise TetgenParseError(ele_path, lineno, f"element line needs index and 4 node ids, got {tok!r}")
        try:
            idx = int(tok[0])
            conn = [int(t) for t in tok[1:5]]
        except ValueError:
            raise TetgenParseError(ele_path, lineno, f"bad element line {tok!r}") from None
        if ele_base is None:
            if idx not in (0, 1):
                raise TetgenParseError(ele_path, lineno, f"first element index must be 0 or 1, got {idx}")
            ele_base = idx
        if idx != row + ele_base:
            raise TetgenParseError(ele_path, lineno, f"non-consecutive element index {idx}")
        elements[row] = conn

    base = 1 if node_base == 1 else 0
    elements -= base
    if n_ele and (elements.min() < 0 or elements.max() >= n_nodes):
        bad = int(np.flatnonzero((elements < 0) | (elements >= n_nodes)).ravel()[0] // 4)
        raise TetgenParseError(ele_path, 0, f"element {bad} references a node out of range")
    return Mesh(nodes=coords, elements=elements)


def save_tetgen(mesh: Mesh, node_path, ele_path) -> None:
    """Write a mesh as 0-based TetGen ASCII files (round-trips load_tetgen)."""
    with open(node_path, "w", encoding="ascii") as fh:
        fh.write(f"{mesh.node_count} 3 0 0\n")
        for i, (x, y, z) in enumerate(mesh.nodes):
            fh.write(f"{i} {x:.17g} {y:.17g} {z:.17g}\n")
    with open(ele_path, "w", encoding="ascii") as fh:
        fh.write(f"{mesh.element_count} 4 0\n")
        for i, conn in enumerate(mesh.elements):
            fh.write(f"{i} {conn[0]} {conn[1]} {conn[2]} {conn[3]}\n")


def vertex_adjacency(mesh: Mesh) -> Graph:
    """Vertex graph of the mesh: edge (i, j) iff i and j share an element.

    No self loops; neighbor lists sorted ascending.  This is the input graph
    for the fill-reducing ordering of the factorization.
    """
    n = mesh.node_count
    el = mesh.elements
    if not len(el):
        return Graph(n=n, indptr=np.zeros(n + 1, dtype=np.int64), indices=np.empty(0, dtype=np.int64))
    pairs = []
    for a in range(4):
        for b in range(4):
            if a != b:
                pairs.append(np.stack([el[:, a], el[:, b]], axis=1))
    pairs = np.concatenate(pairs)
    codes = np.unique(pairs[:, 0] * n + pairs[:, 1])
    src = codes // n
    dst = codes % n
    counts = np.bincount(src, minlength=n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return Graph(n=n, indptr=indptr, indices=dst.astype(np.int64))
