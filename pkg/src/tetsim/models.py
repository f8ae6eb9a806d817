"""Element-level physics for linear tetrahedra.

Sign convention, used everywhere: `f(x, v)` are the internal forces entering
the equation of motion as  M a = f_ext - f(x, v),  and the stiffness matrix
is K = df/dx.  At a stretched configuration f points with the displacement
(restoring when subtracted), so K is positive semidefinite for both laws.

All stiffness contributions leave the module exclusively through the triplet
stream's add interface, in a fixed element-major, row-major-block order, so
the fill sequence only depends on the mesh topology.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import TripletStream
from .mesh import Mesh

__all__ = [
    "MaterialParams",
    "ElementPrecomp",
    "ModelError",
    "precompute",
    "polar_rotations",
    "corotational_forces_and_stiffness",
    "stvk_forces_and_stiffness",
    "lumped_mass",
    "CorotationalModel",
    "StVenantKirchhoffModel",
    "make_model",
]


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class MaterialParams:
    """Isotropic material: Young modulus E (Pa), Poisson ratio, density (kg/m^3)."""

    young_modulus: float
    poisson_ratio: float
    density: float

    def __post_init__(self):
        if not self.young_modulus > 0:
            raise ModelError(f"young_modulus must be positive, got {self.young_modulus}")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise ModelError(f"poisson_ratio must be in [0, 0.5), got {self.poisson_ratio}")
        if not self.density > 0:
            raise ModelError(f"density must be positive, got {self.density}")

    @property
    def lame_lambda(self) -> float:
        e, nu = self.young_modulus, self.poisson_ratio
        return e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))

    @property
    def lame_mu(self) -> float:
        return self.young_modulus / (2.0 * (1.0 + self.poisson_ratio))


@dataclass
class ElementPrecomp:
    """Per-element rest-state data shared by both material laws.

    grads       (m, 4, 3) shape-function gradients at rest
    volume      (m,) rest volumes (positive)
    ke          (m, 12, 12) rest stiffness blocks, used directly by the
                corotational law and as the small-strain limit of the other
    gdof        (m, 12) global DOF index of each local row
    block_rows/block_cols  flattened (m*144,) emission order of a 12x12 block
    """

    elements: np.ndarray
    rest_positions: np.ndarray
    grads: np.ndarray
    volume: np.ndarray
    ke: np.ndarray
    gdof: np.ndarray
    block_rows: np.ndarray
    block_cols: np.ndarray
    lame: tuple[float, float]
    density: float

    @property
    def nelements(self) -> int:
        return len(self.elements)


def _isotropic_stress_matrix(lam: float, mu: float) -> np.ndarray:
    """6x6 stress-strain matrix in engineering (Voigt) notation."""
    c = np.zeros((6, 6))
    c[:3, :3] = lam
    c[np.arange(3), np.arange(3)] += 2.0 * mu
    c[np.arange(3, 6), np.arange(3, 6)] = mu
    return c


def _strain_displacement(grads: np.ndarray) -> np.ndarray:
    """Batched 6x12 strain-displacement matrices from (m, 4, 3) gradients.

    Strain order: exx, eyy, ezz, gxy, gyz, gzx (engineering shear).
    """
    m = len(grads)
    b = np.zeros((m, 6, 12))
    for a in range(4):
        gx, gy, gz = grads[:, a, 0], grads[:, a, 1], grads[:, a, 2]
        c = 3 * a
        b[:, 0, c + 0] = gx
        b[:, 1, c + 1] = gy
        b[:, 2, c + 2] = gz
        b[:, 3, c + 0] = gy
        b[:, 3, c + 1] = gx
        b[:, 4, c + 1] = gz
        b[:, 4, c + 2] = gy
        b[:, 5, c + 0] = gz
        b[:, 5, c + 2] = gx
    return b


def precompute(mesh: Mesh, params: MaterialParams) -> ElementPrecomp:
    """Precompute rest gradients, volumes and rest stiffness for every element.

    The rest stiffness of a linear tetrahedron is K_e = V_e * B^T C B with B
    the strain-displacement matrix and C the isotropic stress-strain matrix;
    one-point quadrature is exact here since B is constant over the element.
    """
    el = mesh.elements
    x0 = mesh.nodes
    p = x0[el]
    dm = np.transpose(p[:, 1:] - p[:, :1], (0, 2, 1))  # (m, 3, 3), edge columns
    det = np.linalg.det(dm)
    if np.any(det <= 0.0):
        bad = int(np.flatnonzero(det <= 0.0)[0])
        raise ModelError(f"element {bad} is inverted or degenerate at rest (det={det[bad]:g})")
    vol = det / 6.0
    dm_inv = np.linalg.inv(dm)
    grads = np.empty((len(el), 4, 3))
    grads[:, 1:] = dm_inv  # row i of dm_inv is the gradient of shape function i+1
    grads[:, 0] = -dm_inv.sum(axis=1)

    b = _strain_displacement(grads)
    c = _isotropic_stress_matrix(params.lame_lambda, params.lame_mu)
    ke = np.einsum("eji,jk,ekl->eil", b, c, b) * vol[:, None, None]
    ke = 0.5 * (ke + np.transpose(ke, (0, 2, 1)))  # exact symmetry

    gdof = (3 * el[:, :, None] + np.arange(3)).reshape(len(el), 12)
    block_rows = np.repeat(gdof, 12, axis=1).ravel()
    block_cols = np.tile(gdof, (1, 12)).ravel()
    return ElementPrecomp(
        elements=el,
        rest_positions=x0,
        grads=grads,
        volume=vol,
        ke=ke,
        gdof=gdof,
        block_rows=block_rows,
        block_cols=block_cols,
        lame=(params.lame_lambda, params.lame_mu),
        density=params.density,
    )


def _deformation_gradients(positions: np.ndarray, precomp: ElementPrecomp) -> np.ndarray:
    xe = positions[precomp.elements]  # (m, 4, 3)
    return np.einsum("eai,eaj->eij", xe, precomp.grads)


def polar_rotations(f: np.ndarray, tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
    """Rotation factors of a batch of 3x3 deformation gradients.

    Newton iteration R <- (R + R^-T)/2, quadratically convergent for
    non-singular input; stops when the largest entry change is below tol.
    """
    if not np.all(np.isfinite(f)):
        raise ModelError("non-finite deformation gradient")
    r = f.copy()
    for _ in range(max_iter):
        r_next = 0.5 * (r + np.transpose(np.linalg.inv(r), (0, 2, 1)))
        delta = np.abs(r_next - r).max()
        r = r_next
        if delta < tol:
            break
    return r


def _scatter_nodal(values_e: np.ndarray, gdof: np.ndarray, ndof: int) -> np.ndarray:
    return np.bincount(gdof.ravel(), weights=values_e.ravel(), minlength=ndof)


def _emit_blocks(stream: TripletStream, precomp: ElementPrecomp, kblocks: np.ndarray):
    stream.add_block(precomp.block_rows, precomp.block_cols, kblocks.reshape(-1))


def corotational_forces_and_stiffness(
    precomp: ElementPrecomp,
    positions: np.ndarray,
    stream: TripletStream | None = None,
    velocities: np.ndarray | None = None,
):
    """Corotational internal forces; emits R K_e R^T stiffness blocks.

    Per element the rotation R comes from the polar decomposition of the
    deformation gradient, the force is R K_e (R^T x - x0) and the tangent is
    approximated by the rotated rest stiffness.

    Returns (f, kv) where f is the (3n,) internal force vector and kv is
    K @ velocities accumulated element-wise (None when velocities is None).
    """
    if not np.all(np.isfinite(positions)):
        raise ModelError("non-finite positions")
    ndof = 3 * len(positions)
    f = _deformation_gradients(positions, precomp)
    r = polar_rotations(f)
    m = precomp.nelements
    rblk = np.zeros((m, 12, 12))
    for a in range(4):
        rblk[:, 3 * a: 3 * a + 3, 3 * a: 3 * a + 3] = r

    xe = positions[precomp.elements].reshape(m, 12)
    x0e = precomp.rest_positions[precomp.elements].reshape(m, 12)
    u_local = np.einsum("eqp,eq->ep", rblk, xe) - x0e  # R^T x - x0
    fe = np.einsum("epq,eq->ep", rblk, np.einsum("epq,eq->ep", precomp.ke, u_local))
    force = _scatter_nodal(fe, precomp.gdof, ndof)

    krot = rblk @ precomp.ke @ np.transpose(rblk, (0, 2, 1))
    kv = None
    if velocities is not None:
        ve = velocities.reshape(-1, 3)[precomp.elements].reshape(m, 12)
        kv = _scatter_nodal(np.einsum("epq,eq->ep", krot, ve), precomp.gdof, ndof)
    if stream is not None:
        _emit_blocks(stream, precomp, krot)
    return force, kv


def stvk_forces_and_stiffness(
    precomp: ElementPrecomp,
    positions: np.ndarray,
    stream: TripletStream | None = None,
    velocities: np.ndarray | None = None,
):
    """St-Venant-Kirchhoff internal forces and exact tangent stiffness.

    With F the deformation gradient, G = (F^T F - I)/2 the Green strain and
    S = lam tr(G) I + 2 mu G the second Piola-Kirchhoff stress, the nodal
    force is V F S g_a per rest gradient g_a.  The emitted tangent contains
    both the material part (lam/mu outer products through F) and the
    geometric part (g_a^T S g_b on the block diagonal of each 3x3 block).
    """
    if not np.all(np.isfinite(positions)):
        raise ModelError("non-finite positions")
    ndof = 3 * len(positions)
    lam, mu = precomp.lame
    g = precomp.grads
    vol = precomp.volume
    f = _deformation_gradients(positions, precomp)
    green = 0.5 * (np.einsum("eki,ekj->eij", f, f) - np.eye(3))
    s = lam * np.trace(green, axis1=1, axis2=2)[:, None, None] * np.eye(3) + 2.0 * mu * green

    fs = f @ s
    fe = vol[:, None, None] * np.einsum("eij,eaj->eai", fs, g)
    force = _scatter_nodal(fe, precomp.gdof, ndof)

    fg = np.einsum("eij,eaj->eai", f, g)  # F g_a
    fft = f @ np.transpose(f, (0, 2, 1))
    gg = np.einsum("eai,ebi->eab", g, g)
    gsg = np.einsum("eai,eij,ebj->eab", g, s, g)
    eye = np.eye(3)
    k = lam * np.einsum("eai,ebk->eaibk", fg, fg)
    k += mu * np.einsum("eak,ebi->eaibk", fg, fg)
    k += mu * np.einsum("eab,eik->eaibk", gg, fft)
    k += np.einsum("eab,ik->eaibk", gsg, eye)
    k *= vol[:, None, None, None, None]
    kblocks = k.reshape(precomp.nelements, 12, 12)

    kv = None
    if velocities is not None:
        ve = velocities.reshape(-1, 3)[precomp.elements].reshape(-1, 12)
        kv = _scatter_nodal(np.einsum("epq,eq->ep", kblocks, ve), precomp.gdof, ndof)
    if stream is not None:
        _emit_blocks(stream, precomp, kblocks)
    return force, kv


def lumped_mass(mesh: Mesh, params: MaterialParams, stream: TripletStream | None = None) -> np.ndarray:
    """Diagonal lumped mass: each tet spreads rho*V/4 to its 4 nodes.

    Emits one diagonal triplet per element DOF (element-major order) when a
    stream is given; returns the (3n,) mass diagonal either way.
    """
    vols = mesh.signed_volumes()
    share = params.density * vols / 4.0
    gdof = (3 * mesh.elements[:, :, None] + np.arange(3)).reshape(-1)
    vals = np.repeat(share, 12)
    if stream is not None:
        stream.add_block(gdof, gdof, vals)
    return np.bincount(gdof, weights=vals, minlength=mesh.ndof)


class CorotationalModel:
    law = "corotational"

    def __init__(self, mesh: Mesh, params: MaterialParams):
        self.mesh = mesh
        self.params = params
        self.precomp = precompute(mesh, params)

    def accumulate(self, positions, stream=None, velocities=None):
        return corotational_forces_and_stiffness(self.precomp, positions, stream, velocities)

    def internal_forces(self, positions) -> np.ndarray:
        return corotational_forces_and_stiffness(self.precomp, positions)[0]


class StVenantKirchhoffModel:
    law = "stvk"

    def __init__(self, mesh: Mesh, params: MaterialParams):
        self.mesh = mesh
        self.params = params
        self.precomp = precompute(mesh, params)

    def accumulate(self, positions, stream=None, velocities=None):
        return stvk_forces_and_stiffness(self.precomp, positions, stream, velocities)

    def internal_forces(self, positions) -> np.ndarray:
        return stvk_forces_and_stiffness(self.precomp, positions)[0]


_MODEL_CLASSES = {
    CorotationalModel.law: CorotationalModel,
    StVenantKirchhoffModel.law: StVenantKirchhoffModel,
}


def make_model(law: str, mesh: Mesh, params: MaterialParams):
    try:
        cls = _MODEL_CLASSES[law]
    except KeyError:
        raise ModelError(f"unknown material law {law!r}; expected one of {sorted(_MODEL_CLASSES)}") from None
    return cls(mesh, params)
