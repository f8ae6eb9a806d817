"""Nested-dissection LDL^T preconditioner with level-scheduled triangular solves.

The vertex graph is bisected recursively: a BFS level-set cut from a
pseudo-peripheral vertex gives an edge cut, a greedy vertex cover of the cut
forms the separator, and the halves are ordered before the separator.  The
permuted matrix then decomposes into independent diagonal blocks coupled only
through their ancestor separators, which yields:

- a supernodal factorization working on dense per-block panels, and
- a level schedule for the triangular solves: blocks in one level never
  couple, so they run concurrently between barriers.  The lower solve is
  column-major (each block pre-accumulates its contribution into ancestor
  rows inside its own task), the upper solve row-major (each block gathers
  from already-solved ancestors).  Within a block, rows are processed in
  dense tiles of `tile` (default 16) with a fixed reduction order.

The preconditioner lifecycle is asynchronous: factorization of a value
snapshot runs on a dedicated worker thread and finished factors are swapped
in between simulation steps, so the simulation thread never blocks on it.
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._threads import worker_pool
from .assembly import CsrMatrix
from .mesh import Graph

__all__ = [
    "PrecondError",
    "IndefiniteMatrixError",
    "LifecycleError",
    "Block",
    "DissectionPlan",
    "LdlFactors",
    "PrecondStatus",
    "AsyncPreconditioner",
    "nested_dissection",
    "expand_plan",
    "graph_from_pattern",
    "count_coupling_violations",
    "ldlt_factor",
    "solve_lower",
    "solve_upper",
    "apply",
]

logger = logging.getLogger(__name__)


class PrecondError(ValueError):
    pass


class IndefiniteMatrixError(PrecondError):
    """Zero or negative pivot: the assembled system is not positive definite."""


class LifecycleError(PrecondError):
    """Preconditioner applied before factors are ready."""


@dataclass(frozen=True)
class Block:
    """One node of the dissection tree, owning a contiguous permuted range.

    [tree_start, stop) spans the block together with all its descendants.
    """

    start: int
    stop: int
    tree_start: int
    kind: str  # 'leaf' or 'separator'
    children: tuple[int, ...]
    level: int = 0

    @property
    def size(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class DissectionPlan:
    """Permutation plus block tree and level schedule of a nested dissection."""

    n: int
    perm: np.ndarray   # perm[k] = original index eliminated at position k
    iperm: np.ndarray  # iperm[orig] = permuted position
    blocks: tuple[Block, ...]
    levels: tuple[tuple[int, ...], ...]  # block ids per schedule level
    leaf_threshold: int

    def block_of_index(self) -> np.ndarray:
        """Owning block id for every permuted index."""
        owner = np.empty(self.n, dtype=np.int64)
        for bid, blk in enumerate(self.blocks):
            owner[blk.start: blk.stop] = bid
        return owner


def _bfs_distances(graph: Graph, source: int, in_sub: np.ndarray) -> np.ndarray:
    dist = np.full(graph.n, -1, dtype=np.int64)
    dist[source] = 0
    frontier = [source]
    d = 0
    while frontier:
        d += 1
        nxt = []
        for v in frontier:
            for w in graph.neighbors(v):
                if in_sub[w] and dist[w] < 0:
                    dist[w] = d
                    nxt.append(int(w))
        frontier = nxt
    return dist


def _pseudo_peripheral(graph: Graph, sub: np.ndarray, in_sub: np.ndarray):
    """Vertex of (locally) maximal eccentricity and its BFS distances."""
    u = int(sub[0])
    dist = _bfs_distances(graph, u, in_sub)
    ecc = int(dist[sub].max())
    for _ in range(10):
        far = sub[dist[sub] == ecc]
        v = int(far.min())
        dist_v = _bfs_distances(graph, v, in_sub)
        ecc_v = int(dist_v[sub].max())
        if ecc_v > ecc:
            u, dist, ecc = v, dist_v, ecc_v
        else:
            break
    return u, dist


def _components(graph: Graph, sub: np.ndarray) -> list[np.ndarray]:
    in_sub = np.zeros(graph.n, dtype=bool)
    in_sub[sub] = True
    seen = np.zeros(graph.n, dtype=bool)
    comps = []
    for s in sub:
        if seen[s]:
            continue
        dist = _bfs_distances(graph, int(s), in_sub)
        comp = sub[dist[sub] >= 0]
        seen[comp] = True
        in_sub[comp] = False
        comps.append(comp)
    return comps


def _greedy_cover(ea: np.ndarray, eb: np.ndarray, n: int) -> np.ndarray:
    """Greedy vertex cover of the cut edges; ties go to the lowest index.

    Capped by the smaller touched side of the cut, which is itself a valid
    cover, so separator size never exceeds one boundary layer.
    """
    touched_a = np.unique(ea)
    touched_b = np.unique(eb)
    cover = []
    ra, rb = ea, eb
    while len(ra):
        cnt = np.bincount(ra, minlength=n) + np.bincount(rb, minlength=n)
        v = int(np.argmax(cnt))
        cover.append(v)
        keep = (ra != v) & (rb != v)
        ra, rb = ra[keep], rb[keep]
    cover = np.array(sorted(cover), dtype=np.int64)
    fallback = touched_a if len(touched_a) <= len(touched_b) else touched_b
    if len(cover) > len(fallback):
        cover = fallback
    return cover


def _dissect(graph, sub, base, threshold, blocks, esrc, edst):
    """Recursive bisection; returns (ordered vertices, root block ids)."""
    if len(sub) <= threshold:
        order = np.sort(sub)
        blocks.append(Block(base, base + len(sub), base, "leaf", ()))
        return order, [len(blocks) - 1]

    comps = _components(graph, sub)
    if len(comps) > 1:
        orders, roots = [], []
        off = base
        for comp in comps:
            o, r = _dissect(graph, comp, off, threshold, blocks, esrc, edst)
            orders.append(o)
            roots.extend(r)
            off += len(comp)
        return np.concatenate(orders), roots

    in_sub = np.zeros(graph.n, dtype=bool)
    in_sub[sub] = True
    _, dist = _pseudo_peripheral(graph, sub, in_sub)
    # Smallest BFS-level prefix holding at least half the vertices.
    levels, counts = np.unique(dist[sub], return_counts=True)
    cum = np.cumsum(counts)
    ell = levels[int(np.searchsorted(cum, len(sub) / 2.0))]
    in_a = in_sub & (dist <= ell) & (dist >= 0)

    cut = in_a[esrc] & in_sub[edst] & ~in_a[edst]
    sep = _greedy_cover(esrc[cut], edst[cut], graph.n)
    if len(sep) == 0 or len(sep) == len(sub):
        # No usable split (should not happen on connected graphs above the
        # threshold); fall back to a single leaf.
        order = np.sort(sub)
        blocks.append(Block(base, base + len(sub), base, "leaf", ()))
        return order, [len(blocks) - 1]

    in_sep = np.zeros(graph.n, dtype=bool)
    in_sep[sep] = True
    half_a = sub[in_a[sub] & ~in_sep[sub]]
    half_b = sub[~in_a[sub] & ~in_sep[sub]]

    orders, roots = [], []
    off = base
    for half in (half_a, half_b):
        if len(half):
            o, r = _dissect(graph, half, off, threshold, blocks, esrc, edst)
            orders.append(o)
            roots.extend(r)
            off += len(half)
    orders.append(np.sort(sep))
    blocks.append(Block(off, off + len(sep), base, "separator", tuple(roots)))
    return np.concatenate(orders), [len(blocks) - 1]


def nested_dissection(graph: Graph, leaf_threshold: int = 64) -> DissectionPlan:
    """Recursive graph bisection producing permutation, block tree and schedule.

    Halves of a split are ordered first (each recursed), the separator last;
    leaves are ordered by original vertex index.  Connected components are
    handled independently.
    """
    if leaf_threshold < 1:
        raise PrecondError(f"leaf_threshold must be >= 1, got {leaf_threshold}")
    n = graph.n
    blocks: list[Block] = []
    if n == 0:
        return DissectionPlan(0, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), (), (), leaf_threshold)

    esrc = np.repeat(np.arange(n), np.diff(graph.indptr))
    edst = graph.indices
    order, _ = _dissect(graph, np.arange(n, dtype=np.int64), 0, leaf_threshold, blocks, esrc, edst)

    perm = np.asarray(order, dtype=np.int64)
    iperm = np.empty(n, dtype=np.int64)
    iperm[perm] = np.arange(n)

    leveled = []
    level_of = {}
    for bid, blk in enumerate(blocks):
        lvl = 0 if not blk.children else 1 + max(level_of[c] for c in blk.children)
        level_of[bid] = lvl
        leveled.append(Block(blk.start, blk.stop, blk.tree_start, blk.kind, blk.children, lvl))
    nlevels = 1 + max(level_of.values())
    groups = [[] for _ in range(nlevels)]
    for bid, blk in enumerate(leveled):
        groups[blk.level].append(bid)
    levels = tuple(tuple(sorted(g, key=lambda b: leveled[b].start)) for g in groups)
    return DissectionPlan(n, perm, iperm, tuple(leveled), levels, leaf_threshold)


def expand_plan(plan: DissectionPlan, dofs_per_vertex: int = 3) -> DissectionPlan:
    """Expand a vertex-space plan to DOF space (k consecutive DOFs per vertex)."""
    k = dofs_per_vertex
    perm = (k * plan.perm[:, None] + np.arange(k)).ravel()
    iperm = np.empty(k * plan.n, dtype=np.int64)
    iperm[perm] = np.arange(k * plan.n)
    blocks = tuple(
        Block(k * b.start, k * b.stop, k * b.tree_start, b.kind, b.children, b.level) for b in plan.blocks
    )
    return DissectionPlan(k * plan.n, perm, iperm, blocks, plan.levels, plan.leaf_threshold)


def graph_from_pattern(a: CsrMatrix) -> Graph:
    """Adjacency graph of a symmetric sparsity pattern (diagonal dropped)."""
    row_of = np.repeat(np.arange(a.nrows), np.diff(a.row_ptr))
    off = row_of != a.col_ind
    codes = np.unique(
        np.concatenate([row_of[off] * a.nrows + a.col_ind[off], a.col_ind[off] * a.nrows + row_of[off]])
    )
    src, dst = codes // a.nrows, codes % a.nrows
    indptr = np.zeros(a.nrows + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=a.nrows), out=indptr[1:])
    return Graph(n=a.nrows, indptr=indptr, indices=dst.astype(np.int64))


def count_coupling_violations(a: CsrMatrix, plan: DissectionPlan) -> int:
    """Number of pattern entries coupling blocks that are not on one root path.

    Zero means sibling diagonal blocks are fully independent in the permuted
    pattern, which is what the level schedule relies on.
    """
    owner = plan.block_of_index()
    tree_start = np.array([b.tree_start for b in plan.blocks])
    stop = np.array([b.stop for b in plan.blocks])
    row_of = np.repeat(np.arange(a.nrows), np.diff(a.row_ptr))
    pi = plan.iperm[row_of]
    pj = plan.iperm[a.col_ind]
    bi, bj = owner[pi], owner[pj]
    legal = ((tree_start[bi] <= pj) & (pj < stop[bi])) | ((tree_start[bj] <= pi) & (pi < stop[bj]))
    return int(np.count_nonzero(~legal))


# ---------------------------------------------------------------------------
# Factorization
# ---------------------------------------------------------------------------


@dataclass
class _InitPlan:
    ds_src: np.ndarray
    ds_dst: np.ndarray
    panel_src: np.ndarray
    panel_dst: np.ndarray


@dataclass
class _UpdatePlan:
    target: int           # block id receiving the update
    diagonal: bool        # True: into DS[target], False: into PANEL[target]
    sel_rows: np.ndarray  # positions in this block's couple set
    sel_cols: np.ndarray
    dst_rows: np.ndarray  # rows in the target dense array
    dst_cols: np.ndarray


@dataclass
class LdlSymbolic:
    """Pattern-dependent factorization data, reusable across value updates."""

    n: int
    tile: int
    entry_order: np.ndarray
    p_row_ptr: np.ndarray
    p_col_ind: np.ndarray
    block_order: list[int]
    couple: dict[int, np.ndarray]
    init_plans: dict[int, _InitPlan]
    update_plans: dict[int, list[_UpdatePlan]]
    pattern_key: tuple


def _pattern_key(a: CsrMatrix) -> tuple:
    return (id(a.row_ptr), id(a.col_ind), a.nnz)


def _build_symbolic(a: CsrMatrix, plan: DissectionPlan, tile: int) -> LdlSymbolic:
    n = a.nrows
    row_of = np.repeat(np.arange(n), np.diff(a.row_ptr))
    pi = plan.iperm[row_of]
    pj = plan.iperm[a.col_ind]
    entry_order = np.lexsort((pj, pi))
    p_col = pj[entry_order]
    p_row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(pi, minlength=n), out=p_row_ptr[1:])

    owner = plan.block_of_index()
    order = sorted(range(len(plan.blocks)), key=lambda b: plan.blocks[b].start)
    couple: dict[int, np.ndarray] = {}
    init_plans: dict[int, _InitPlan] = {}
    update_plans: dict[int, list[_UpdatePlan]] = {}

    # Pass 1: per-block entry splits and coupling sets.  A block's rows hold
    # both the dense diagonal part and, because the pattern is symmetric, the
    # couplings into ancestor separators; fill propagates up through the
    # children's coupling sets.
    splits: dict[int, tuple] = {}
    for bid in order:
        blk = plan.blocks[bid]
        s, e = blk.start, blk.stop
        m = e - s
        lo, hi = p_row_ptr[s], p_row_ptr[e]
        cols = p_col[lo:hi]
        local_row = np.repeat(np.arange(m), np.diff(p_row_ptr[s: e + 1]))
        in_block = (cols >= s) & (cols < e)
        right = cols >= e
        ds_src = lo + np.flatnonzero(in_block)
        ds_dst = local_row[in_block] * m + (cols[in_block] - s)
        right_src = lo + np.flatnonzero(right)
        right_col = cols[right]
        right_local = local_row[right]
        pieces = [right_col] + [couple[c][couple[c] >= e] for c in blk.children]
        couple[bid] = np.unique(np.concatenate(pieces))
        splits[bid] = (ds_src, ds_dst, right_src, right_col, right_local)

    # Pass 2: initialization scatter plans and Schur-update routing (the
    # latter needs the coupling sets of the ancestor blocks, all known now).
    for bid in order:
        blk = plan.blocks[bid]
        m = blk.size
        cb = couple[bid]
        ds_src, ds_dst, right_src, right_col, right_local = splits[bid]
        panel_rows = np.searchsorted(cb, right_col)
        init_plans[bid] = _InitPlan(
            ds_src=ds_src,
            ds_dst=ds_dst,
            panel_src=right_src,
            panel_dst=panel_rows * m + right_local,
        )

        plans: list[_UpdatePlan] = []
        if len(cb):
            owners = owner[cb]
            gids = np.unique(owners)
            for jj, gj in enumerate(gids):
                sel_j = np.flatnonzero(owners == gj)
                tgt = plan.blocks[int(gj)]
                plans.append(
                    _UpdatePlan(
                        target=int(gj),
                        diagonal=True,
                        sel_rows=sel_j,
                        sel_cols=sel_j,
                        dst_rows=cb[sel_j] - tgt.start,
                        dst_cols=cb[sel_j] - tgt.start,
                    )
                )
                for gi in gids[jj + 1:]:
                    sel_i = np.flatnonzero(owners == gi)
                    target_couple = couple[int(gj)]
                    pos = np.searchsorted(target_couple, cb[sel_i])
                    if np.any(pos >= len(target_couple)) or np.any(target_couple[pos] != cb[sel_i]):
                        raise PrecondError("symbolic coupling sets are inconsistent")
                    plans.append(
                        _UpdatePlan(
                            target=int(gj),
                            diagonal=False,
                            sel_rows=sel_i,
                            sel_cols=sel_j,
                            dst_rows=pos,
                            dst_cols=cb[sel_j] - tgt.start,
                        )
                    )
        update_plans[bid] = plans

    return LdlSymbolic(
        n=n,
        tile=tile,
        entry_order=entry_order,
        p_row_ptr=p_row_ptr,
        p_col_ind=p_col,
        block_order=order,
        couple=couple,
        init_plans=init_plans,
        update_plans=update_plans,
        pattern_key=_pattern_key(a),
    )


@dataclass
class _BlockFactor:
    start: int
    stop: int
    level: int
    anc: np.ndarray        # permuted row indices below the block (its couple)
    l11: np.ndarray        # dense unit-lower in-block factor
    l21: np.ndarray        # dense coupling panel (len(anc) x m)
    tile: int
    tile_inv: list[np.ndarray]  # inverses of the unit-lower diagonal tiles


@dataclass
class LdlFactors:
    """LDL^T factors in nested-dissection order, plus the solve schedule.

    The block panels drive the level-scheduled solvers; `l_matrix` (strict
    lower triangle of L in CSR, unit diagonal implicit) is materialized
    lazily since only diagnostics and cross-checks need it.
    """

    d: np.ndarray
    plan: DissectionPlan
    source_step: int
    blocks: list[_BlockFactor]
    levels: list[list[_BlockFactor]]
    symbolic: LdlSymbolic = field(repr=False, default=None)
    _l_matrix: CsrMatrix | None = field(repr=False, default=None)

    @property
    def l_matrix(self) -> CsrMatrix:
        if self._l_matrix is None:
            self._l_matrix = _blocks_to_csr(self.plan.n, self.blocks)
        return self._l_matrix

    @property
    def fill_in(self) -> int:
        return self.l_matrix.nnz

    def apply(self, r: np.ndarray, workers: int = 1) -> np.ndarray:
        return apply(self, r, workers=workers)


def ldlt_factor(
    a: CsrMatrix,
    plan: DissectionPlan,
    tile: int = 16,
    symbolic: LdlSymbolic | None = None,
    source_step: int = 0,
) -> LdlFactors:
    """Complete sparse LDL^T of a symmetric positive definite matrix.

    The matrix is permuted by the plan and factored block by block: dense
    Cholesky of the diagonal block, a triangular solve for the coupling
    panel, and a dense Schur update routed into ancestor blocks.  The
    symbolic structure can be reused across factorizations of matrices with
    the same pattern.
    """
    if a.nrows != a.ncols or a.nrows != plan.n:
        raise PrecondError(f"matrix is {a.nrows}x{a.ncols} but the plan covers {plan.n} indices")
    if tile < 1:
        raise PrecondError(f"tile must be >= 1, got {tile}")
    if symbolic is None or symbolic.pattern_key != _pattern_key(a) or symbolic.tile != tile:
        symbolic = _build_symbolic(a, plan, tile)
    n = a.nrows
    values_p = a.values[symbolic.entry_order]

    ds: dict[int, np.ndarray] = {}
    panel: dict[int, np.ndarray] = {}
    for bid in symbolic.block_order:
        blk = plan.blocks[bid]
        m = blk.size
        na = len(symbolic.couple[bid])
        ip = symbolic.init_plans[bid]
        dsb = np.zeros(m * m)
        dsb[ip.ds_dst] = values_p[ip.ds_src]
        ds[bid] = dsb.reshape(m, m)
        pb = np.zeros(na * m)
        pb[ip.panel_dst] = values_p[ip.panel_src]
        panel[bid] = pb.reshape(na, m)

    d_out = np.empty(n)
    bfactors: dict[int, _BlockFactor] = {}
    for bid in symbolic.block_order:
        blk = plan.blocks[bid]
        s, e, m = blk.start, blk.stop, blk.size
        try:
            c = np.linalg.cholesky(ds[bid])
        except np.linalg.LinAlgError as exc:
            raise IndefiniteMatrixError(
                f"non-positive pivot while factoring block [{s}, {e}): {exc}"
            ) from None
        dvec = np.diagonal(c).copy()
        d_out[s:e] = dvec * dvec
        l11 = c / dvec[None, :]
        cb = symbolic.couple[bid]
        if len(cb):
            ls = np.linalg.solve(c, panel[bid].T).T
            l21 = ls / dvec[None, :]
            u = ls @ ls.T
            for up in symbolic.update_plans[bid]:
                tgt = ds[up.target] if up.diagonal else panel[up.target]
                tgt[np.ix_(up.dst_rows, up.dst_cols)] -= u[np.ix_(up.sel_rows, up.sel_cols)]
        else:
            l21 = np.empty((0, m))
        bfactors[bid] = _BlockFactor(s, e, blk.level, cb, l11, l21, tile, _tile_inverses(l11, tile))
        ds[bid] = None  # release the working storage
        panel[bid] = None

    blocks_sorted = [bfactors[bid] for bid in symbolic.block_order]
    nlev = 1 + max(bf.level for bf in blocks_sorted)
    levels = [[] for _ in range(nlev)]
    for bf in blocks_sorted:
        levels[bf.level].append(bf)
    return LdlFactors(d_out, plan, source_step, blocks_sorted, levels, symbolic)


def _tile_inverses(l11: np.ndarray, tile: int) -> list[np.ndarray]:
    """Inverses of the unit-lower diagonal tiles, batched into one LAPACK call."""
    m = len(l11)
    full, rest = divmod(m, tile)
    out = []
    if full:
        stacked = np.empty((full, tile, tile))
        for i in range(full):
            stacked[i] = l11[i * tile: (i + 1) * tile, i * tile: (i + 1) * tile]
        out.extend(np.linalg.inv(stacked))
    if rest:
        out.append(np.linalg.inv(l11[full * tile:, full * tile:]))
    return out


def _blocks_to_csr(n, blocks) -> CsrMatrix:
    """Materialize the strict lower triangle of L row-major (exact zeros dropped)."""
    rows, cols, vals = [], [], []
    for bf in blocks:
        m = bf.stop - bf.start
        ir, ic = np.tril_indices(m, -1)
        v = bf.l11[ir, ic]
        keep = v != 0.0
        rows.append(bf.start + ir[keep])
        cols.append(bf.start + ic[keep])
        vals.append(v[keep])
        if len(bf.anc):
            pr = np.repeat(bf.anc, m)
            pc = np.tile(np.arange(bf.start, bf.stop), len(bf.anc))
            pv = bf.l21.ravel()
            keep = pv != 0.0
            rows.append(pr[keep])
            cols.append(pc[keep])
            vals.append(pv[keep])
    rows = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    cols = np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)
    vals = np.concatenate(vals) if vals else np.empty(0)
    order = np.lexsort((cols, rows))
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=row_ptr[1:])
    return CsrMatrix(n, n, row_ptr, cols[order], vals[order])


# ---------------------------------------------------------------------------
# Level-scheduled triangular solves
# ---------------------------------------------------------------------------


def _forward_block(bf: _BlockFactor, seg: np.ndarray):
    """Solve the in-block unit-lower system tile by tile (column-major push)."""
    m = len(seg)
    t = bf.tile
    for it, t0 in enumerate(range(0, m, t)):
        t1 = min(t0 + t, m)
        seg[t0:t1] = bf.tile_inv[it] @ seg[t0:t1]
        if t1 < m:
            seg[t1:] -= bf.l11[t1:, t0:t1] @ seg[t0:t1]


def _backward_block(bf: _BlockFactor, seg: np.ndarray):
    """Solve the in-block unit-upper system L11^T z = seg (row-major pull)."""
    m = len(seg)
    t = bf.tile
    ntiles = (m + t - 1) // t
    for it in range(ntiles - 1, -1, -1):
        t0 = it * t
        t1 = min(t0 + t, m)
        if t1 < m:
            seg[t0:t1] -= bf.l11[t1:, t0:t1].T @ seg[t1:]
        seg[t0:t1] = bf.tile_inv[it].T @ seg[t0:t1]


def solve_lower(factors: LdlFactors, r: np.ndarray, workers: int = 1) -> np.ndarray:
    """Solve L y = r (permuted order) with the column-major level schedule.

    Blocks within a level run concurrently; each block solves its rows and
    pre-accumulates its contribution into ancestor entries.  Contributions
    are applied in block order at the level barrier, so the result is
    identical for any worker count.
    """
    y = np.array(r, dtype=np.float64, copy=True)

    def task(bf: _BlockFactor):
        seg = y[bf.start: bf.stop]
        _forward_block(bf, seg)
        return bf.l21 @ seg if len(bf.anc) else None

    pool = worker_pool(workers) if workers > 1 else None
    for level in factors.levels:
        if pool is not None and len(level) > 1:
            contribs = list(pool.map(task, level))
        else:
            contribs = [task(bf) for bf in level]
        for bf, contrib in zip(level, contribs):
            if contrib is not None:
                y[bf.anc] -= contrib
    return y


def solve_upper(factors: LdlFactors, w: np.ndarray, workers: int = 1) -> np.ndarray:
    """Solve L^T z = w, traversing levels separator-first (row-major gathers)."""
    z = np.array(w, dtype=np.float64, copy=True)

    def task(bf: _BlockFactor):
        seg = z[bf.start: bf.stop]
        if len(bf.anc):
            seg -= bf.l21.T @ z[bf.anc]
        _backward_block(bf, seg)

    pool = worker_pool(workers) if workers > 1 else None
    for level in reversed(factors.levels):
        if pool is not None and len(level) > 1:
            list(pool.map(task, level))
        else:
            for bf in level:
                task(bf)
    return z


def apply(factors: LdlFactors, r: np.ndarray, workers: int = 1) -> np.ndarray:
    """z = (L D L^T)^-1 r in original index order."""
    rp = np.asarray(r, dtype=np.float64)[factors.plan.perm]
    y = solve_lower(factors, rp, workers=workers)
    y /= factors.d
    z = solve_upper(factors, y, workers=workers)
    return z[factors.plan.iperm]


# ---------------------------------------------------------------------------
# Asynchronous lifecycle
# ---------------------------------------------------------------------------


class PrecondStatus(enum.Enum):
    EMPTY = "empty"
    FACTORIZING = "factorizing"
    READY = "ready"


class AsyncPreconditioner:
    """Background-factored LDL^T preconditioner.

    `update(a, step)` is called once per simulation step: it publishes a
    finished factorization if one is pending and, depending on the refactor
    policy ('on-completion' or 'every-k'), submits a snapshot of the current
    matrix values to the worker thread.  The caller is never blocked; until
    factors are ready the solver is expected to fall back to a cheaper
    preconditioner.  A factorization failure disables the preconditioner for
    the rest of the run (logged).
    """

    def __init__(self, plan: DissectionPlan, policy: str = "on-completion",
                 refactor_every: int = 4, tile: int = 16):
        if policy not in ("on-completion", "every-k"):
            raise PrecondError(f"unknown refactor policy {policy!r}")
        self.plan = plan
        self.policy = policy
        self.refactor_every = refactor_every
        self.tile = tile
        self.factors: LdlFactors | None = None
        self.disabled = False
        self._pool: ThreadPoolExecutor | None = None
        self._future: Future | None = None
        self._symbolic: LdlSymbolic | None = None
        self._last_submitted: int | None = None
        self._pattern_key = None

    @property
    def status(self) -> PrecondStatus:
        # Ready as soon as factors are published; a refresh may run behind a
        # ready preconditioner without taking it away from the solver.
        if self.factors is not None:
            return PrecondStatus.READY
        return PrecondStatus.FACTORIZING if self._future is not None else PrecondStatus.EMPTY

    @property
    def refresh_in_flight(self) -> bool:
        """True while the worker is factorizing (regardless of readiness)."""
        return self._future is not None

    def staleness(self, step: int) -> int:
        """Steps elapsed since the system the current factors came from; -1 if none."""
        if self.factors is None:
            return -1
        return step - self.factors.source_step

    def _policy_fires(self, step: int) -> bool:
        if self._last_submitted is None or self.policy == "on-completion":
            return True
        return step - self._last_submitted >= self.refactor_every

    def _publish_if_done(self):
        if self._future is not None and self._future.done():
            try:
                result = self._future.result()
                self.factors = result
                self._symbolic = result.symbolic
            except Exception:
                logger.warning("background factorization failed; preconditioner disabled", exc_info=True)
                self.disabled = True
            self._future = None

    def poll(self):
        """Publish a finished factorization, if any; never blocks.

        Safe to call at any step boundary, e.g. right before a solve, so a
        factorization that finished mid-step is used as early as possible.
        """
        self._publish_if_done()

    def update(self, a: CsrMatrix, step: int):
        """Poll the worker and maybe submit a new snapshot; never blocks."""
        self._publish_if_done()
        if self.disabled or self._future is not None:
            return
        key = _pattern_key(a)
        if self._pattern_key is not None and key != self._pattern_key:
            self._symbolic = None
            self.factors = None
        self._pattern_key = key
        if not self._policy_fires(step):
            return
        snapshot = a.copy_values()
        self._last_submitted = step
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="ldlt-worker")
        symbolic = self._symbolic
        self._future = self._pool.submit(
            ldlt_factor, snapshot, self.plan, self.tile, symbolic, step
        )

    def wait_ready(self, timeout: float = 60.0):
        """Block until the in-flight factorization is published (tests/tools only)."""
        if self._future is None and self.factors is None:
            raise LifecycleError("no factorization in flight")
        if self._future is not None:
            self._future.exception(timeout=timeout)
            self._publish_if_done()
        if self.disabled:
            raise LifecycleError("factorization failed; preconditioner disabled")

    def apply(self, r: np.ndarray, workers: int = 1) -> np.ndarray:
        if self.factors is None:
            raise LifecycleError(f"preconditioner is {self.status.value}, not ready")
        return self.factors.apply(r, workers=workers)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
