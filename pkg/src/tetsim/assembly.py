"""Sparse matrix assembly with a reusable triplet-to-CSR compression mapping.

Element code appends (row, col, value) contributions to a TripletStream in a
fixed order each pass.  The first pass builds the CSR pattern with two stable
bucket transposes and records, per triplet, the CSR value slot it lands in.
While the fill order is unchanged (`keep_struct`), later passes skip all
pattern work and only merge values through that mapping, which also makes the
merge trivially parallel: every output slot is owned by exactly one worker
and per-slot summation order is pinned to ascending triplet index, so results
are bit-reproducible for any worker count.

Pinned-DOF boundary conditions are folded into the mapping: triplets touching
a pinned row or column are routed to a discard slot and the pattern keeps a
single diagonal entry per pinned DOF whose value is forced to exactly 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._threads import worker_pool

__all__ = [
    "AssemblyError",
    "StaleMappingError",
    "TripletStream",
    "CsrMatrix",
    "UncompressedStructure",
    "CompressionMapping",
    "MatrixAssembler",
    "build_pattern",
    "compress",
    "compress_parallel",
    "dump_matrixmarket",
]

DISCARD = -1  # slot index for filtered (pinned row/column) triplets


class AssemblyError(ValueError):
    pass


class StaleMappingError(AssemblyError):
    """The stream no longer matches the mapping; the pattern must be rebuilt."""


class TripletStream:
    """Append-only log of element contributions with fill-order change detection.

    `prev_row/prev_col/prev_val` hold the triplets of the previous pass;
    `cursor` is the next write position.  Adding an entry that matches the
    previous pass at the same position stores only the value; any mismatch
    clears `keep_struct`, which tells the assembler the compression mapping
    can no longer be reused.  Single-writer by contract.
    """

    def __init__(self):
        self.prev_row = np.empty(0, dtype=np.int64)
        self.prev_col = np.empty(0, dtype=np.int64)
        self.prev_val = np.empty(0, dtype=np.float64)
        self.cursor = 0
        self.keep_struct = False
        self.size = 0  # length of the last completed pass
        self._completed = False

    def __len__(self) -> int:
        return self.size

    def _reserve(self, extra: int):
        need = self.cursor + extra
        cap = len(self.prev_val)
        if need > cap:
            cap = max(need, 2 * cap, 64)
            for name in ("prev_row", "prev_col", "prev_val"):
                old = getattr(self, name)
                grown = np.empty(cap, dtype=old.dtype)
                grown[: len(old)] = old
                setattr(self, name, grown)

    def begin_pass(self):
        """Start a collection pass; structure is presumed kept if one completed."""
        self.cursor = 0
        self.keep_struct = self._completed

    def add(self, row: int, col: int, val: float):
        """Append one contribution (indices are validated at compression time)."""
        i = self.cursor
        if self.keep_struct and i < self.size and self.prev_row[i] == row and self.prev_col[i] == col:
            self.prev_val[i] = val
        else:
            self.keep_struct = False
            self._reserve(1)
            self.prev_row[i] = row
            self.prev_col[i] = col
            self.prev_val[i] = val
        self.cursor = i + 1

    def add_block(self, rows: np.ndarray, cols: np.ndarray, vals: np.ndarray):
        """Append a batch of contributions; equivalent to a loop of add() calls."""
        k = len(vals)
        if k == 0:
            return
        i = self.cursor
        end = i + k
        if (
            self.keep_struct
            and end <= self.size
            and np.array_equal(self.prev_row[i:end], rows)
            and np.array_equal(self.prev_col[i:end], cols)
        ):
            self.prev_val[i:end] = vals
        else:
            self.keep_struct = False
            self._reserve(k)
            self.prev_row[i:end] = rows
            self.prev_col[i:end] = cols
            self.prev_val[i:end] = vals
        self.cursor = end

    def end_pass(self):
        """Finish the pass; a shorter pass than the previous one breaks reuse."""
        if self.cursor != self.size:
            self.keep_struct = False
        self.size = self.cursor
        self._completed = True

    def rows(self) -> np.ndarray:
        return self.prev_row[: self.size]

    def cols(self) -> np.ndarray:
        return self.prev_col[: self.size]

    def vals(self) -> np.ndarray:
        return self.prev_val[: self.size]


@dataclass
class CsrMatrix:
    """Compressed sparse row matrix; column indices strictly increasing per row."""

    nrows: int
    ncols: int
    row_ptr: np.ndarray
    col_ind: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return len(self.col_ind)

    def diagonal(self) -> np.ndarray:
        row_of = np.repeat(np.arange(self.nrows), np.diff(self.row_ptr))
        d = np.zeros(min(self.nrows, self.ncols))
        on_diag = row_of == self.col_ind
        d[self.col_ind[on_diag]] = self.values[on_diag]
        return d

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.nrows, self.ncols))
        row_of = np.repeat(np.arange(self.nrows), np.diff(self.row_ptr))
        dense[row_of, self.col_ind] = self.values
        return dense

    def copy_values(self) -> "CsrMatrix":
        """Shallow copy sharing the pattern, with an independent value array."""
        return CsrMatrix(self.nrows, self.ncols, self.row_ptr, self.col_ind, self.values.copy())


@dataclass
class UncompressedStructure:
    """Row-pointer structure whose columns are still unsorted and duplicated.

    Intermediate state of the pattern build: `origin[k]` is the index of the
    source triplet that produced entry k, so later stages can address values
    without ever copying them.
    """

    row_ptr: np.ndarray
    col_ind: np.ndarray
    origin: np.ndarray


@dataclass
class CompressionMapping:
    """Deterministic map from triplet positions to CSR value slots.

    `slot_of_triplet[t]` is the destination slot of triplet t, or DISCARD for
    contributions filtered out by pinned DOFs.  `kept`/`kept_slots` cache the
    surviving triplets in ascending order, which pins the per-slot summation
    order.  The mapping stores the pinned-DOF list it was built with so a
    change of boundary conditions invalidates it.
    """

    n: int
    row_ptr: np.ndarray
    col_ind: np.ndarray
    slot_of_triplet: np.ndarray
    fixed_dofs: np.ndarray
    fixed_diag_slots: np.ndarray
    kept: np.ndarray
    kept_slots: np.ndarray
    _slot_order: np.ndarray | None = field(default=None, repr=False)

    @property
    def ntriplets(self) -> int:
        return len(self.slot_of_triplet)

    @property
    def nnz(self) -> int:
        return len(self.col_ind)

    def slot_order(self) -> np.ndarray:
        """Kept-triplet order grouped by slot (ascending triplet index inside)."""
        if self._slot_order is None:
            self._slot_order = np.argsort(self.kept_slots, kind="stable")
        return self._slot_order


def _bucket_transpose(keys: np.ndarray, nbuckets: int, origin: np.ndarray, payload: np.ndarray) -> UncompressedStructure:
    """One stable bucket pass: group entries by `keys`, preserving input order.

    Returns the transposed structure whose row r holds, in input order, the
    payload of entries with key r.  Values are never moved, only origins.
    """
    counts = np.bincount(keys, minlength=nbuckets)
    row_ptr = np.zeros(nbuckets + 1, dtype=np.int64)
    np.cumsum(counts, out=row_ptr[1:])
    order = np.argsort(keys, kind="stable")
    return UncompressedStructure(row_ptr=row_ptr, col_ind=payload[order], origin=origin[order])


def build_pattern(stream: TripletStream, n: int, fixed_dofs=None) -> tuple[CsrMatrix, CompressionMapping]:
    """Build the CSR pattern and the triplet-to-slot mapping for a stream.

    Two stable bucket transposes sort the triplets by row then column without
    touching values; duplicates are then merged into slots.  Triplets whose
    row or column is a pinned DOF are skipped during the transposes and the
    pattern receives a single reserved diagonal slot per pinned DOF.

    Returns the empty-valued pattern matrix and the mapping.
    """
    rows = stream.rows()
    cols = stream.cols()
    nt = len(rows)
    fixed = np.unique(np.asarray(fixed_dofs if fixed_dofs is not None else [], dtype=np.int64))
    if fixed.size and (fixed[0] < 0 or fixed[-1] >= n):
        raise AssemblyError("pinned DOF index out of range")

    if nt:
        bad = (rows < 0) | (rows >= n) | (cols < 0) | (cols >= n)
        if np.any(bad):
            t = int(np.flatnonzero(bad)[0])
            raise AssemblyError(
                f"triplet {t} is out of range: ({int(rows[t])}, {int(cols[t])}) for dimension {n}"
            )

    is_fixed = np.zeros(n, dtype=bool)
    is_fixed[fixed] = True
    keep_mask = ~(is_fixed[rows] | is_fixed[cols])
    kept = np.flatnonzero(keep_mask)

    # Surviving triplets plus one synthetic diagonal entry per pinned DOF.
    work_rows = np.concatenate([rows[kept], fixed])
    work_cols = np.concatenate([cols[kept], fixed])
    origin = np.arange(len(work_rows), dtype=np.int64)

    # First transpose groups by column (pinned columns already skipped), the
    # second by row; both are stable, so entries end up sorted by (row, col)
    # with duplicates in ascending triplet order.
    by_col = _bucket_transpose(work_cols, n, origin, work_rows)
    col_of = work_cols[by_col.origin]
    by_row = _bucket_transpose(by_col.col_ind, n, by_col.origin, col_of)

    sorted_rows = work_rows[by_row.origin]
    sorted_cols = by_row.col_ind
    m = len(sorted_rows)
    if m:
        new_slot = np.ones(m, dtype=bool)
        new_slot[1:] = (sorted_rows[1:] != sorted_rows[:-1]) | (sorted_cols[1:] != sorted_cols[:-1])
        slot_ids = np.cumsum(new_slot) - 1
        col_ind = sorted_cols[new_slot]
        row_counts = np.bincount(sorted_rows[new_slot], minlength=n)
    else:
        slot_ids = np.empty(0, dtype=np.int64)
        col_ind = np.empty(0, dtype=np.int64)
        row_counts = np.zeros(n, dtype=np.int64)
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(row_counts, out=row_ptr[1:])

    slot_of_work = np.empty(m, dtype=np.int64)
    slot_of_work[by_row.origin] = slot_ids
    slot_of_triplet = np.full(nt, DISCARD, dtype=np.int64)
    slot_of_triplet[kept] = slot_of_work[: len(kept)]
    fixed_diag_slots = slot_of_work[len(kept):]

    for a in (row_ptr, col_ind, slot_of_triplet, fixed_diag_slots):
        a.setflags(write=False)
    pattern = CsrMatrix(n, n, row_ptr, col_ind, np.zeros(len(col_ind)))
    mapping = CompressionMapping(
        n=n,
        row_ptr=row_ptr,
        col_ind=col_ind,
        slot_of_triplet=slot_of_triplet,
        fixed_dofs=fixed,
        fixed_diag_slots=fixed_diag_slots,
        kept=kept,
        kept_slots=slot_of_triplet[kept],
    )
    return pattern, mapping


def _check_stream(stream: TripletStream, mapping: CompressionMapping):
    if stream.size != mapping.ntriplets:
        raise StaleMappingError(
            f"stream has {stream.size} triplets but the mapping was built for {mapping.ntriplets}"
        )


def _contributions(stream: TripletStream, mapping: CompressionMapping, coeffs) -> np.ndarray:
    vals = stream.vals()[mapping.kept]
    if coeffs is not None:
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if len(coeffs) != mapping.ntriplets:
            raise AssemblyError(f"expected {mapping.ntriplets} coefficients, got {len(coeffs)}")
        vals = vals * coeffs[mapping.kept]
    return vals


def compress(stream: TripletStream, mapping: CompressionMapping, coeffs=None) -> CsrMatrix:
    """Merge stream values into CSR through the mapping.

    values[s] is the sum of coeff(t)*val(t) over triplets t with slot s,
    accumulated in ascending t, so the result is bit-reproducible.  Pinned
    diagonal slots are set to exactly 1.0.
    """
    _check_stream(stream, mapping)
    contrib = _contributions(stream, mapping, coeffs)
    values = np.bincount(mapping.kept_slots, weights=contrib, minlength=mapping.nnz)
    values[mapping.fixed_diag_slots] = 1.0
    return CsrMatrix(mapping.n, mapping.n, mapping.row_ptr, mapping.col_ind, values)


def compress_parallel(stream: TripletStream, mapping: CompressionMapping, coeffs=None, workers: int = 1) -> CsrMatrix:
    """Parallel compress, bit-identical to compress() for any worker count.

    Output slots are partitioned into contiguous ranges, one owner per range;
    each worker merges its slice of the slot-grouped triplet order, keeping
    the per-slot ascending-triplet summation of the sequential path.
    """
    if workers <= 1:
        return compress(stream, mapping, coeffs)
    _check_stream(stream, mapping)
    contrib = _contributions(stream, mapping, coeffs)
    order = mapping.slot_order()
    slots_sorted = mapping.kept_slots[order]
    nnz = mapping.nnz
    bounds = np.linspace(0, nnz, workers + 1).astype(np.int64)
    cuts = np.searchsorted(slots_sorted, bounds)
    values = np.zeros(nnz)

    def merge_range(w: int):
        lo, hi = cuts[w], cuts[w + 1]
        slot_lo, slot_hi = bounds[w], bounds[w + 1]
        if lo == hi or slot_lo == slot_hi:
            return
        seg = order[lo:hi]
        values[slot_lo:slot_hi] = np.bincount(
            slots_sorted[lo:hi] - slot_lo, weights=contrib[seg], minlength=slot_hi - slot_lo
        )

    list(worker_pool(workers).map(merge_range, range(workers)))
    values[mapping.fixed_diag_slots] = 1.0
    return CsrMatrix(mapping.n, mapping.n, mapping.row_ptr, mapping.col_ind, values)


class MatrixAssembler:
    """Owns a triplet stream and its mapping; rebuilds the pattern only when needed.

    `pattern_rebuilds` counts how many times the mapping was (re)built, which
    is the observable for the reuse property: a simulation with a stable fill
    order rebuilds exactly once.
    """

    def __init__(self, n: int, fixed_dofs=None, force_rebuild: bool = False):
        self.n = n
        self.fixed_dofs = np.unique(np.asarray(fixed_dofs if fixed_dofs is not None else [], dtype=np.int64))
        self.stream = TripletStream()
        self.mapping: CompressionMapping | None = None
        self.pattern_rebuilds = 0
        self.force_rebuild = force_rebuild

    def begin(self) -> TripletStream:
        self.stream.begin_pass()
        return self.stream

    def _mapping_valid(self) -> bool:
        return (
            self.mapping is not None
            and self.stream.keep_struct
            and self.stream.size == self.mapping.ntriplets
            and np.array_equal(self.fixed_dofs, self.mapping.fixed_dofs)
        )

    def finish(self, coeffs=None, workers: int = 1) -> tuple[CsrMatrix, bool]:
        """End the pass and compress; returns (matrix, pattern_was_rebuilt)."""
        self.stream.end_pass()
        rebuilt = False
        if self.force_rebuild or not self._mapping_valid():
            _, self.mapping = build_pattern(self.stream, self.n, self.fixed_dofs)
            self.pattern_rebuilds += 1
            rebuilt = True
        if workers > 1:
            mat = compress_parallel(self.stream, self.mapping, coeffs, workers)
        else:
            mat = compress(self.stream, self.mapping, coeffs)
        return mat, rebuilt


def dump_matrixmarket(mat: CsrMatrix, path) -> None:
    """Write a CSR matrix in MatrixMarket coordinate ASCII (1-based indices)."""
    row_of = np.repeat(np.arange(mat.nrows), np.diff(mat.row_ptr))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write(f"{mat.nrows} {mat.ncols} {mat.nnz}\n")
        for i, j, v in zip(row_of, mat.col_ind, mat.values):
            fh.write(f"{i + 1} {j + 1} {v:.17g}\n")
