"""CRS storage, spMVM kernels and RCM reordering.

Values are float64 and column indices int32; row offsets are int64 so that
matrices with more than 2**31 nonzeros still index correctly.  All indexing
is zero-based.
"""

from __future__ import annotations

import os
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence, Tuple

import numpy as np
from numba import njit

__all__ = [
    "CooTriples",
    "CsrMatrix",
    "SparseFormatError",
    "coo_to_csr",
    "csr_to_coo",
    "spmv",
    "spmv_split",
    "spmv_chunked",
    "nnz_balanced_cuts",
    "rcm_permutation",
    "permute",
    "permute_vec",
    "matrix_bandwidth",
    "identity",
]

VAL_DTYPE = np.float64
IDX_DTYPE = np.int32
PTR_DTYPE = np.int64


class SparseFormatError(ValueError):
    """Raised for malformed sparse matrix input or mismatched operands."""


@dataclass(frozen=True)
class CooTriples:
    """Assembly staging format: parallel arrays of (row, col, value)."""

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    n_rows: int
    n_cols: int

    @classmethod
    def from_triples(
        cls, triples: Iterable[Tuple[int, int, float]], n_rows: int, n_cols: int
    ) -> "CooTriples":
        triples = list(triples)
        if triples:
            r, c, v = zip(*triples)
        else:
            r, c, v = (), (), ()
        return cls(
            np.asarray(r, dtype=np.int64),
            np.asarray(c, dtype=np.int64),
            np.asarray(v, dtype=VAL_DTYPE),
            int(n_rows),
            int(n_cols),
        )

    def __len__(self) -> int:
        return len(self.rows)

    def triples(self) -> Iterator[Tuple[int, int, float]]:
        for r, c, v in zip(self.rows, self.cols, self.vals):
            yield int(r), int(c), float(v)


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    val: np.ndarray

    def __post_init__(self):
        rp = np.ascontiguousarray(self.row_ptr, dtype=PTR_DTYPE)
        ci = np.ascontiguousarray(self.col_idx, dtype=IDX_DTYPE)
        v = np.ascontiguousarray(self.val, dtype=VAL_DTYPE)
        object.__setattr__(self, "row_ptr", rp)
        object.__setattr__(self, "col_idx", ci)
        object.__setattr__(self, "val", v)
        if self.n_rows < 0 or self.n_cols < 0:
            raise SparseFormatError("negative matrix dimension")
        if rp.shape != (self.n_rows + 1,):
            raise SparseFormatError(
                f"row_ptr has length {rp.size}, expected {self.n_rows + 1}"
            )
        if rp[0] != 0 or np.any(np.diff(rp) < 0):
            raise SparseFormatError("row_ptr must start at 0 and be nondecreasing")
        if ci.size != rp[-1] or v.size != rp[-1]:
            raise SparseFormatError(
                f"row_ptr[-1]={rp[-1]} but col_idx/val have {ci.size}/{v.size} entries"
            )
        if ci.size and (ci.min() < 0 or ci.max() >= self.n_cols):
            raise SparseFormatError("column index out of range")

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.n_rows, self.n_cols

    @property
    def nnzr(self) -> float:
        """Average nonzeros per row."""
        return self.nnz / self.n_rows if self.n_rows else 0.0

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def max_row_nnz(self) -> int:
        return int(self.row_nnz().max()) if self.n_rows else 0

    def row_indices(self) -> np.ndarray:
        """Row index of every stored nonzero."""
        return np.repeat(np.arange(self.n_rows, dtype=np.int64), self.row_nnz())

    def is_canonical(self) -> bool:
        """True when column indices are strictly increasing inside every row."""
        if self.nnz < 2:
            return True
        inc = np.diff(self.col_idx.astype(np.int64)) > 0
        # positions where a new row starts do not need to increase
        starts = self.row_ptr[1:-1]
        starts = starts[(starts > 0) & (starts < self.nnz)]
        inc[starts - 1] = True
        return bool(inc.all())

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols), dtype=VAL_DTYPE)
        np.add.at(out, (self.row_indices(), self.col_idx), self.val)
        return out

    def row_slice(self, start: int, stop: int) -> "CsrMatrix":
        """Rows [start, stop) as a new matrix with the same column space."""
        lo, hi = self.row_ptr[start], self.row_ptr[stop]
        return CsrMatrix(
            stop - start,
            self.n_cols,
            self.row_ptr[start : stop + 1] - lo,
            self.col_idx[lo:hi],
            self.val[lo:hi],
        )

    def same_as(self, other: "CsrMatrix") -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
            and np.array_equal(self.val, other.val)
        )


def identity(n: int) -> CsrMatrix:
    return CsrMatrix(
        n, n, np.arange(n + 1), np.arange(n), np.ones(n, dtype=VAL_DTYPE)
    )


def coo_to_csr(t: CooTriples) -> CsrMatrix:
    """Assemble canonical CRS from triples, summing duplicates."""
    rows = np.asarray(t.rows, dtype=np.int64)
    cols = np.asarray(t.cols, dtype=np.int64)
    vals = np.asarray(t.vals, dtype=VAL_DTYPE)
    if not (rows.shape == cols.shape == vals.shape):
        raise SparseFormatError("rows, cols and vals must have equal length")
    bad = (rows < 0) | (rows >= t.n_rows) | (cols < 0) | (cols >= t.n_cols)
    if bad.any():
        k = int(np.argmax(bad))
        raise SparseFormatError(
            f"triple #{k} ({rows[k]}, {cols[k]}, {vals[k]!r}) is outside "
            f"{t.n_rows}x{t.n_cols}"
        )
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    if rows.size:
        first = np.ones(rows.size, dtype=bool)
        first[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        starts = np.flatnonzero(first)
        vals = np.add.reduceat(vals, starts)
        rows, cols = rows[starts], cols[starts]
    row_ptr = np.zeros(t.n_rows + 1, dtype=PTR_DTYPE)
    np.cumsum(np.bincount(rows, minlength=t.n_rows), out=row_ptr[1:])
    return CsrMatrix(t.n_rows, t.n_cols, row_ptr, cols, vals)


def csr_to_coo(a: CsrMatrix) -> CooTriples:
    return CooTriples(
        a.row_indices(), a.col_idx.astype(np.int64), a.val.copy(), a.n_rows, a.n_cols
    )


# ---------------------------------------------------------------------------
# kernels
#
# Both kernels walk a row's nonzeros in storage order with a scalar
# accumulator, so every row's result depends only on that row; any row-exclusive
# work split gives bitwise identical output.  No fastmath: no reassociation
# and no FMA contraction.


@njit(nogil=True, cache=True)
def _crs_rows(row_ptr, col_idx, val, b, c, r0, r1):
    for i in range(r0, r1):
        acc = 0.0
        for j in range(row_ptr[i], row_ptr[i + 1]):
            acc += val[j] * b[col_idx[j]]
        c[i] = acc


@njit(nogil=True, cache=True)
def _crs_rows_accumulate(row_ptr, col_idx, val, b, c, r0, r1):
    for i in range(r0, r1):
        lo = row_ptr[i]
        hi = row_ptr[i + 1]
        if lo == hi:
            continue
        acc = c[i]
        for j in range(lo, hi):
            acc += val[j] * b[col_idx[j]]
        c[i] = acc


def _as_vector(b, n: int, what: str) -> np.ndarray:
    b = np.ascontiguousarray(b, dtype=VAL_DTYPE)
    if b.ndim != 1 or b.size != n:
        raise SparseFormatError(f"{what} has length {b.size}, expected {n}")
    return b


def _out_vector(out: Optional[np.ndarray], n: int) -> np.ndarray:
    if out is None:
        return np.empty(n, dtype=VAL_DTYPE)
    if out.shape != (n,) or out.dtype != VAL_DTYPE or not out.flags.c_contiguous:
        raise SparseFormatError("output buffer has wrong shape or dtype")
    return out


def crs_rows(a: CsrMatrix, b: np.ndarray, c: np.ndarray, r0: int, r1: int,
             accumulate: bool = False) -> None:
    """Compute rows [r0, r1) of a.b into c, overwriting or accumulating.

    No validation; callers own the shapes.  Releases the GIL.
    """
    kern = _crs_rows_accumulate if accumulate else _crs_rows
    kern(a.row_ptr, a.col_idx, a.val, b, c, r0, r1)


def spmv(a: CsrMatrix, b, out: Optional[np.ndarray] = None) -> np.ndarray:
    """C = A.B with ascending-j accumulation inside every row."""
    b = _as_vector(b, a.n_cols, "RHS vector")
    c = _out_vector(out, a.n_rows)
    _crs_rows(a.row_ptr, a.col_idx, a.val, b, c, 0, a.n_rows)
    return c


def spmv_split(
    a_local: CsrMatrix,
    a_remote: CsrMatrix,
    b_local,
    b_halo,
    out: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Two-pass kernel: C = A_local.B_local, then C += A_remote.B_halo.

    The result vector is written twice, which is the extra traffic the split
    code balance accounts for.
    """
    if a_local.n_rows != a_remote.n_rows:
        raise SparseFormatError(
            f"local part has {a_local.n_rows} rows, remote part {a_remote.n_rows}"
        )
    b_local = _as_vector(b_local, a_local.n_cols, "local RHS")
    b_halo = _as_vector(b_halo, a_remote.n_cols, "halo RHS")
    c = _out_vector(out, a_local.n_rows)
    _crs_rows(a_local.row_ptr, a_local.col_idx, a_local.val, b_local, c, 0, a_local.n_rows)
    _crs_rows_accumulate(
        a_remote.row_ptr, a_remote.col_idx, a_remote.val, b_halo, c, 0, a_remote.n_rows
    )
    return c


def nnz_balanced_cuts(row_ptr: np.ndarray, n_parts: int) -> np.ndarray:
    """Split rows into ``n_parts`` contiguous ranges of near-equal nonzeros.

    Each interior cut is the row boundary whose prefix nonzero count is
    nearest to ``k * nnz / n_parts`` (ties go to the lower row), so every part
    deviates from the mean by at most the largest single-row count.

    Returns an array of ``n_parts + 1`` nondecreasing row offsets.
    """
    if n_parts < 1:
        raise ValueError(f"number of parts must be >= 1, got {n_parts}")
    row_ptr = np.asarray(row_ptr)
    n_rows = row_ptr.size - 1
    nnz = int(row_ptr[-1])
    if nnz == 0:
        cuts = (np.arange(n_parts + 1) * n_rows) // n_parts
        return cuts.astype(np.int64)
    targets = np.arange(1, n_parts) * (nnz / n_parts)
    hi = np.searchsorted(row_ptr, targets, side="left")
    lo = np.maximum(hi - 1, 0)
    hi = np.minimum(hi, n_rows)
    # among rows sharing a prefix value (empty rows) searchsorted picks the
    # first; that is the lowest boundary with the same count
    lo_first = np.searchsorted(row_ptr, row_ptr[lo], side="left")
    pick_hi = np.abs(row_ptr[hi] - targets) < np.abs(row_ptr[lo_first] - targets)
    inner = np.where(pick_hi, hi, lo_first)
    cuts = np.concatenate(([0], inner, [n_rows])).astype(np.int64)
    return np.maximum.accumulate(cuts)


_pools: dict = {}
_pools_lock = threading.Lock()


def _forget_pools() -> None:
    # worker threads do not survive fork
    global _pools_lock
    _pools.clear()
    _pools_lock = threading.Lock()


os.register_at_fork(after_in_child=_forget_pools)


def _pool(n_workers: int) -> ThreadPoolExecutor:
    with _pools_lock:
        pool = _pools.get(n_workers)
        if pool is None:
            pool = ThreadPoolExecutor(n_workers, thread_name_prefix="spmv")
            _pools[n_workers] = pool
        return pool


def spmv_chunked(
    a: CsrMatrix,
    b,
    n_workers: int,
    out: Optional[np.ndarray] = None,
    accumulate: bool = False,
    cuts: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Concurrent spMVM over contiguous, nonzero-balanced row chunks.

    Chunks never split a row, so the result is bitwise identical to
    :func:`spmv` for every worker count.
    """
    if n_workers < 1:
        raise ValueError(f"n_workers must be >= 1, got {n_workers}")
    b = _as_vector(b, a.n_cols, "RHS vector")
    c = _out_vector(out, a.n_rows)
    if accumulate and out is None:
        c[:] = 0.0
    if cuts is None:
        cuts = nnz_balanced_cuts(a.row_ptr, n_workers)
    kern = _crs_rows_accumulate if accumulate else _crs_rows
    args = (a.row_ptr, a.col_idx, a.val, b, c)
    if n_workers == 1:
        kern(*args, 0, a.n_rows)
        return c
    futures = [
        _pool(n_workers).submit(kern, *args, int(cuts[w]), int(cuts[w + 1]))
        for w in range(n_workers)
    ]
    for f in futures:
        f.result()
    return c


# ---------------------------------------------------------------------------
# reordering


def _symmetric_adjacency(a: CsrMatrix) -> Tuple[np.ndarray, np.ndarray]:
    """Pattern of A + A^T without the diagonal, as (indptr, indices)."""
    rows = a.row_indices()
    cols = a.col_idx.astype(np.int64)
    off = rows != cols
    r = np.concatenate((rows[off], cols[off]))
    c = np.concatenate((cols[off], rows[off]))
    n = a.n_rows
    key = np.unique(r * n + c)
    r, c = key // n, key % n
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(r, minlength=n), out=indptr[1:])
    return indptr, c


def rcm_permutation(a: CsrMatrix) -> np.ndarray:
    """Reverse Cuthill-McKee ordering of a square matrix.

    The pattern is symmetrized first.  Each connected component is traversed
    breadth-first from its minimum-degree vertex (lowest index on ties),
    visiting neighbours by ascending degree; the component's order is then
    reversed.  Components appear in the order their start vertices are found.

    Returns ``perm`` with ``perm[new] = old``.
    """
    if a.n_rows != a.n_cols:
        raise SparseFormatError("RCM requires a square matrix")
    n = a.n_rows
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    indptr, indices = _symmetric_adjacency(a)
    degree = np.diff(indptr)
    # visiting candidates in (degree, index) order yields the start vertices
    by_degree = np.lexsort((np.arange(n), degree))
    visited = np.zeros(n, dtype=bool)
    perm = []
    for start in by_degree:
        if visited[start]:
            continue
        component = [int(start)]
        visited[start] = True
        queue = deque(component)
        while queue:
            v = queue.popleft()
            nbrs = indices[indptr[v] : indptr[v + 1]]
            nbrs = nbrs[~visited[nbrs]]
            if nbrs.size:
                nbrs = nbrs[np.lexsort((nbrs, degree[nbrs]))]
                visited[nbrs] = True
                component.extend(nbrs.tolist())
                queue.extend(nbrs.tolist())
        perm.extend(reversed(component))
    return np.asarray(perm, dtype=np.int64)


def _check_perm(p, n: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.int64)
    if p.shape != (n,) or not np.array_equal(np.sort(p), np.arange(n)):
        raise SparseFormatError(f"not a permutation of range({n})")
    return p


def permute(a: CsrMatrix, p: Sequence[int]) -> CsrMatrix:
    """Symmetric permutation P A P^T where new row k is old row ``p[k]``."""
    if a.n_rows != a.n_cols:
        raise SparseFormatError("symmetric permutation requires a square matrix")
    p = _check_perm(p, a.n_rows)
    inv = np.empty_like(p)
    inv[p] = np.arange(p.size)
    return coo_to_csr(
        CooTriples(inv[a.row_indices()], inv[a.col_idx], a.val, a.n_rows, a.n_cols)
    )


def permute_vec(b, p: Sequence[int]) -> np.ndarray:
    b = np.asarray(b)
    return b[_check_perm(p, b.size)]


def matrix_bandwidth(a: CsrMatrix) -> int:
    """max |i - j| over stored nonzeros (0 for an empty matrix)."""
    if a.nnz == 0:
        return 0
    return int(np.abs(a.row_indices() - a.col_idx).max())
