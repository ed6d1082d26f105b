"""Row partitioning and the once-only halo communication plan.

Rank ``r`` owns rows ``[row_start[r], row_start[r+1])`` and the same range of
the RHS and result vectors.  Columns it references outside that range form
its halo, received from their owners once per spMVM.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .sparse import CsrMatrix, SparseFormatError, nnz_balanced_cuts

__all__ = [
    "PartitionMap",
    "CommPlan",
    "PlanConsistencyError",
    "partition_by_nonzeros",
    "build_comm_plan",
    "build_all_plans",
    "exchange_volume",
    "VALUE_BYTES",
]

VALUE_BYTES = 8


class PlanConsistencyError(RuntimeError):
    """Send and receive lists of two ranks disagree."""


@dataclass(frozen=True, eq=False)
class PartitionMap:
    row_start: np.ndarray

    def __post_init__(self):
        rs = np.asarray(self.row_start, dtype=np.int64)
        object.__setattr__(self, "row_start", rs)
        if rs.ndim != 1 or rs.size < 2 or rs[0] != 0 or np.any(np.diff(rs) < 0):
            raise ValueError("row_start must be nondecreasing, start at 0, n_ranks+1 long")

    @property
    def n_ranks(self) -> int:
        return self.row_start.size - 1

    @property
    def n_rows(self) -> int:
        return int(self.row_start[-1])

    def rows_of(self, rank: int) -> range:
        return range(int(self.row_start[rank]), int(self.row_start[rank + 1]))

    def owner(self, index):
        """Owning rank of global row/column index (scalar or array)."""
        return np.searchsorted(self.row_start, index, side="right") - 1


def partition_by_nonzeros(a: CsrMatrix, n_ranks: int) -> PartitionMap:
    """Contiguous row ranges with balanced nonzero counts."""
    if n_ranks < 1:
        raise ValueError(f"n_ranks must be >= 1, got {n_ranks}")
    return PartitionMap(nnz_balanced_cuts(a.row_ptr, n_ranks))


@dataclass(eq=False)
class CommPlan:
    """Everything one rank needs for repeated distributed spMVMs.

    ``send_to[q]`` holds rank-local row indices whose B values go to ``q``;
    ``recv_from[q]`` the global indices arriving from ``q``, stored in the
    halo buffer at ``halo_offset[q]``.  ``a_local`` addresses the owned RHS
    segment, ``a_remote`` the halo buffer, and ``a_full`` the concatenation
    ``[owned | halo]`` with the original per-row nonzero order kept.
    """

    rank: int
    partition: PartitionMap
    send_to: Dict[int, np.ndarray]
    recv_from: Dict[int, np.ndarray]
    halo_offset: Dict[int, int]
    a_local: CsrMatrix
    a_remote: CsrMatrix
    a_full: CsrMatrix
    raw_refs: Dict[int, int] = field(default_factory=dict)

    @property
    def row_begin(self) -> int:
        return int(self.partition.row_start[self.rank])

    @property
    def row_end(self) -> int:
        return int(self.partition.row_start[self.rank + 1])

    @property
    def n_local(self) -> int:
        return self.row_end - self.row_begin

    @property
    def n_halo(self) -> int:
        return sum(len(v) for v in self.recv_from.values())

    @property
    def n_send(self) -> int:
        return sum(len(v) for v in self.send_to.values())

    def halo_columns(self) -> np.ndarray:
        """Global column index of every halo slot, in buffer order."""
        if not self.recv_from:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([self.recv_from[q] for q in sorted(self.recv_from)])

    def send_offsets(self) -> Dict[int, int]:
        off, pos = {}, 0
        for q in sorted(self.send_to):
            off[q] = pos
            pos += len(self.send_to[q])
        return off

    def send_indices(self) -> np.ndarray:
        """Local indices gathered into the contiguous send buffer, in order."""
        if not self.send_to:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([self.send_to[q] for q in sorted(self.send_to)])

    def checksum(self, peer: int) -> bytes:
        """Digest of this rank's (send, recv) lists towards ``peer`` in global numbering.

        Two ranks agree when ``a.checksum(b)`` equals ``b.checksum(a)`` with
        its 8-byte send and receive halves swapped.
        """
        send = self.send_to.get(peer, np.zeros(0, np.int64)) + self.row_begin
        recv = self.recv_from.get(peer, np.zeros(0, np.int64))
        return _digest(send) + _digest(recv)

    def summary(self) -> dict:
        return {
            "rank": self.rank,
            "rows": [self.row_begin, self.row_end],
            "nnz_local": self.a_local.nnz,
            "nnz_remote": self.a_remote.nnz,
            "halo_size": self.n_halo,
            "send_size": self.n_send,
            "send_to": {str(q): len(v) for q, v in sorted(self.send_to.items())},
            "recv_from": {str(q): len(v) for q, v in sorted(self.recv_from.items())},
            "halo_offset": {str(q): o for q, o in sorted(self.halo_offset.items())},
            "raw_remote_refs": {str(q): n for q, n in sorted(self.raw_refs.items())},
        }


def _digest(ids: np.ndarray) -> bytes:
    return hashlib.sha256(np.asarray(ids, dtype="<i8").tobytes()).digest()[:8]


def build_comm_plan(a: CsrMatrix, p: PartitionMap, my_rank: int) -> CommPlan:
    """Derive the halo exchange lists and the local/remote split for one rank."""
    if a.n_rows != a.n_cols:
        raise SparseFormatError(f"distributed spMVM needs a square matrix, got {a.shape}")
    if p.n_rows != a.n_rows:
        raise ValueError(f"partition covers {p.n_rows} rows, matrix has {a.n_rows}")
    if not 0 <= my_rank < p.n_ranks:
        raise ValueError(f"rank {my_rank} outside [0, {p.n_ranks})")

    begin, end = int(p.row_start[my_rank]), int(p.row_start[my_rank + 1])
    mine = a.row_slice(begin, end)
    cols = mine.col_idx.astype(np.int64)
    owned = (cols >= begin) & (cols < end)

    # receive side: distinct remote columns, grouped by owner, ascending
    remote_cols = np.unique(cols[~owned])
    owners = p.owner(remote_cols)
    recv_from, halo_offset, raw_refs = {}, {}, {}
    pos = 0
    for q in np.unique(owners):
        q = int(q)
        ids = remote_cols[owners == q]
        recv_from[q] = ids
        halo_offset[q] = pos
        pos += ids.size
    ref_owners = p.owner(cols[~owned])
    for q, n in zip(*np.unique(ref_owners, return_counts=True)):
        raw_refs[int(q)] = int(n)

    # send side: columns of mine referenced by other ranks' rows
    send_to = {}
    rows_all = a.row_indices()
    all_cols = a.col_idx.astype(np.int64)
    wanted = (all_cols >= begin) & (all_cols < end) & ((rows_all < begin) | (rows_all >= end))
    if wanted.any():
        req_owner = p.owner(rows_all[wanted])
        req_col = all_cols[wanted]
        for q in np.unique(req_owner):
            ids = np.unique(req_col[req_owner == q]) - begin
            send_to[int(q)] = ids

    # column remaps
    halo_cols = (
        np.concatenate([recv_from[q] for q in sorted(recv_from)])
        if recv_from
        else np.zeros(0, np.int64)
    )
    # halo_cols is sorted only within each owner block; owners are ascending
    # and own disjoint ascending ranges, so the concatenation is sorted too
    halo_pos = np.searchsorted(halo_cols, cols[~owned])

    n_local = end - begin
    full_cols = np.empty_like(cols)
    full_cols[owned] = cols[owned] - begin
    full_cols[~owned] = n_local + halo_pos
    a_full = CsrMatrix(n_local, n_local + halo_cols.size, mine.row_ptr, full_cols, mine.val)

    a_local = _select(mine, owned, cols - begin, n_local)
    remote_idx = np.zeros_like(cols)
    remote_idx[~owned] = halo_pos
    a_remote = _select(mine, ~owned, remote_idx, halo_cols.size)

    return CommPlan(
        rank=my_rank,
        partition=p,
        send_to=send_to,
        recv_from=recv_from,
        halo_offset=halo_offset,
        a_local=a_local,
        a_remote=a_remote,
        a_full=a_full,
        raw_refs=raw_refs,
    )


def _select(m: CsrMatrix, keep: np.ndarray, new_cols: np.ndarray, n_cols: int) -> CsrMatrix:
    counts = np.bincount(m.row_indices()[keep], minlength=m.n_rows)
    row_ptr = np.zeros(m.n_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=row_ptr[1:])
    return CsrMatrix(m.n_rows, n_cols, row_ptr, new_cols[keep], m.val[keep])


def build_all_plans(a: CsrMatrix, p: PartitionMap) -> List[CommPlan]:
    return [build_comm_plan(a, p, r) for r in range(p.n_ranks)]


def check_consistency(plans: Sequence[CommPlan]) -> None:
    """Raise :class:`PlanConsistencyError` naming the first disagreeing pair."""
    by_rank = {pl.rank: pl for pl in plans}
    for r, pl in by_rank.items():
        for q in set(pl.send_to) | {q for q, o in by_rank.items() if r in o.recv_from}:
            if q not in by_rank:
                raise PlanConsistencyError(f"rank {r} sends to unknown rank {q}")
            sent = pl.send_to.get(q, np.zeros(0, np.int64)) + pl.row_begin
            got = by_rank[q].recv_from.get(r, np.zeros(0, np.int64))
            if not np.array_equal(sent, got):
                raise PlanConsistencyError(
                    f"ranks {r}->{q}: {len(sent)} indices sent, {len(got)} expected"
                    " or contents differ"
                )


def exchange_volume(plans: Sequence[CommPlan]) -> dict:
    """Bytes moved per spMVM, per rank and in total.

    ``raw_reference_bytes`` counts every remote nonzero reference, i.e. the
    volume without duplicate elimination, for comparison.
    """
    check_consistency(plans)
    sent = {pl.rank: VALUE_BYTES * pl.n_send for pl in plans}
    received = {pl.rank: VALUE_BYTES * pl.n_halo for pl in plans}
    messages = {pl.rank: len(pl.send_to) for pl in plans}
    total = sum(sent.values())
    assert total == sum(received.values())
    return {
        "per_rank_sent": sent,
        "per_rank_received": received,
        "per_rank_messages": messages,
        "total_bytes": total,
        "total_messages": sum(messages.values()),
        "raw_reference_bytes": VALUE_BYTES
        * sum(n for pl in plans for n in pl.raw_refs.values()),
    }
