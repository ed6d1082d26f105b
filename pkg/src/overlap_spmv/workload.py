"""Matrix ingestion, structure-mimicking generators and the sequential oracle."""

from __future__ import annotations

import inspect
import os
from dataclasses import dataclass, field
from typing import Dict, Optional, Union

import numpy as np

from .sparse import CooTriples, CsrMatrix, coo_to_csr, csr_to_coo, spmv

__all__ = [
    "MatrixMarketError",
    "ProblemSpec",
    "read_matrix_market",
    "write_matrix_market",
    "gen_stencil7",
    "gen_block_band",
    "GENERATORS",
    "build_matrix",
    "build_rhs",
    "sequential_oracle",
    "parse_source",
]

MAX_DIM = 2**31 - 1


class MatrixMarketError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def read_matrix_market(path: Union[str, os.PathLike]) -> CooTriples:
    """Read a coordinate ``real``/``integer`` ``general``/``symmetric`` file.

    Indices become zero-based.  Symmetric files are expanded to the full
    pattern; diagonal entries are not duplicated.
    """
    with open(path, "r") as f:
        header = f.readline()
        parts = header.strip().split()
        if len(parts) != 5 or parts[0] != "%%MatrixMarket":
            raise MatrixMarketError(f"bad header {header.strip()!r}", 1)
        obj, fmt, field_, sym = (p.lower() for p in parts[1:])
        if obj != "matrix" or fmt != "coordinate":
            raise MatrixMarketError(f"only 'matrix coordinate' is supported, got {obj} {fmt}", 1)
        if field_ not in ("real", "integer", "double"):
            raise MatrixMarketError(f"unsupported field {field_!r}", 1)
        if sym not in ("general", "symmetric"):
            raise MatrixMarketError(f"unsupported symmetry {sym!r}", 1)

        lineno = 1
        size_line = None
        for line in f:
            lineno += 1
            s = line.strip()
            if s and not s.startswith("%"):
                size_line = s
                break
        if size_line is None:
            raise MatrixMarketError("missing size line", lineno)
        try:
            n_rows, n_cols, nnz = (int(x) for x in size_line.split())
        except ValueError:
            raise MatrixMarketError(f"bad size line {size_line!r}", lineno) from None
        if min(n_rows, n_cols, nnz) < 0:
            raise MatrixMarketError("negative size", lineno)

        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz, dtype=np.float64)
        k = 0
        for line in f:
            lineno += 1
            s = line.strip()
            if not s or s.startswith("%"):
                continue
            if k >= nnz:
                raise MatrixMarketError(f"more than the declared {nnz} entries", lineno)
            tok = s.split()
            if len(tok) != 3:
                raise MatrixMarketError(f"expected 'row col value', got {s!r}", lineno)
            try:
                i, j, v = int(tok[0]), int(tok[1]), float(tok[2])
            except ValueError:
                raise MatrixMarketError(f"cannot parse entry {s!r}", lineno) from None
            if not (1 <= i <= n_rows and 1 <= j <= n_cols):
                raise MatrixMarketError(
                    f"index ({i}, {j}) outside declared {n_rows}x{n_cols}", lineno
                )
            rows[k], cols[k], vals[k] = i - 1, j - 1, v
            k += 1
        if k != nnz:
            raise MatrixMarketError(f"declared {nnz} entries, found {k}", lineno)

    if sym == "symmetric":
        off = rows != cols
        rows, cols, vals = (
            np.concatenate((rows, cols[off])),
            np.concatenate((cols, rows[off])),
            np.concatenate((vals, vals[off])),
        )
    return CooTriples(rows, cols, vals, n_rows, n_cols)


def write_matrix_market(path: Union[str, os.PathLike], a: Union[CsrMatrix, CooTriples],
                        comment: Optional[str] = None) -> None:
    """Write a ``coordinate real general`` file; values round-trip exactly."""
    t = csr_to_coo(a) if isinstance(a, CsrMatrix) else a
    with open(path, "w") as f:
        f.write("%%MatrixMarket matrix coordinate real general\n")
        if comment:
            for line in comment.splitlines():
                f.write(f"% {line}\n")
        f.write(f"{t.n_rows} {t.n_cols} {len(t)}\n")
        for r, c, v in zip(t.rows.tolist(), t.cols.tolist(), t.vals.tolist()):
            f.write(f"{r + 1} {c + 1} {v!r}\n")


# ---------------------------------------------------------------------------
# generators


def gen_stencil7(nx: int, ny: int, nz: int) -> CooTriples:
    """7-point Laplacian on an nx x ny x nz grid (x fastest)."""
    for name, v in (("nx", nx), ("ny", ny), ("nz", nz)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v}")
    nx, ny, nz = int(nx), int(ny), int(nz)
    n = nx * ny * nz
    if n > MAX_DIM:
        raise OverflowError(f"grid of {n} points exceeds the index range")
    idx = np.arange(n, dtype=np.int64)
    x = idx % nx
    y = (idx // nx) % ny
    z = idx // (nx * ny)
    rows = [idx]
    cols = [idx]
    vals = [np.full(n, 6.0)]
    for coord, extent, stride in ((x, nx, 1), (y, ny, nx), (z, nz, nx * ny)):
        for step in (-1, 1):
            ok = (coord + step >= 0) & (coord + step < extent)
            rows.append(idx[ok])
            cols.append(idx[ok] + step * stride)
            vals.append(np.full(int(ok.sum()), -1.0))
    return CooTriples(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), n, n)


def gen_block_band(
    dim: int,
    block: int = 500,
    inner_band: int = 8,
    outer_stride: int = 3,
    target_nnzr: float = 15.0,
    seed: int = 0,
) -> CooTriples:
    """Seeded, structurally symmetric block-banded matrix.

    Candidate positions are a band of half-width ``inner_band`` inside each
    diagonal block of size ``block``, plus bands of the same width around the
    diagonals offset by ``outer_stride * block``.  The diagonal is always set;
    exactly enough upper-triangle candidates are drawn (and mirrored) to give
    ``target_nnzr`` nonzeros per row on average.  Values lie in [0.5, 1.5) and
    mirror across the diagonal.
    """
    if dim < 1 or block < 1 or dim % block:
        raise ValueError(f"block ({block}) must divide dim ({dim})")
    if inner_band < 1 or outer_stride < 1:
        raise ValueError("inner_band and outer_stride must be >= 1")
    if target_nnzr < 3:
        raise ValueError(f"target_nnzr must be >= 3, got {target_nnzr}")
    if dim > MAX_DIM:
        raise OverflowError("dimension exceeds the index range")

    i = np.arange(dim, dtype=np.int64)
    cand_r, cand_c = [], []
    for d in range(1, inner_band + 1):
        ok = (i + d < dim) & ((i // block) == ((i + d) // block))
        cand_r.append(i[ok])
        cand_c.append(i[ok] + d)
    offset = outer_stride * block
    for d in range(-inner_band, inner_band + 1):
        j = i + offset + d
        ok = (j > i) & (j < dim)
        cand_r.append(i[ok])
        cand_c.append(j[ok])
    cand_r = np.concatenate(cand_r)
    cand_c = np.concatenate(cand_c)

    n_pick = int(round((target_nnzr - 1.0) * dim / 2.0))
    if n_pick > cand_r.size:
        raise ValueError(
            f"target_nnzr={target_nnzr} needs {n_pick} off-diagonal pairs but the band "
            f"only offers {cand_r.size}; widen inner_band or use a smaller target"
        )
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(cand_r.size, size=n_pick, replace=False))
    ur, uc = cand_r[pick], cand_c[pick]
    uv = rng.uniform(0.5, 1.5, size=n_pick)
    dv = rng.uniform(0.5, 1.5, size=dim)
    rows = np.concatenate((i, ur, uc))
    cols = np.concatenate((i, uc, ur))
    vals = np.concatenate((dv, uv, uv))
    return CooTriples(rows, cols, vals, dim, dim)


GENERATORS = {
    "stencil7": gen_stencil7,
    "block_band": gen_block_band,
}


# ---------------------------------------------------------------------------
# problems

RHS_RULES = ("uniform", "constant", "ramp")


@dataclass
class ProblemSpec:
    """Where the matrix comes from and how the RHS is filled.

    ``source`` is a Matrix Market path or a generator name; ``params`` are
    generator keyword arguments.  RHS rules: ``uniform`` (seeded [0, 1)),
    ``constant`` (``rhs_value``) and ``ramp`` (``i / n``).
    """

    source: str
    params: Dict[str, float] = field(default_factory=dict)
    rhs: str = "uniform"
    rhs_value: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.rhs not in RHS_RULES:
            raise ValueError(f"rhs rule must be one of {RHS_RULES}, got {self.rhs!r}")
        if self.is_generator:
            gen = GENERATORS[self.source]
            allowed = set(inspect.signature(gen).parameters)
            bad = set(self.params) - allowed
            if bad:
                raise ValueError(f"unknown {self.source} parameter(s): {sorted(bad)}")

    @property
    def is_generator(self) -> bool:
        return self.source in GENERATORS

    @property
    def name(self) -> str:
        if not self.is_generator:
            return os.path.basename(self.source)
        args = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.source}({args})"


def parse_source(text: str, **kw) -> ProblemSpec:
    """Parse ``name:key=value,...`` generator strings or a file path."""
    name, _, rest = text.partition(":")
    if name in GENERATORS:
        params = {}
        for item in filter(None, rest.split(",")):
            key, eq, value = item.partition("=")
            if not eq:
                raise ValueError(f"expected key=value in {text!r}, got {item!r}")
            params[key.strip()] = _number(value.strip())
        return ProblemSpec(name, params, **kw)
    return ProblemSpec(text, {}, **kw)


def _number(s: str):
    try:
        return int(s)
    except ValueError:
        return float(s)


def build_matrix(problem: ProblemSpec) -> CsrMatrix:
    if problem.is_generator:
        params = dict(problem.params)
        if problem.source == "block_band":
            params.setdefault("seed", problem.seed)
        return coo_to_csr(GENERATORS[problem.source](**params))
    return coo_to_csr(read_matrix_market(problem.source))


def build_rhs(problem: ProblemSpec, n: int) -> np.ndarray:
    if problem.rhs == "constant":
        return np.full(n, float(problem.rhs_value))
    if problem.rhs == "ramp":
        return np.arange(n, dtype=np.float64) / max(n, 1)
    return np.random.default_rng(problem.seed).random(n)


def sequential_oracle(problem, iterations: int = 1, matrix: Optional[CsrMatrix] = None,
                      rhs: Optional[np.ndarray] = None) -> np.ndarray:
    """Apply the plain CRS kernel ``iterations`` times, feeding C back as B."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    a = matrix if matrix is not None else build_matrix(problem)
    if iterations > 1 and a.n_rows != a.n_cols:
        raise ValueError("repeated application needs a square matrix")
    b = rhs if rhs is not None else build_rhs(problem, a.n_cols)
    c = spmv(a, b)
    for _ in range(iterations - 1):
        c = spmv(a, c)
    return c
