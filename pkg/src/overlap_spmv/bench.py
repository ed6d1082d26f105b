"""Triad bandwidth microbenchmark and the benchmark-suite harness."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, TextIO

import numba
import numpy as np

from .engine import ExecConfig, Mode, RunRecord, TransportSpec, run_benchmark
from .workload import ProblemSpec, build_matrix, build_rhs, parse_source, sequential_oracle

__all__ = [
    "TriadResult",
    "triad_bench",
    "SuiteSpec",
    "SuiteError",
    "OracleMismatch",
    "parse_suite",
    "bench_suite",
    "SUITE_COLUMNS",
    "write_csv",
    "csv_text",
    "triad_to_json",
    "records_to_json",
    "WRITE_ALLOCATE_FACTOR",
]

# the store to ``a`` first loads the line (write allocate), so the hardware
# moves four arrays' worth of data where the triad counts three
WRITE_ALLOCATE_FACTOR = Fraction(4, 3)
DEFAULT_TRIAD_LENGTH = 10**8


@dataclass(frozen=True)
class TriadResult:
    length: int
    raw_gbs: float
    corrected_gbs: float
    repetitions: int
    workers: int
    best_s: float


@numba.njit(nogil=True, cache=True)
def _triad_chunk(a, b, c, s, lo, hi):
    for i in range(lo, hi):
        a[i] = b[i] + s * c[i]


def triad_bench(length: int = DEFAULT_TRIAD_LENGTH, repetitions: int = 5, workers: int = 1,
                scalar: float = 3.0, seed: int = 0, arrays: Optional[list] = None) -> TriadResult:
    """Time ``a = b + s*c`` and report the best-of-``repetitions`` bandwidth.

    ``arrays`` receives ``[a, b, c]`` after the run when given, so callers
    can inspect the result.
    """
    if length < 1:
        raise ValueError(f"length must be positive, got {length}")
    if repetitions < 3:
        raise ValueError(f"repetitions must be >= 3, got {repetitions}")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    try:
        rng = np.random.default_rng(seed)
        b = rng.random(length)
        c = rng.random(length)
        a = np.zeros(length)
    except MemoryError:
        gb = 3 * 8 * length / 1e9
        raise MemoryError(
            f"cannot allocate three arrays of {length} doubles ({gb:.2f} GB); "
            "choose a smaller --length"
        ) from None

    bounds = np.linspace(0, length, workers + 1).astype(np.int64)
    _triad_chunk(a, b, c, scalar, 0, min(length, 1))  # compile outside the timing
    best = math.inf
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for _ in range(repetitions):
            t0 = time.perf_counter()
            if workers == 1:
                _triad_chunk(a, b, c, scalar, 0, length)
            else:
                futs = [
                    pool.submit(_triad_chunk, a, b, c, scalar, int(bounds[k]), int(bounds[k + 1]))
                    for k in range(workers)
                ]
                for f in futs:
                    f.result()
            best = min(best, time.perf_counter() - t0)

    raw = 3 * 8 * length / best / 1e9
    if arrays is not None:
        arrays[:] = [a, b, c]
    return TriadResult(
        length=length,
        raw_gbs=raw,
        corrected_gbs=raw * float(WRITE_ALLOCATE_FACTOR),
        repetitions=repetitions,
        workers=workers,
        best_s=best,
    )


# ---------------------------------------------------------------------------
# suites

SUITE_KEYS = {
    "matrix": "generator string (stencil7:nx=16,ny=16,nz=16) or Matrix Market path",
    "modes": "comma list of vector_no_overlap, vector_naive_overlap, task_mode (or 'all')",
    "ranks": "comma list of rank counts",
    "workers": "comma list of worker threads per rank",
    "transport": "inprocess, socket or delayed",
    "progress": "eager or on-wait",
    "base_latency_us": "delayed transport: fixed delay per message",
    "per_byte_ns": "delayed transport: delay per payload byte",
    "iterations": "timed spMVMs per configuration (one extra warm-up is not timed)",
    "seed": "RHS and generator seed",
    "rhs": "uniform, constant or ramp",
    "bandwidth_gbs": "memory bandwidth for the model bound column (optional)",
    "kappa": "extra RHS bytes per inner iteration for the model (default 0)",
    "name": "label written to the matrix column",
}

SUITE_HELP = "bench spec file: one 'key = value' per line, '#' starts a comment.\nkeys:\n" + "\n".join(
    f"  {k:<16} {v}" for k, v in SUITE_KEYS.items()
)

SUITE_COLUMNS = RunRecord.columns() + ["efficiency", "below_half_efficiency"]


class SuiteError(ValueError):
    pass


class OracleMismatch(RuntimeError):
    """A timed run disagreed with the sequential oracle."""


@dataclass
class SuiteSpec:
    problem: ProblemSpec
    modes: List[Mode]
    ranks: List[int]
    workers: List[int]
    transport: TransportSpec
    iterations: int = 10
    bandwidth_gbs: Optional[float] = None
    kappa: float = 0.0
    name: Optional[str] = None

    def configs(self) -> Iterable[ExecConfig]:
        for n, w in itertools.product(self.ranks, self.workers):
            yield ExecConfig(
                modes=list(self.modes),
                n_ranks=n,
                workers_per_rank=w,
                transport=self.transport,
                iterations=self.iterations,
                seed=self.problem.seed,
            )


def _int_list(key: str, text: str) -> List[int]:
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise SuiteError(f"{key}: expected comma-separated integers, got {text!r}") from None
    if not out:
        raise SuiteError(f"{key}: empty list")
    return out


def parse_suite(text: str) -> SuiteSpec:
    """Parse the flat ``key = value`` suite format (see ``SUITE_HELP``)."""
    kv: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq:
            raise SuiteError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key not in SUITE_KEYS:
            raise SuiteError(f"line {lineno}: unknown key {key!r}")
        if key in kv:
            raise SuiteError(f"line {lineno}: duplicate key {key!r}")
        kv[key] = value.strip()
    if "matrix" not in kv:
        raise SuiteError("missing required key 'matrix'")

    try:
        problem = parse_source(
            kv["matrix"], rhs=kv.get("rhs", "uniform"), seed=int(kv.get("seed", 0))
        )
        mode_text = kv.get("modes", "all")
        if mode_text.strip() == "all":
            modes = list(Mode)
        else:
            modes = [Mode.parse(m.strip()) for m in mode_text.split(",") if m.strip()]
        transport = TransportSpec(
            kind=kv.get("transport", "inprocess"),
            progress=kv.get("progress"),
            base_latency_us=float(kv.get("base_latency_us", 0.0)),
            per_byte_ns=float(kv.get("per_byte_ns", 0.0)),
        )
        spec = SuiteSpec(
            problem=problem,
            modes=modes,
            ranks=_int_list("ranks", kv.get("ranks", "1")),
            workers=_int_list("workers", kv.get("workers", "1")),
            transport=transport,
            iterations=int(kv.get("iterations", 10)),
            bandwidth_gbs=float(kv["bandwidth_gbs"]) if "bandwidth_gbs" in kv else None,
            kappa=float(kv.get("kappa", 0.0)),
            name=kv.get("name"),
        )
    except SuiteError:
        raise
    except ValueError as exc:
        raise SuiteError(str(exc)) from None
    problems = transport.errors()
    for cfg in spec.configs():
        problems += [p for p in cfg.errors() if p not in problems]
    if problems:
        raise SuiteError("; ".join(problems))
    return spec


def _mark_efficiency(records: Sequence[RunRecord]) -> List[Dict[str, object]]:
    """Parallel efficiency against the one-rank run of the same mode and workers.

    Within each (mode, workers) series, ordered by rank count, only the first
    row whose efficiency drops below 0.5 is flagged.
    """
    rows = [r.row() for r in records]
    base = {
        (r.mode, r.workers_per_rank): r.gflops for r in records if r.n_ranks == 1
    }
    for row in rows:
        g1 = base.get((row["mode"], row["workers_per_rank"]))
        row["efficiency"] = row["gflops"] / (row["n_ranks"] * g1) if g1 else None
        row["below_half_efficiency"] = False
    series: Dict[tuple, List[Dict[str, object]]] = {}
    for row in rows:
        series.setdefault((row["mode"], row["workers_per_rank"]), []).append(row)
    for group in series.values():
        for row in sorted(group, key=lambda r: r["n_ranks"]):
            if row["efficiency"] is not None and row["efficiency"] < 0.5:
                row["below_half_efficiency"] = True
                break
    return rows


def bench_suite(spec: SuiteSpec, rtol: float = 1e-12, progress=None) -> List[Dict[str, object]]:
    """Run every (ranks, workers) configuration and all modes; validate, then report.

    Each result is compared with the sequential oracle (same number of
    repeated applications) before it is accepted; a mismatch raises
    :class:`OracleMismatch` naming the configuration.
    """
    a = build_matrix(spec.problem)
    b = build_rhs(spec.problem, a.n_cols)
    name = spec.name or spec.problem.name
    # the warm-up result is discarded; timed iterations feed C back as B
    expected = sequential_oracle(spec.problem, spec.iterations, matrix=a, rhs=b)
    scale = max(float(np.max(np.abs(expected))), np.finfo(float).tiny)

    records: List[RunRecord] = []
    for cfg in spec.configs():
        for rec in run_benchmark(cfg, a, rhs=b, bandwidth_gbs=spec.bandwidth_gbs,
                                 kappa=spec.kappa, matrix_name=name):
            err = float(np.max(np.abs(rec.result - expected))) / scale
            if not err <= rtol:
                raise OracleMismatch(
                    f"oracle mismatch for mode={rec.mode} ranks={rec.n_ranks} "
                    f"workers={rec.workers_per_rank} transport={rec.transport}: "
                    f"relative error {err:.3e} > {rtol:g}"
                )
            records.append(rec)
            if progress is not None:
                progress(rec)
    return _mark_efficiency(records)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(rows: Sequence[Dict[str, object]], out: TextIO) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(SUITE_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in SUITE_COLUMNS])


def csv_text(rows: Sequence[Dict[str, object]]) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()


def records_to_json(rows: Sequence[Dict[str, object]]) -> str:
    return json.dumps([{c: row.get(c) for c in SUITE_COLUMNS} for row in rows], indent=2)


def triad_to_json(res: TriadResult) -> str:
    return json.dumps(asdict(res), indent=2)
