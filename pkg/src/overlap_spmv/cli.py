"""Command-line front end: ``overlap-spmv <subcommand> ...``.

Exit status: 0 on success, 1 on invalid input or arguments, 2 when a run
fails (rank failure, timeout, oracle mismatch, allocation failure).
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .bench import (
    DEFAULT_TRIAD_LENGTH,
    SUITE_HELP,
    OracleMismatch,
    SuiteError,
    bench_suite,
    parse_suite,
    records_to_json,
    triad_bench,
    triad_to_json,
    write_csv,
)
from .engine import TIMEOUT_ENV, ExecConfig, Mode, TransportSpec, run_benchmark
from .partition import build_all_plans, check_consistency, exchange_volume, partition_by_nonzeros
from .perfmodel import balance_report
from .sparse import coo_to_csr, matrix_bandwidth, permute, rcm_permutation
from .workload import (
    build_matrix,
    build_rhs,
    gen_block_band,
    gen_stencil7,
    parse_source,
    read_matrix_market,
    sequential_oracle,
    write_matrix_market,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad arguments; we reserve 2 for runtime failures
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _source_help() -> str:
    return (
        "Matrix Market file or generator string such as "
        "'stencil7:nx=32,ny=32,nz=32' or 'block_band:dim=50000,target_nnzr=15'"
    )


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ranks", type=int, default=1, help="number of ranks (default 1)")
    p.add_argument("--workers", type=int, default=1, help="worker threads per rank (default 1)")
    p.add_argument("--mode", action="append", default=None,
                   help="vector_no_overlap|vector_naive_overlap|task_mode (aliases vector, naive, "
                        "task, or 'all'); repeat or comma-separate; default all")
    p.add_argument("--transport", default="inprocess", choices=["inprocess", "socket", "delayed"],
                   help="message transport (default inprocess)")
    p.add_argument("--progress", choices=["eager", "on-wait"], default=None,
                   help="when in-process messages move: eagerly on send, or only inside "
                        "wait (default eager; on-wait for delayed)")
    p.add_argument("--latency-us", type=float, default=0.0,
                   help="delayed transport: fixed delay per message in microseconds")
    p.add_argument("--per-byte-ns", type=float, default=0.0,
                   help="delayed transport: extra delay per payload byte in nanoseconds")
    p.add_argument("--iterations", type=int, default=10,
                   help="timed spMVMs after one untimed warm-up (default 10)")
    p.add_argument("--seed", type=int, default=0, help="RHS and generator seed")
    p.add_argument("--rhs", choices=["uniform", "constant", "ramp"], default="uniform",
                   help="RHS fill rule (default uniform)")
    p.add_argument("--timeout", type=float, default=None,
                   help=f"per-epoch deadlock timeout in seconds (default ${TIMEOUT_ENV} or 60)")
    p.add_argument("--bandwidth", type=float, default=None,
                   help="memory bandwidth in GB/s for the model bound column")
    p.add_argument("--kappa", type=float, default=0.0, help="RHS reload bytes for the model")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="overlap-spmv",
                     description="Distributed CRS spMVM with communication overlap.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("spmv", help="run one configuration and check it against the oracle")
    p.add_argument("source", help=_source_help())
    _add_run_flags(p)
    p.add_argument("--debug-log", action="store_true",
                   help="print the in-process message log (epoch, ranks, bytes, times)")
    p.add_argument("--json", action="store_true", help="print records as JSON")

    p = sub.add_parser("bench", help="run a benchmark suite and write CSV",
                       description=SUITE_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("suite", help="suite spec file")
    p.add_argument("-o", "--output", default=None, help="output file (default stdout)")
    p.add_argument("--json", action="store_true", help="write JSON instead of CSV")

    p = sub.add_parser("triad", help="measure memory bandwidth with a triad loop")
    p.add_argument("--length", type=int, default=DEFAULT_TRIAD_LENGTH,
                   help=f"elements per array (default {DEFAULT_TRIAD_LENGTH})")
    p.add_argument("--repetitions", type=int, default=5, help="timed passes, best is kept (>= 3)")
    p.add_argument("--workers", type=int, default=1, help="concurrent chunks (default 1)")
    p.add_argument("--json", action="store_true", help="print JSON")

    p = sub.add_parser("model", help="code balance and bandwidth bound of the CRS kernel")
    p.add_argument("--nnzr", type=float, required=True, help="average nonzeros per row")
    p.add_argument("--kappa", type=float, default=0.0, help="RHS reload bytes per inner iteration")
    p.add_argument("--bandwidth", type=float, default=None, help="memory bandwidth in GB/s")
    p.add_argument("--measured", type=float, default=None,
                   help="measured GFlop/s; reports effective bandwidth and implied kappa")
    p.add_argument("--split", action="store_true", help="result written twice (local/remote)")
    p.add_argument("--json", action="store_true", help="print JSON")

    p = sub.add_parser("plan", help="show the partition and halo exchange plan")
    p.add_argument("source", help=_source_help())
    p.add_argument("--ranks", type=int, required=True, help="number of ranks")
    p.add_argument("--seed", type=int, default=0, help="generator seed")

    p = sub.add_parser("gen", help="write a generated matrix in Matrix Market format")
    p.add_argument("generator", choices=["stencil7", "block_band"])
    p.add_argument("-o", "--output", required=True, help="output .mtx file")
    p.add_argument("--nx", type=int, default=16, help="stencil7: grid points in x")
    p.add_argument("--ny", type=int, default=16, help="stencil7: grid points in y")
    p.add_argument("--nz", type=int, default=16, help="stencil7: grid points in z")
    p.add_argument("--dim", type=int, default=50000, help="block_band: dimension")
    p.add_argument("--block", type=int, default=500, help="block_band: block size")
    p.add_argument("--inner-band", type=int, default=8, help="block_band: band half-width")
    p.add_argument("--outer-stride", type=int, default=3,
                   help="block_band: offset of the outer bands in blocks")
    p.add_argument("--target-nnzr", type=float, default=15.0,
                   help="block_band: average nonzeros per row")
    p.add_argument("--seed", type=int, default=0, help="block_band: random seed")

    p = sub.add_parser("rcm", help="reorder a Matrix Market file with reverse Cuthill-McKee")
    p.add_argument("input", help="input .mtx file")
    p.add_argument("-o", "--output", required=True, help="reordered .mtx file")
    p.add_argument("--perm", default=None, help="also write the permutation (one index per line)")
    return parser


def _modes(values: Optional[List[str]]) -> List[Mode]:
    if not values:
        return list(Mode)
    out: List[Mode] = []
    for v in values:
        for item in filter(None, (s.strip() for s in v.split(","))):
            for m in (list(Mode) if item == "all" else [Mode.parse(item)]):
                if m not in out:
                    out.append(m)
    return out


def _print_table(rows: Sequence[dict], cols: Sequence[str]) -> None:
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)

    cells = [[fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for row in cells:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)))


def cmd_spmv(args) -> int:
    problem = parse_source(args.source, rhs=args.rhs, seed=args.seed)
    transport = TransportSpec(kind=args.transport, progress=args.progress,
                              base_latency_us=args.latency_us, per_byte_ns=args.per_byte_ns,
                              debug=args.debug_log)
    cfg = ExecConfig(modes=_modes(args.mode), n_ranks=args.ranks, workers_per_rank=args.workers,
                     transport=transport, iterations=args.iterations, seed=args.seed,
                     timeout_s=args.timeout)
    cfg.validate()
    a = build_matrix(problem)
    b = build_rhs(problem, a.n_cols)
    expected = sequential_oracle(problem, args.iterations, matrix=a, rhs=b)
    scale = max(float(np.max(np.abs(expected))) if expected.size else 0.0, np.finfo(float).tiny)
    records = run_benchmark(cfg, a, rhs=b, bandwidth_gbs=args.bandwidth, kappa=args.kappa,
                            matrix_name=problem.name)
    rows = []
    for rec in records:
        row = rec.row()
        row["oracle_rel_err"] = float(np.max(np.abs(rec.result - expected), initial=0.0)) / scale
        rows.append(row)
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        _print_table(rows, ["mode", "n_ranks", "workers_per_rank", "transport", "median_s",
                            "gflops", "comm_bytes", "messages", "oracle_rel_err"])
    if args.debug_log:
        for rec in records:
            for line in getattr(rec, "log", []):
                print(line)
    bad = [r for r in rows if not r["oracle_rel_err"] <= 1e-12]
    if bad:
        names = ", ".join(r["mode"] for r in bad)
        raise OracleMismatch(f"result differs from the sequential oracle for: {names}")
    if not args.json:
        print(f"oracle check passed for {len(rows)} mode(s)")
    return EXIT_OK


def cmd_bench(args) -> int:
    with open(args.suite) as f:
        spec = parse_suite(f.read())

    def progress(rec):
        print(f"done {rec.mode} ranks={rec.n_ranks} workers={rec.workers_per_rank} "
              f"median={rec.median_s:.4g}s", file=sys.stderr)

    rows = bench_suite(spec, progress=progress)
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        if args.json:
            out.write(records_to_json(rows) + "\n")
        else:
            write_csv(rows, out)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_triad(args) -> int:
    res = triad_bench(args.length, args.repetitions, args.workers)
    if args.json:
        print(triad_to_json(res))
    else:
        print(f"length          {res.length}")
        print(f"workers         {res.workers}")
        print(f"best time       {res.best_s:.6f} s")
        print(f"raw bandwidth   {res.raw_gbs:.3f} GB/s")
        print(f"corrected x4/3 {res.corrected_gbs:.3f} GB/s")
    return EXIT_OK


def cmd_model(args) -> int:
    rep = balance_report(args.nnzr, args.kappa, args.split, args.bandwidth, args.measured)
    print(rep.to_json() if args.json else rep.to_text())
    return EXIT_OK


def cmd_plan(args) -> int:
    problem = parse_source(args.source, seed=args.seed)
    a = build_matrix(problem)
    part = partition_by_nonzeros(a, args.ranks)
    plans = build_all_plans(a, part)
    check_consistency(plans)
    vol = exchange_volume(plans)
    out = {
        "matrix": problem.name,
        "n_rows": a.n_rows,
        "n_nz": a.nnz,
        "row_start": part.row_start.tolist(),
        "ranks": [pl.summary() for pl in plans],
        "exchange_volume": {k: ({str(r): n for r, n in v.items()} if isinstance(v, dict) else v)
                            for k, v in vol.items()},
    }
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_gen(args) -> int:
    if args.generator == "stencil7":
        t = gen_stencil7(args.nx, args.ny, args.nz)
        note = f"stencil7 nx={args.nx} ny={args.ny} nz={args.nz}"
    else:
        t = gen_block_band(args.dim, args.block, args.inner_band, args.outer_stride,
                           args.target_nnzr, args.seed)
        note = (f"block_band dim={args.dim} block={args.block} inner_band={args.inner_band} "
                f"outer_stride={args.outer_stride} target_nnzr={args.target_nnzr} seed={args.seed}")
    a = coo_to_csr(t)
    write_matrix_market(args.output, a, comment=note)
    print(f"wrote {args.output}: {a.n_rows}x{a.n_cols}, {a.nnz} nonzeros")
    return EXIT_OK


def cmd_rcm(args) -> int:
    a = coo_to_csr(read_matrix_market(args.input))
    perm = rcm_permutation(a)
    b = permute(a, perm)
    write_matrix_market(args.output, b, comment="reverse Cuthill-McKee reordering")
    if args.perm:
        np.savetxt(args.perm, perm, fmt="%d")
    print(f"bandwidth {matrix_bandwidth(a)} -> {matrix_bandwidth(b)}")
    return EXIT_OK


COMMANDS = {
    "spmv": cmd_spmv,
    "bench": cmd_bench,
    "triad": cmd_triad,
    "model": cmd_model,
    "plan": cmd_plan,
    "gen": cmd_gen,
    "rcm": cmd_rcm,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    try:
        args, unknown = parser.parse_known_args(argv)
        if unknown:
            raise UsageError(f"unrecognized arguments: {' '.join(unknown)}")
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_INVALID

    try:
        return COMMANDS[args.command](args)
    except (OracleMismatch, RuntimeError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError, SuiteError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
