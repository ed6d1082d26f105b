import csv
import io
import json

import numpy as np
import pytest

from overlap_spmv import bench
from overlap_spmv.bench import (
    SUITE_COLUMNS,
    OracleMismatch,
    SuiteError,
    _mark_efficiency,
    bench_suite,
    parse_suite,
    records_to_json,
    triad_bench,
    write_csv,
)
from overlap_spmv.engine import Mode, RunRecord
from overlap_spmv.partition import build_all_plans, exchange_volume, partition_by_nonzeros
from overlap_spmv.sparse import coo_to_csr
from overlap_spmv.workload import gen_stencil7

SUITE = """
# small smoke suite
matrix = stencil7:nx=16,ny=16,nz=16
modes = all
ranks = 1,2
transport = inprocess
iterations = 2
"""

HEADER = (
    "mode,n_ranks,workers_per_rank,transport,matrix,n_rows,n_nz,iterations,median_s,min_s,"
    "gflops,model_bound_gflops,model_bw_gbs,comm_bytes,messages,gather_s,comm_s,local_s,"
    "remote_s,efficiency,below_half_efficiency"
)


def test_header_is_stable():
    assert ",".join(SUITE_COLUMNS) == HEADER


def test_triad_correction_and_values():
    arrays = []
    res = triad_bench(200_000, repetitions=3, workers=2, scalar=3.0, seed=1, arrays=arrays)
    assert res.corrected_gbs / res.raw_gbs == pytest.approx(4 / 3, rel=0, abs=1e-15)
    assert res.corrected_gbs == res.raw_gbs * 4 / 3
    a, b, c = arrays
    k = np.random.default_rng(0).integers(0, res.length, 100)
    assert np.array_equal(a[k], b[k] + 3.0 * c[k])
    assert np.isfinite(res.raw_gbs) and res.raw_gbs > 0


def test_triad_arguments():
    with pytest.raises(ValueError):
        triad_bench(1000, repetitions=2)
    with pytest.raises(ValueError):
        triad_bench(0)
    with pytest.raises(MemoryError, match="smaller --length"):
        triad_bench(10**13, repetitions=3)


def test_parse_suite_defaults_and_errors():
    spec = parse_suite("matrix = stencil7:nx=4,ny=4,nz=4\nmodes = task, vector\n")
    assert spec.modes == [Mode.TASK_MODE, Mode.VECTOR_NO_OVERLAP]
    assert spec.ranks == [1] and spec.workers == [1] and spec.iterations == 10
    for bad, msg in [
        ("modes = all\n", "matrix"),
        ("matrix = stencil7\nranks: 2\n", "line 2"),
        ("matrix = stencil7\ncolour = red\n", "unknown key"),
        ("matrix = stencil7\nranks = 1\nranks = 2\n", "duplicate"),
        ("matrix = stencil7\nranks = a,b\n", "integers"),
        ("matrix = stencil7\nranks = 0\ntransport = socket\nprogress = on-wait\n", "n_ranks"),
        ("matrix = stencil7\nmodes = hybrid\n", "unknown mode"),
    ]:
        with pytest.raises(SuiteError, match=msg):
            parse_suite(bad)


def test_suite_rows_validated_and_volume():
    spec = parse_suite(SUITE)
    rows = bench_suite(spec)
    assert len(rows) == 6
    a = coo_to_csr(gen_stencil7(16, 16, 16))
    for n in (1, 2):
        vol = exchange_volume(build_all_plans(a, partition_by_nonzeros(a, n)))
        assert all(r["comm_bytes"] == vol["total_bytes"] for r in rows if r["n_ranks"] == n)
    assert all(r["efficiency"] == 1.0 for r in rows if r["n_ranks"] == 1)
    buf = io.StringIO()
    write_csv(rows, buf)
    parsed = list(csv.DictReader(io.StringIO(buf.getvalue())))
    assert len(parsed) == 6 and list(parsed[0]) == SUITE_COLUMNS
    assert json.loads(records_to_json(rows))[0]["mode"] == "vector_no_overlap"


def test_suite_aborts_on_mismatch(monkeypatch):
    real = bench.run_benchmark

    def corrupt(*args, **kw):
        recs = real(*args, **kw)
        recs[-1].result[0] += 1.0
        return recs

    monkeypatch.setattr(bench, "run_benchmark", corrupt)
    spec = parse_suite("matrix = stencil7:nx=4,ny=4,nz=4\nranks = 2\niterations = 1\n")
    with pytest.raises(OracleMismatch, match="mode=task_mode ranks=2 workers=1"):
        bench_suite(spec)


def fake(mode, n, gflops, workers=1):
    return RunRecord(mode, n, workers, "inprocess", "m", 1, 1, 1, 1.0, 1.0, gflops, None,
                     0.0, 0, 0, 0.0, 0.0, 0.0, 0.0)


def test_half_efficiency_marker():
    recs = [fake("task_mode", n, g) for n, g in [(1, 1.0), (2, 1.8), (4, 2.4), (8, 3.0), (16, 3.2)]]
    recs.append(fake("vector_no_overlap", 2, 1.0))  # no single-rank baseline
    rows = _mark_efficiency(recs)
    eff = [r["efficiency"] for r in rows]
    assert eff[:5] == pytest.approx([1.0, 0.9, 0.6, 0.375, 0.2])
    assert [r["below_half_efficiency"] for r in rows] == [False, False, False, True, False, False]
    assert rows[5]["efficiency"] is None
