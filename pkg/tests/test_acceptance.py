"""Acceptance gate: one test per criterion, summarized at the end of the run."""

import statistics
import time

import numpy as np
import pytest

from overlap_spmv.bench import triad_bench
from overlap_spmv.engine import ExecConfig, Mode, TransportSpec, run_distributed
from overlap_spmv.partition import (
    build_all_plans,
    check_consistency,
    exchange_volume,
    partition_by_nonzeros,
)
from overlap_spmv.perfmodel import (
    BalanceInputs,
    b_load_count,
    code_balance,
    estimate_kappa,
    max_performance,
    per_row_extra_bytes,
)
from overlap_spmv.sparse import (
    CooTriples,
    coo_to_csr,
    matrix_bandwidth,
    permute,
    rcm_permutation,
    spmv,
)
from overlap_spmv.workload import (
    gen_block_band,
    gen_stencil7,
    read_matrix_market,
    sequential_oracle,
    write_matrix_market,
)

from oracles import check_plans, dense, random_triples


@pytest.fixture
def criterion(record_property):
    def declare(number, title):
        record_property("criterion", number)
        record_property("title", title)

        def detail(text):
            record_property("detail", text)

        return detail

    return declare


def test_c01_model_arithmetic(criterion):
    detail = criterion(1, "code-balance model arithmetic")
    bal = code_balance(BalanceInputs(15, 0))
    assert bal == 6.8
    p18 = max_performance(6.8, 18.1)
    p21 = max_performance(6.8, 21.2)
    assert abs(p18 - 2.662) <= 0.005
    assert abs(p21 - 3.118) <= 0.005
    kappa = estimate_kappa(2.25, 18.1, 15)
    assert abs(kappa - 2.5) <= 0.05
    loads = b_load_count(2.5, 15)
    assert round(loads) == 6
    extra = per_row_extra_bytes(kappa, 15)
    assert abs(extra - 37.3) <= 0.3
    detail(f"B={bal} P18.1={p18:.3f} P21.2={p21:.3f} kappa={kappa:.4f} "
           f"loads={loads:.4f} extra={extra:.2f}")


def test_c02_split_penalty(criterion):
    detail = criterion(2, "split-kernel penalty within [7%, 15%]")
    out = []
    for n in (7, 15):
        pen = 1 - code_balance(BalanceInputs(n)) / code_balance(BalanceInputs(n, split=True))
        out.append(f"N={n}: {pen:.2%}")
        assert 0.07 <= pen <= 0.15
    detail(", ".join(out))


ORACLE_MATRICES = [
    ("stencil7(16^3)", lambda: gen_stencil7(16, 16, 16)),
    ("stencil7(32^3)", lambda: gen_stencil7(32, 32, 32)),
    ("block_band(5e4, 15)", lambda: gen_block_band(50_000, target_nnzr=15, seed=0)),
]


def test_c03_oracle_equivalence(criterion):
    detail = criterion(3, "all modes x ranks x workers x transports match the oracle")
    t0 = time.perf_counter()
    worst, runs = 0.0, 0
    for name, gen in ORACLE_MATRICES:
        a = coo_to_csr(gen())
        b = np.random.default_rng(0).random(a.n_cols)
        expected = sequential_oracle(None, 1, matrix=a, rhs=b)
        scale = np.max(np.abs(expected))
        for kind in ("inprocess", "socket"):
            for n in (1, 2, 4, 8):
                plans = build_all_plans(a, partition_by_nonzeros(a, n))
                for w in (1, 2, 4):
                    cfg = ExecConfig(modes=list(Mode), n_ranks=n, workers_per_rank=w,
                                     transport=TransportSpec(kind), iterations=1)
                    for run in run_distributed(a, b, cfg, plans):
                        runs += 1
                        err = np.max(np.abs(run.result - expected)) / scale
                        worst = max(worst, err)
                        assert err <= 1e-12, (name, kind, n, w, run.mode, err)
                        if n == 1 and run.mode is Mode.VECTOR_NO_OVERLAP:
                            assert np.array_equal(run.result, expected), (name, kind, w)
    elapsed = time.perf_counter() - t0
    detail(f"{runs} runs, worst relative error {worst:.2e}, {elapsed:.0f}s")
    assert elapsed < 300


def _overlap_attempt(a, b, rounds=6, iterations=4):
    """Interleaved calibration / delayed rounds; medians over all iterations."""
    times = {key: {m: [] for m in Mode} for key in ("cal", "on-wait", "eager")}

    def run(spec, key):
        cfg = ExecConfig(modes=list(Mode), n_ranks=2, workers_per_rank=1, transport=spec,
                         iterations=iterations)
        for r in run_distributed(a, b, cfg):
            times[key][r.mode] += r.iter_times

    for _ in range(rounds):
        run(TransportSpec("inprocess", progress="on-wait"), "cal")
        t_comm = statistics.median(times["cal"][Mode.VECTOR_NO_OVERLAP])
        for progress in ("on-wait", "eager"):
            run(TransportSpec("delayed", progress=progress, base_latency_us=t_comm * 1e6),
                progress)
    med = {k: {m: statistics.median(v) for m, v in d.items()} for k, d in times.items()}
    cal, ow, eg = med["cal"], med["on-wait"], med["eager"]
    t_compute = cal[Mode.VECTOR_NO_OVERLAP]
    t_comm = t_compute
    no, naive, task = (ow[m] for m in Mode)
    checks = {
        "no_overlap >= 0.9(Tc+Tk)": no >= 0.9 * (t_comm + t_compute),
        "task <= 1.25 max": task <= 1.25 * max(t_comm, cal[Mode.TASK_MODE]),
        "task beats no_overlap by 25%": task <= 0.75 * no,
        "naive on-wait within 15%": abs(naive - no) <= 0.15 * no,
        "naive eager improves 20%": eg[Mode.VECTOR_NAIVE_OVERLAP] <= 0.8 * no,
    }
    summary = (f"Tcompute={t_compute * 1e3:.1f}ms task_cal={cal[Mode.TASK_MODE] * 1e3:.1f}ms "
               f"no={no * 1e3:.1f} naive={naive * 1e3:.1f} task={task * 1e3:.1f} "
               f"naive_eager={eg[Mode.VECTOR_NAIVE_OVERLAP] * 1e3:.1f}ms")
    return checks, summary


def test_c04_overlap_effectiveness(criterion):
    detail = criterion(4, "delay-injected overlap effectiveness")
    t0 = time.perf_counter()
    a = coo_to_csr(gen_stencil7(112, 112, 112))
    b = np.random.default_rng(0).random(a.n_cols)
    notes = []
    # timing on a shared machine drifts between rounds; one retry of the
    # whole measurement is allowed and both attempts are reported
    for attempt in (1, 2):
        checks, summary = _overlap_attempt(a, b)
        failed = [k for k, ok in checks.items() if not ok]
        notes.append(f"attempt {attempt}: {summary}" + (f" failed {failed}" if failed else ""))
        if not failed:
            break
    elapsed = time.perf_counter() - t0
    detail("; ".join(notes) + f"; {elapsed:.0f}s")
    assert not failed, notes
    assert elapsed < 120


def test_c05_comm_plan_correctness(criterion):
    detail = criterion(5, "communication plans on 20 random matrices x ranks {2,3,5}")
    t0 = time.perf_counter()
    checked = 0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        n = int(rng.integers(50, 2001))
        density = float(rng.uniform(1.0, 12.0)) / n
        rows, cols, vals = random_triples(rng, n, n, density, diag=bool(seed % 2))
        a = coo_to_csr(CooTriples(rows, cols, vals, n, n))
        d = a.to_dense()
        for n_ranks in (2, 3, 5):
            plans = build_all_plans(a, partition_by_nonzeros(a, n_ranks))
            check_consistency(plans)
            brute = check_plans(d, plans, rng.random(n))
            assert exchange_volume(plans)["total_bytes"] == brute
            checked += 1
    elapsed = time.perf_counter() - t0
    detail(f"{checked} plan sets, {elapsed:.1f}s")
    assert elapsed < 60


def _balance_matrices():
    yield "stencil7(16^3)", coo_to_csr(gen_stencil7(16, 16, 16))
    yield "stencil7(7x5x3)", coo_to_csr(gen_stencil7(7, 5, 3))
    yield "block_band(5e4)", coo_to_csr(gen_block_band(50_000, seed=0))
    rng = np.random.default_rng(5)
    for k in range(5):
        n = int(rng.integers(10, 800))
        rows, cols, vals = random_triples(rng, n, n, float(rng.uniform(0.001, 0.05)))
        yield f"random{k}", coo_to_csr(CooTriples(rows, cols, vals, n, n))
    # skewed: one dense row among sparse ones
    n = 300
    rows = np.concatenate((np.arange(n), np.full(n, 17)))
    cols = np.concatenate((np.arange(n), np.arange(n)))
    yield "skewed", coo_to_csr(CooTriples(rows, cols, np.ones(rows.size), n, n))


def test_c06_nonzero_balance(criterion):
    detail = criterion(6, "max rank nnz <= mean + max row nnz")
    worst = 0.0
    for name, a in _balance_matrices():
        for n_ranks in range(1, 17):
            part = partition_by_nonzeros(a, n_ranks)
            per = np.diff(a.row_ptr[part.row_start])
            mean = a.nnz / n_ranks
            assert per.max() <= mean + a.max_row_nnz(), (name, n_ranks)
            worst = max(worst, (per.max() - mean) / a.max_row_nnz())
    detail(f"worst excess {worst:.2f} x max row nnz")


def _scrambled(rows, cols, n, seed):
    label = np.random.default_rng(seed).permutation(n)
    return coo_to_csr(CooTriples(label[rows], label[cols], np.ones(len(rows)), n, n))


def _path(n):
    i = np.arange(n - 1)
    return (np.concatenate((i, i + 1, np.arange(n))),
            np.concatenate((i + 1, i, np.arange(n))))


def _grid(nx, ny):
    i = np.arange(nx * ny)
    x, y = i % nx, i // nx
    rows, cols = [i], [i]
    for ok, step in ((x + 1 < nx, 1), (y + 1 < ny, nx)):
        rows += [i[ok], i[ok] + step]
        cols += [i[ok] + step, i[ok]]
    return np.concatenate(rows), np.concatenate(cols)


def test_c07_rcm(criterion):
    detail = criterion(7, "RCM bandwidth on scrambled paths and 2D grids")
    notes = []
    for n, seed in ((10, 0), (257, 1), (5000, 2)):
        a = _scrambled(*_path(n), n, seed)
        after = matrix_bandwidth(permute(a, rcm_permutation(a)))
        assert after == 1
    notes.append("paths -> 1")
    for nx, ny, seed in ((10, 10, 3), (30, 7, 4), (64, 48, 5)):
        rows, cols = _grid(nx, ny)
        for a in (_scrambled(rows, cols, nx * ny, seed),
                  coo_to_csr(CooTriples(rows, cols, np.ones(len(rows)), nx * ny, nx * ny))):
            before = matrix_bandwidth(a)
            after = matrix_bandwidth(permute(a, rcm_permutation(a)))
            assert after <= before
        notes.append(f"grid {nx}x{ny}: {before}->{after}")
    detail(", ".join(notes))


SYMMETRIC_FIXTURE = """%%MatrixMarket matrix coordinate real symmetric
% hand-written 4x4, lower triangle
4 4 6
1 1 4.0
2 1 -1.0
2 2 4.0
4 2 -2.5
3 3 1.0e+02
4 4 0.125
"""


def test_c08_matrix_market_round_trip(criterion, tmp_path):
    detail = criterion(8, "Matrix Market round trip and symmetric expansion")
    gens = {
        "stencil7(16^3)": gen_stencil7(16, 16, 16),
        "stencil7(5x3x2)": gen_stencil7(5, 3, 2),
        "block_band(5e4)": gen_block_band(50_000, seed=0),
        "block_band(2000,7)": gen_block_band(2000, block=100, target_nnzr=7, seed=9),
    }
    for name, t in gens.items():
        a = coo_to_csr(t)
        path = tmp_path / "m.mtx"
        write_matrix_market(path, a)
        assert coo_to_csr(read_matrix_market(path)).same_as(a), name
    fixture = tmp_path / "sym.mtx"
    fixture.write_text(SYMMETRIC_FIXTURE)
    t = read_matrix_market(fixture)
    expect = np.array([
        [4.0, -1.0, 0.0, 0.0],
        [-1.0, 4.0, 0.0, -2.5],
        [0.0, 0.0, 100.0, 0.0],
        [0.0, -2.5, 0.0, 0.125],
    ])
    assert len(t) == 8
    assert np.array_equal(dense(t.rows, t.cols, t.vals, 4, 4), expect)
    detail(f"{len(gens)} generated matrices, 4x4 symmetric fixture")


def test_c09_triad(criterion):
    detail = criterion(9, "triad correction factor and values")
    out = []
    for workers in (1, 4):
        arrays = []
        res = triad_bench(5_000_000, repetitions=3, workers=workers, scalar=3.0, arrays=arrays)
        assert res.corrected_gbs / res.raw_gbs == 4 / 3
        assert np.isfinite(res.raw_gbs) and res.raw_gbs > 0
        a, b, c = arrays
        k = np.random.default_rng(workers).integers(0, res.length, 100)
        assert np.array_equal(a[k], b[k] + 3.0 * c[k])
        out.append(f"w={workers}: raw {res.raw_gbs:.1f} GB/s, corrected {res.corrected_gbs:.1f}")
    detail("; ".join(out))


def test_c10_hardware_bound_results(criterion):
    criterion(10, "absolute cluster performance figures")
    pytest.skip("hardware-bound measurements; the bench CSV harness covers them on real nodes")
