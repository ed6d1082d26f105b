"""Distributed CRS sparse matrix-vector multiplication with communication overlap."""

from .bench import TriadResult, bench_suite, parse_suite, triad_bench
from .engine import (
    ExecConfig,
    Mode,
    RankRuntime,
    RunRecord,
    TransportSpec,
    run_benchmark,
    run_distributed,
)
from .partition import (
    CommPlan,
    PartitionMap,
    build_all_plans,
    build_comm_plan,
    exchange_volume,
    partition_by_nonzeros,
)
from .perfmodel import (
    BalanceInputs,
    BalanceReport,
    b_load_count,
    code_balance,
    estimate_kappa,
    max_performance,
    model_traffic,
    per_row_extra_bytes,
)
from .sparse import (
    CooTriples,
    CsrMatrix,
    coo_to_csr,
    csr_to_coo,
    matrix_bandwidth,
    permute,
    permute_vec,
    rcm_permutation,
    spmv,
    spmv_chunked,
    spmv_split,
)
from .workload import (
    ProblemSpec,
    gen_block_band,
    gen_stencil7,
    read_matrix_market,
    sequential_oracle,
    write_matrix_market,
)

__version__ = "0.1.0"
