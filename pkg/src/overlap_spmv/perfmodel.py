"""Code-balance model for the CRS spMVM kernel.

Per inner-loop iteration the kernel streams 8 bytes of ``val`` and 4 bytes
of ``col_idx``; the result update costs 16 bytes per row (write allocate plus
evict) and the RHS at least 8 bytes per row.  ``kappa`` collects the extra
bytes per inner iteration caused by reloading the RHS.  Two flops per inner
iteration give::

    balance       = 6 + 12/nnzr + kappa/2   bytes/flop
    balance_split = 6 + 20/nnzr + kappa/2   (result written twice)

Units are decimal: GB/s = 1e9 bytes/s and GFlop/s = 1e9 flop/s.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

from .sparse import CsrMatrix

__all__ = [
    "BalanceInputs",
    "BalanceReport",
    "ModelViolation",
    "code_balance",
    "max_performance",
    "estimate_kappa",
    "b_load_count",
    "per_row_extra_bytes",
    "model_traffic",
    "balance_report",
]

VAL_BYTES = 8
IDX_BYTES = 4
RESULT_BYTES_PER_ROW = 16
RHS_BYTES = 8


class ModelViolation(ValueError):
    """A measurement implies traffic below the model's floor (kappa < 0)."""

    def __init__(self, message: str, kappa: float):
        super().__init__(message)
        self.kappa = kappa


@dataclass(frozen=True)
class BalanceInputs:
    n_nzr: float
    kappa: float = 0.0
    split: bool = False

    def __post_init__(self):
        if not self.n_nzr > 0:
            raise ValueError(f"n_nzr must be positive, got {self.n_nzr}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be nonnegative, got {self.kappa}")


def _row_term(split: bool) -> float:
    # result update (16, or 32 when written twice) plus one RHS load (8),
    # per row, divided by 2 flops
    return (RESULT_BYTES_PER_ROW * (2 if split else 1) + RHS_BYTES) / 2


def code_balance(inputs: BalanceInputs) -> float:
    """Bytes of main-memory traffic per flop."""
    n, k = inputs.n_nzr, inputs.kappa
    if not n > 0:
        raise ValueError(f"n_nzr must be positive, got {n}")
    return (VAL_BYTES + IDX_BYTES) / 2 + _row_term(inputs.split) / n + k / 2


def max_performance(balance: float, bandwidth: float) -> float:
    """Bandwidth-limited GFlop/s for a code balance (bytes/flop) and GB/s."""
    if not balance > 0 or not bandwidth > 0:
        raise ValueError("balance and bandwidth must be positive")
    return bandwidth / balance


def estimate_kappa(
    measured_gflops: float, measured_bandwidth: float, n_nzr: float, split: bool = False
) -> float:
    """Solve the code balance for kappa given measured performance and bandwidth.

    Raises :class:`ModelViolation` (carrying the negative value) when the
    measurement implies less traffic than the kappa = 0 floor.
    """
    if not measured_gflops > 0 or not measured_bandwidth > 0 or not n_nzr > 0:
        raise ValueError("measured values and n_nzr must be positive")
    floor = code_balance(BalanceInputs(n_nzr, 0.0, split))
    kappa = 2.0 * (measured_bandwidth / measured_gflops - floor)
    if -1e-12 * floor <= kappa < 0:
        kappa = 0.0  # measurement sits on the floor up to rounding
    if kappa < 0:
        raise ModelViolation(
            f"implied balance {measured_bandwidth / measured_gflops:.4g} B/F is below "
            f"the model floor {floor:.4g} B/F (kappa={kappa:.4g})",
            kappa,
        )
    return kappa


def b_load_count(kappa: float, n_nzr: float) -> float:
    """How many times the RHS vector streams from memory in one spMVM.

    Each extra traversal adds ``8/n_nzr`` bytes per inner iteration.
    """
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    return 1.0 + kappa * n_nzr / RHS_BYTES


def per_row_extra_bytes(kappa: float, n_nzr: float) -> float:
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    return kappa * n_nzr


def model_traffic(a: CsrMatrix, split: bool = False) -> int:
    """Predicted bytes per spMVM with kappa = 0."""
    traffic = (
        a.nnz * (VAL_BYTES + IDX_BYTES)
        + a.n_rows * RESULT_BYTES_PER_ROW
        + a.n_cols * RHS_BYTES
    )
    if split:
        traffic += a.n_rows * RESULT_BYTES_PER_ROW
    return traffic


@dataclass
class BalanceReport:
    n_nzr: float
    kappa: float
    split: bool
    bytes_per_flop: float
    b_load_count: float
    per_row_extra_bytes: float
    bandwidth_gbs: Optional[float] = None
    predicted_max_gflops: Optional[float] = None
    measured_gflops: Optional[float] = None
    effective_bandwidth_gbs: Optional[float] = None
    kappa_estimate: Optional[float] = None
    diagnostic: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_text(self) -> str:
        def fmt(v):
            if v is None:
                return "-"
            if isinstance(v, bool):
                return "yes" if v else "no"
            return f"{v:.3f}" if isinstance(v, float) else str(v)

        rows = [
            ("N_nzr", fmt(self.n_nzr), ""),
            ("kappa", fmt(self.kappa), "bytes"),
            ("split kernel", fmt(self.split), ""),
            ("code balance", fmt(self.bytes_per_flop), "bytes/flop"),
            ("RHS loads per MVM", fmt(self.b_load_count), ""),
            ("extra RHS bytes per row", fmt(self.per_row_extra_bytes), "bytes"),
            ("bandwidth", fmt(self.bandwidth_gbs), "GB/s"),
            ("max performance", fmt(self.predicted_max_gflops), "GFlop/s"),
            ("measured performance", fmt(self.measured_gflops), "GFlop/s"),
            ("effective bandwidth", fmt(self.effective_bandwidth_gbs), "GB/s"),
            ("kappa estimate", fmt(self.kappa_estimate), "bytes"),
        ]
        width = max(len(r[0]) for r in rows)
        lines = [f"{name:<{width}}  {val:>10} {unit}".rstrip() for name, val, unit in rows]
        if self.diagnostic:
            lines.append(f"warning: {self.diagnostic}")
        return "\n".join(lines)


def balance_report(
    n_nzr: float,
    kappa: float = 0.0,
    split: bool = False,
    bandwidth: Optional[float] = None,
    measured_gflops: Optional[float] = None,
) -> BalanceReport:
    inputs = BalanceInputs(n_nzr, kappa, split)
    bal = code_balance(inputs)
    rep = BalanceReport(
        n_nzr=n_nzr,
        kappa=kappa,
        split=split,
        bytes_per_flop=bal,
        b_load_count=b_load_count(kappa, n_nzr),
        per_row_extra_bytes=per_row_extra_bytes(kappa, n_nzr),
        bandwidth_gbs=bandwidth,
    )
    if bandwidth is not None:
        rep.predicted_max_gflops = max_performance(bal, bandwidth)
    if measured_gflops is not None:
        rep.measured_gflops = measured_gflops
        rep.effective_bandwidth_gbs = measured_gflops * bal
        if bandwidth is not None:
            try:
                rep.kappa_estimate = estimate_kappa(measured_gflops, bandwidth, n_nzr, split)
            except ModelViolation as exc:
                rep.kappa_estimate = exc.kappa
                rep.diagnostic = str(exc)
    return rep
