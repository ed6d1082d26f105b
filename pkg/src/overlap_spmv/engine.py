"""Distributed spMVM over a pluggable transport.

Three schemes are provided:

``VECTOR_NO_OVERLAP``
    post receives, gather the send buffer, send, wait for everything, then
    one unsplit kernel over ``[owned | halo]``.
``VECTOR_NAIVE_OVERLAP``
    post receives, gather, nonblocking send, local part of the kernel, wait,
    remote part.  Whether the transfer overlaps the local part depends on the
    transport's progress model; the engine only fixes the order.
``TASK_MODE``
    the rank's own thread acts as communication agent and does nothing but
    transport calls, while ``workers_per_rank`` compute threads gather the
    send buffer, run the local part over nonzero-balanced row chunks, and
    run the remote part once the agent reports the halo complete.

Ranks run as threads sharing an :class:`InProcessFabric`, or as forked
processes connected by :class:`SocketTransport`.
"""

from __future__ import annotations

import contextlib
import enum
import logging
import multiprocessing as mp
import os
import queue as queue_mod
import socket
import threading
import time
import traceback
from dataclasses import dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .partition import (
    CommPlan,
    PartitionMap,
    build_all_plans,
    exchange_volume,
    partition_by_nonzeros,
)
from .perfmodel import BalanceInputs, code_balance, max_performance, model_traffic
from .sched import request_slice
from .sparse import CsrMatrix, crs_rows, nnz_balanced_cuts, spmv_chunked
from .transport import (
    InProcessFabric,
    Request,
    SocketTransport,
    Transport,
    connect_mesh,
)
from .workload import ProblemSpec, build_matrix, build_rhs

log = logging.getLogger(__name__)

__all__ = [
    "Mode",
    "TransportSpec",
    "ExecConfig",
    "ConfigError",
    "RankFailure",
    "EpochTimeout",
    "RankRuntime",
    "RunRecord",
    "DistributedRun",
    "run_vector_no_overlap",
    "run_vector_naive_overlap",
    "run_task_mode",
    "run_distributed",
    "run_benchmark",
    "default_timeout",
]

TIMEOUT_ENV = "OVERLAP_SPMV_TIMEOUT"
DEFAULT_TIMEOUT_S = 60.0
PHASES = ("gather", "comm", "local", "remote", "total")


def default_timeout() -> float:
    raw = os.environ.get(TIMEOUT_ENV)
    if raw is None:
        return DEFAULT_TIMEOUT_S
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError([f"{TIMEOUT_ENV}={raw!r} is not a number"]) from None
    if value <= 0:
        raise ConfigError([f"{TIMEOUT_ENV} must be positive"])
    return value


class Mode(enum.Enum):
    VECTOR_NO_OVERLAP = "vector_no_overlap"
    VECTOR_NAIVE_OVERLAP = "vector_naive_overlap"
    TASK_MODE = "task_mode"

    @classmethod
    def parse(cls, text: Union[str, "Mode"]) -> "Mode":
        if isinstance(text, Mode):
            return text
        key = text.strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {
            "vector": cls.VECTOR_NO_OVERLAP,
            "no_overlap": cls.VECTOR_NO_OVERLAP,
            "vectornooverlap": cls.VECTOR_NO_OVERLAP,
            "naive": cls.VECTOR_NAIVE_OVERLAP,
            "naive_overlap": cls.VECTOR_NAIVE_OVERLAP,
            "vectornaiveoverlap": cls.VECTOR_NAIVE_OVERLAP,
            "task": cls.TASK_MODE,
            "taskmode": cls.TASK_MODE,
        }
        if key in aliases:
            return aliases[key]
        for m in cls:
            if m.value == key:
                return m
        raise ValueError(
            f"unknown mode {text!r}; choose from {[m.value for m in cls]} or "
            "vector/naive/task"
        )


class ConfigError(ValueError):
    """All validation problems of a configuration, reported together."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class RankFailure(RuntimeError):
    def __init__(self, rank: int, phase: str, message: str):
        super().__init__(f"rank {rank} failed during {phase}: {message}")
        self.rank = rank
        self.phase = phase


class EpochTimeout(RankFailure):
    """A task-mode epoch did not complete; message lists each party's state."""


TRANSPORT_KINDS = ("inprocess", "socket", "delayed")


@dataclass
class TransportSpec:
    """Transport selection.

    ``delayed`` is the in-process fabric with delay injection; its progress
    model defaults to ``on-wait``.  Plain ``inprocess`` defaults to ``eager``.
    """

    kind: str = "inprocess"
    progress: Optional[str] = None
    base_latency_us: float = 0.0
    per_byte_ns: float = 0.0
    debug: bool = False

    @property
    def resolved_progress(self) -> str:
        if self.progress is not None:
            return self.progress
        return "on-wait" if self.kind == "delayed" else "eager"

    @property
    def label(self) -> str:
        if self.kind == "socket":
            return "socket"
        text = f"{self.kind}:{self.resolved_progress}"
        if self.kind == "delayed":
            text += f":{self.base_latency_us:g}us+{self.per_byte_ns:g}ns/B"
        return text

    def errors(self) -> List[str]:
        out = []
        if self.kind not in TRANSPORT_KINDS:
            out.append(f"transport kind must be one of {TRANSPORT_KINDS}, got {self.kind!r}")
        if self.progress not in (None, "eager", "on-wait"):
            out.append(f"progress must be 'eager' or 'on-wait', got {self.progress!r}")
        if self.kind == "socket" and self.progress == "on-wait":
            out.append("the socket transport only supports eager progress")
        if self.base_latency_us < 0 or self.per_byte_ns < 0:
            out.append("delays must be nonnegative")
        if self.kind != "delayed" and (self.base_latency_us or self.per_byte_ns):
            out.append("delays require transport kind 'delayed'")
        return out


@dataclass
class ExecConfig:
    modes: Sequence[Mode] = (Mode.VECTOR_NO_OVERLAP,)
    n_ranks: int = 1
    workers_per_rank: int = 1
    transport: TransportSpec = field(default_factory=TransportSpec)
    iterations: int = 1
    warmup: int = 1
    seed: int = 0
    timeout_s: Optional[float] = None
    # scheduler slice requested by a task-mode agent that owns its thread;
    # None leaves the platform default
    agent_slice_us: Optional[float] = 100.0

    def __post_init__(self):
        if isinstance(self.modes, (str, Mode)):
            self.modes = [self.modes]
        self.modes = [Mode.parse(m) for m in self.modes]
        if self.timeout_s is None:
            self.timeout_s = default_timeout()

    def errors(self) -> List[str]:
        out = []
        if not self.modes:
            out.append("at least one mode is required")
        if self.n_ranks < 1:
            out.append(f"n_ranks must be >= 1, got {self.n_ranks}")
        if self.workers_per_rank < 1:
            out.append(f"workers_per_rank must be >= 1, got {self.workers_per_rank}")
        if self.iterations < 1:
            out.append(f"iterations must be >= 1, got {self.iterations}")
        if self.warmup < 0:
            out.append(f"warmup must be >= 0, got {self.warmup}")
        if not self.timeout_s or self.timeout_s <= 0:
            out.append("timeout must be positive")
        if self.agent_slice_us is not None and not self.agent_slice_us > 0:
            out.append("agent_slice_us must be positive or None")
        out.extend(self.transport.errors())
        return out

    def validate(self) -> None:
        problems = self.errors()
        if problems:
            raise ConfigError(problems)


# ---------------------------------------------------------------------------
# per-rank state


class RankRuntime:
    """Buffers and timers of one rank for repeated spMVMs with a fixed plan.

    The RHS lives in ``b_ext = [owned | halo]`` so the unsplit kernel can
    address both through one vector.
    """

    def __init__(self, plan: CommPlan, b_local, n_workers: int = 1,
                 timeout: Optional[float] = None):
        self.plan = plan
        self.rank = plan.rank
        self.n_workers = n_workers
        self.timeout = default_timeout() if timeout is None else timeout
        n = plan.n_local
        self.b_ext = np.zeros(n + plan.n_halo)
        self.b_ext[:n] = b_local
        self.b_local = self.b_ext[:n]
        self.halo = self.b_ext[n:]
        self.c = np.zeros(n)
        self.send_idx = plan.send_indices()
        self.staging = np.empty(self.send_idx.size)
        offs = plan.send_offsets()
        self.send_slices = {
            q: slice(offs[q], offs[q] + len(plan.send_to[q])) for q in sorted(plan.send_to)
        }
        self.halo_slices = {
            q: slice(plan.halo_offset[q], plan.halo_offset[q] + len(plan.recv_from[q]))
            for q in sorted(plan.recv_from)
        }
        self.cuts_full = nnz_balanced_cuts(plan.a_full.row_ptr, n_workers)
        self.cuts_local = nnz_balanced_cuts(plan.a_local.row_ptr, n_workers)
        self.cuts_remote = nnz_balanced_cuts(plan.a_remote.row_ptr, n_workers)
        self.state = "idle"
        self.last: Dict[str, float] = dict.fromkeys(PHASES, 0.0)
        self.messages_sent = 0
        self._team: Optional[_TaskTeam] = None

    @contextlib.contextmanager
    def phase(self, name: str):
        self.state = name
        try:
            yield
        except RankFailure:
            raise
        except Exception as exc:
            raise RankFailure(self.rank, name, f"{type(exc).__name__}: {exc}") from exc

    def post_receives(self, t: Transport) -> List[Request]:
        return [t.post_receive(q) for q in self.halo_slices]

    def gather(self, dests: Optional[Sequence[int]] = None) -> None:
        for q in self.send_slices if dests is None else dests:
            sl = self.send_slices[q]
            np.take(self.b_local, self.send_idx[sl], out=self.staging[sl])

    def send_all(self, t: Transport) -> List[Request]:
        reqs = [t.send(q, self.staging[sl].tobytes()) for q, sl in self.send_slices.items()]
        self.messages_sent += len(reqs)
        return reqs

    def unpack(self, recvs: Sequence[Request]) -> None:
        for req in recvs:
            sl = self.halo_slices[req.peer]
            data = np.frombuffer(req.data, dtype=np.float64)
            if data.size != sl.stop - sl.start:
                raise RuntimeError(
                    f"message from rank {req.peer} has {data.size} values, "
                    f"expected {sl.stop - sl.start}"
                )
            self.halo[sl] = data

    def feed_back(self) -> None:
        """Use the result as the next RHS (power-iteration pattern)."""
        self.b_local[:] = self.c

    def close(self) -> None:
        if self._team is not None:
            self._team.shutdown()
            self._team = None


def run_vector_no_overlap(rt: RankRuntime, t: Transport) -> np.ndarray:
    t0 = time.perf_counter()
    with rt.phase("post_receive"):
        recvs = rt.post_receives(t)
    t1 = time.perf_counter()
    with rt.phase("gather"):
        rt.gather()
    t2 = time.perf_counter()
    with rt.phase("communicate"):
        sends = rt.send_all(t)
        t.wait_all(recvs + sends)
        rt.unpack(recvs)
    t3 = time.perf_counter()
    with rt.phase("compute"):
        spmv_chunked(rt.plan.a_full, rt.b_ext, rt.n_workers, out=rt.c, cuts=rt.cuts_full)
    t4 = time.perf_counter()
    rt.state = "done"
    rt.last = {"gather": t2 - t1, "comm": (t1 - t0) + (t3 - t2), "local": t4 - t3,
               "remote": 0.0, "total": t4 - t0}
    return rt.c


def run_vector_naive_overlap(rt: RankRuntime, t: Transport) -> np.ndarray:
    t0 = time.perf_counter()
    with rt.phase("post_receive"):
        recvs = rt.post_receives(t)
    t1 = time.perf_counter()
    with rt.phase("gather"):
        rt.gather()
    t2 = time.perf_counter()
    with rt.phase("send"):
        sends = rt.send_all(t)
    t3 = time.perf_counter()
    with rt.phase("local_compute"):
        spmv_chunked(rt.plan.a_local, rt.b_local, rt.n_workers, out=rt.c, cuts=rt.cuts_local)
    t4 = time.perf_counter()
    with rt.phase("wait"):
        t.wait_all(recvs + sends)
        rt.unpack(recvs)
    t5 = time.perf_counter()
    with rt.phase("remote_compute"):
        spmv_chunked(rt.plan.a_remote, rt.halo, rt.n_workers, out=rt.c,
                     accumulate=True, cuts=rt.cuts_remote)
    t6 = time.perf_counter()
    rt.state = "done"
    rt.last = {"gather": t2 - t1, "comm": (t1 - t0) + (t3 - t2) + (t5 - t4),
               "local": t4 - t3, "remote": t6 - t5, "total": t6 - t0}
    return rt.c


class _TaskTeam:
    """One communication agent (the calling thread) and W compute workers.

    Per epoch the parties meet at five barriers: ``start`` (receives posted),
    ``ready`` (send buffer gathered), ``posted`` (transfers initiated),
    ``halo`` (halo complete, local part done) and ``end``.  Workers start the
    local part only after ``posted`` so the agent never has to compete with
    running kernels for a CPU before its messages are on the way.
    """

    def __init__(self, rt: RankRuntime):
        self.rt = rt
        w = rt.n_workers
        self.timeout = rt.timeout
        self.barriers = {name: threading.Barrier(w + 1) for name in ("start", "ready", "posted", "halo", "end")}
        dests = sorted(rt.send_slices)
        self.dest_groups = [dests[i::w] for i in range(w)]
        self.states = {"agent": "idle", **{f"worker{i}": "idle" for i in range(w)}}
        self.worker_times = [dict.fromkeys(("gather", "local", "remote"), 0.0) for _ in range(w)]
        self.errors: List[tuple] = []
        self.epoch = -1
        self._stop = False
        self.threads = [
            threading.Thread(target=self._worker, args=(i,), daemon=True,
                             name=f"rank{rt.rank}-worker{i}")
            for i in range(w)
        ]
        for th in self.threads:
            th.start()

    def _meet(self, name: str, who: str) -> None:
        self.states[who] = f"waiting at {name} barrier (epoch {self.epoch})"
        try:
            self.barriers[name].wait(self.timeout)
        except threading.BrokenBarrierError:
            raise _Broken(name) from None
        self.states[who] = f"passed {name} barrier (epoch {self.epoch})"

    def _abort(self) -> None:
        for b in self.barriers.values():
            b.abort()

    def _worker(self, i: int) -> None:
        who = f"worker{i}"
        rt = self.rt
        plan = rt.plan
        lo_l, hi_l = int(rt.cuts_local[i]), int(rt.cuts_local[i + 1])
        lo_r, hi_r = int(rt.cuts_remote[i]), int(rt.cuts_remote[i + 1])
        times = self.worker_times[i]
        try:
            while True:
                self._meet("start", who)
                if self._stop:
                    return
                self.states[who] = "gather"
                t0 = time.perf_counter()
                rt.gather(self.dest_groups[i])
                t1 = time.perf_counter()
                self._meet("ready", who)
                self._meet("posted", who)
                self.states[who] = "local_compute"
                t2 = time.perf_counter()
                crs_rows(plan.a_local, rt.b_local, rt.c, lo_l, hi_l)
                t3 = time.perf_counter()
                self._meet("halo", who)
                self.states[who] = "remote_compute"
                t4 = time.perf_counter()
                crs_rows(plan.a_remote, rt.halo, rt.c, lo_r, hi_r, accumulate=True)
                t5 = time.perf_counter()
                times.update(gather=t1 - t0, local=t3 - t2, remote=t5 - t4)
                self._meet("end", who)
        except _Broken:
            pass
        except Exception as exc:
            self.errors.append((who, self.states[who], exc))
            self.states[who] = f"failed: {exc}"
            self._abort()

    def _diagnostic(self) -> str:
        return "; ".join(f"{p}: {s}" for p, s in self.states.items())

    def epoch_step(self, t: Transport) -> Dict[str, float]:
        rt = self.rt
        self.epoch = t.epoch
        who = "agent"
        try:
            t0 = time.perf_counter()
            self.states[who] = "post_receive"
            recvs = rt.post_receives(t)
            t_post = time.perf_counter() - t0
            self._meet("start", who)
            self._meet("ready", who)
            t1 = time.perf_counter()
            self.states[who] = "send"
            sends = rt.send_all(t)
            t.test_all(recvs + sends)
            self._meet("posted", who)
            self.states[who] = "wait_all"
            t.wait_all(recvs + sends)
            rt.unpack(recvs)
            t2 = time.perf_counter()
            self._meet("halo", who)
            self._meet("end", who)
            t3 = time.perf_counter()
        except _Broken as exc:
            self._abort()
            if self.errors:
                party, state, err = self.errors[0]
                raise RankFailure(rt.rank, f"{party} {state}", f"{type(err).__name__}: {err}") from err
            raise EpochTimeout(
                rt.rank, f"epoch {self.epoch}",
                f"{exc.name} barrier not reached within {self.timeout:g}s; {self._diagnostic()}",
            ) from None
        except Exception as exc:
            state = self.states[who]
            self._abort()
            raise RankFailure(rt.rank, f"agent {state}", f"{type(exc).__name__}: {exc}") from exc
        wt = self.worker_times
        return {
            "gather": max(x["gather"] for x in wt),
            "comm": (t2 - t1) + t_post,
            "local": max(x["local"] for x in wt),
            "remote": max(x["remote"] for x in wt),
            "total": t3 - t0,
        }

    def shutdown(self) -> None:
        self._stop = True
        try:
            self.barriers["start"].wait(1.0)
        except threading.BrokenBarrierError:
            pass
        for th in self.threads:
            th.join(1.0)


class _Broken(Exception):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name


def run_task_mode(rt: RankRuntime, t: Transport) -> np.ndarray:
    if rt._team is None:
        rt._team = _TaskTeam(rt)
    rt.state = "task_epoch"
    rt.last = rt._team.epoch_step(t)
    rt.state = "done"
    return rt.c


STEPS: Dict[Mode, Callable[[RankRuntime, Transport], np.ndarray]] = {
    Mode.VECTOR_NO_OVERLAP: run_vector_no_overlap,
    Mode.VECTOR_NAIVE_OVERLAP: run_vector_naive_overlap,
    Mode.TASK_MODE: run_task_mode,
}


# ---------------------------------------------------------------------------
# drivers


@dataclass
class RankOutcome:
    rank: int
    c: np.ndarray
    times: List[float]
    phases: List[Dict[str, float]]
    messages: int


@dataclass
class DistributedRun:
    """Gathered result and timings of one mode on one configuration."""

    mode: Mode
    n_ranks: int
    workers_per_rank: int
    transport: str
    result: np.ndarray
    iter_times: List[float]
    rank_phases: List[Dict[str, float]]
    messages_per_iteration: int
    log: List[str] = field(default_factory=list)

    @property
    def median_s(self) -> float:
        return float(np.median(self.iter_times))

    @property
    def min_s(self) -> float:
        return float(np.min(self.iter_times))


def _rank_loop(plan: CommPlan, b_local: np.ndarray, t: Transport, mode: Mode,
               cfg: ExecConfig, own_thread: bool = False) -> RankOutcome:
    short_slice = (own_thread and mode is Mode.TASK_MODE and bool(cfg.agent_slice_us)
                   and request_slice(cfg.agent_slice_us))
    rt = RankRuntime(plan, b_local, cfg.workers_per_rank, cfg.timeout_s)
    step = STEPS[mode]
    times, phases = [], []
    total = cfg.warmup + cfg.iterations
    try:
        for k in range(total):
            t.epoch = k
            with rt.phase("barrier"):
                t.barrier()
            t0 = time.perf_counter()
            step(rt, t)
            dt = time.perf_counter() - t0
            with rt.phase("barrier"):
                t.barrier()
            if k >= cfg.warmup:
                times.append(dt)
                phases.append(dict(rt.last))
                if k < total - 1:
                    rt.feed_back()
        sent = rt.messages_sent
    finally:
        rt.close()
        if short_slice:
            request_slice(0)
    return RankOutcome(plan.rank, rt.c.copy(), times, phases, sent // total if total else 0)


def _assemble(mode: Mode, cfg: ExecConfig, outcomes: Sequence[RankOutcome],
              log_lines=()) -> DistributedRun:
    outcomes = sorted(outcomes, key=lambda o: o.rank)
    times = np.max(np.array([o.times for o in outcomes]), axis=0)
    rank_phases = [
        {ph: float(np.median([p[ph] for p in o.phases])) for ph in PHASES} for o in outcomes
    ]
    return DistributedRun(
        mode=mode,
        n_ranks=cfg.n_ranks,
        workers_per_rank=cfg.workers_per_rank,
        transport=cfg.transport.label,
        result=np.concatenate([o.c for o in outcomes]),
        iter_times=times.tolist(),
        rank_phases=rank_phases,
        messages_per_iteration=sum(o.messages for o in outcomes),
        log=list(log_lines),
    )


def _split_rhs(b: np.ndarray, part: PartitionMap) -> List[np.ndarray]:
    return [b[part.row_start[r] : part.row_start[r + 1]] for r in range(part.n_ranks)]


def _run_inprocess(plans: Sequence[CommPlan], b: np.ndarray, mode: Mode,
                   cfg: ExecConfig) -> DistributedRun:
    ts = cfg.transport
    fabric = InProcessFabric(cfg.n_ranks, ts.resolved_progress, ts.base_latency_us,
                             ts.per_byte_ns, ts.debug)
    endpoints = fabric.endpoints()
    segments = _split_rhs(b, plans[0].partition)
    outcomes: List[Optional[RankOutcome]] = [None] * cfg.n_ranks
    errors: List[BaseException] = []
    lock = threading.Lock()

    def rank_main(r: int) -> None:
        endpoints[r].timeout = cfg.timeout_s
        try:
            outcomes[r] = _rank_loop(plans[r], segments[r], endpoints[r], mode, cfg,
                                     own_thread=cfg.n_ranks > 1)
        except BaseException as exc:  # propagate to the driver
            with lock:
                errors.append(exc)
            fabric.abort(f"rank {r} failed")

    if cfg.n_ranks == 1:
        rank_main(0)
    else:
        threads = [threading.Thread(target=rank_main, args=(r,), name=f"rank{r}")
                   for r in range(cfg.n_ranks)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
    if errors:
        raise _root_cause(errors)
    return _assemble(mode, cfg, outcomes, fabric.log)


def _root_cause(errors: Sequence[BaseException]) -> BaseException:
    # a failing rank aborts the fabric, so its peers fail at barriers or on the
    # abort; report the first failure that is not such a consequence
    def secondary(exc):
        return getattr(exc, "phase", "") == "barrier" or "fabric aborted" in str(exc)

    return next((e for e in errors if not secondary(e)), errors[0])


def _socket_child(rank: int, addresses, listener: socket.socket, plans, b, jobs,
                  results, timeout: float) -> None:
    t = None
    try:
        socks = connect_mesh(rank, addresses, listener, timeout)
        listener.close()
        t = SocketTransport(rank, len(addresses), socks)
        t.timeout = timeout
        plan = plans[rank]
        t.handshake(plan.checksum)
        seg = _split_rhs(b, plan.partition)[rank]
        for j, (mode, cfg) in enumerate(jobs):
            results.put(("ok", rank, j, _rank_loop(plan, seg, t, mode, cfg, own_thread=True)))
        t.barrier()
    except BaseException as exc:
        phase = getattr(exc, "phase", "setup")
        results.put(("error", rank, phase, f"{exc}\n{traceback.format_exc()}"))
    finally:
        if t is not None:
            t.close()


def _run_socket(plans: Sequence[CommPlan], b: np.ndarray, jobs: Sequence[tuple]
                ) -> List[DistributedRun]:
    """Run several (mode, cfg) jobs on one set of forked rank processes."""
    n = len(plans)
    cfg0 = jobs[0][1]
    ctx = mp.get_context("fork")
    listeners = []
    for _ in range(n):
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.bind(("127.0.0.1", 0))
        s.listen(n)
        listeners.append(s)
    addresses = [s.getsockname() for s in listeners]
    results = ctx.Queue()
    procs = [
        ctx.Process(target=_socket_child, name=f"rank{r}", daemon=True,
                    args=(r, addresses, listeners[r], plans, b, jobs, results, cfg0.timeout_s))
        for r in range(n)
    ]
    for p in procs:
        p.start()
    for s in listeners:
        s.close()

    budget = sum(c.timeout_s * (c.warmup + c.iterations + 2) for _, c in jobs) + 30.0
    deadline = time.monotonic() + budget
    got: Dict[int, List[RankOutcome]] = {j: [] for j in range(len(jobs))}
    failure = None
    try:
        for _ in range(n * len(jobs)):
            remaining = deadline - time.monotonic()
            try:
                msg = results.get(timeout=max(remaining, 0.1))
            except queue_mod.Empty:
                failure = RankFailure(-1, "socket run", "timed out waiting for rank results")
                break
            if msg[0] == "error":
                _, rank, phase, text = msg
                failure = RankFailure(rank, phase, text)
                break
            _, rank, j, outcome = msg
            got[j].append(outcome)
    finally:
        for p in procs:
            p.join(5.0 if failure is None else 0.5)
            if p.is_alive():
                p.terminate()
                p.join()
    if failure is not None:
        raise failure
    return [_assemble(mode, cfg, got[j]) for j, (mode, cfg) in enumerate(jobs)]


def run_distributed(
    a: CsrMatrix,
    b: np.ndarray,
    cfg: ExecConfig,
    plans: Optional[Sequence[CommPlan]] = None,
) -> List[DistributedRun]:
    """Run every mode of ``cfg`` on ``a`` and return one result per mode."""
    cfg.validate()
    b = np.ascontiguousarray(b, dtype=np.float64)
    if b.size != a.n_cols:
        raise ConfigError([f"RHS has length {b.size}, matrix has {a.n_cols} columns"])
    if plans is None:
        plans = build_all_plans(a, partition_by_nonzeros(a, cfg.n_ranks))
    if len(plans) != cfg.n_ranks:
        raise ConfigError([f"{len(plans)} plans for {cfg.n_ranks} ranks"])
    if cfg.transport.kind == "socket":
        return _run_socket(plans, b, [(m, cfg) for m in cfg.modes])
    return [_run_inprocess(plans, b, m, cfg) for m in cfg.modes]


# ---------------------------------------------------------------------------
# benchmark records


@dataclass
class RunRecord:
    """One benchmark measurement; CSV columns are the fields up to ``remote_s``."""

    mode: str
    n_ranks: int
    workers_per_rank: int
    transport: str
    matrix: str
    n_rows: int
    n_nz: int
    iterations: int
    median_s: float
    min_s: float
    gflops: float
    model_bound_gflops: Optional[float]
    model_bw_gbs: float
    comm_bytes: int
    messages: int
    gather_s: float
    comm_s: float
    local_s: float
    remote_s: float
    result: Optional[np.ndarray] = field(default=None, repr=False)
    rank_phases: List[Dict[str, float]] = field(default_factory=list, repr=False)
    log: List[str] = field(default_factory=list, repr=False)

    @classmethod
    def columns(cls) -> List[str]:
        names = [f.name for f in fields(cls)]
        return names[: names.index("remote_s") + 1]

    def row(self) -> Dict[str, object]:
        return {k: getattr(self, k) for k in self.columns()}


def make_record(run: DistributedRun, a: CsrMatrix, matrix_name: str, iterations: int,
                comm_bytes: int, bandwidth_gbs: Optional[float] = None,
                kappa: float = 0.0) -> RunRecord:
    split = run.mode is not Mode.VECTOR_NO_OVERLAP and run.n_ranks > 1
    median = run.median_s
    bound = None
    if bandwidth_gbs:
        bal = code_balance(BalanceInputs(a.nnzr, kappa, split))
        bound = max_performance(bal, bandwidth_gbs)
    traffic = model_traffic(a, split) + kappa * a.nnz
    slowest = max(run.rank_phases, key=lambda p: p["total"])
    return RunRecord(
        mode=run.mode.value,
        n_ranks=run.n_ranks,
        workers_per_rank=run.workers_per_rank,
        transport=run.transport,
        matrix=matrix_name,
        n_rows=a.n_rows,
        n_nz=a.nnz,
        iterations=iterations,
        median_s=median,
        min_s=run.min_s,
        gflops=2.0 * a.nnz / median / 1e9,
        model_bound_gflops=bound,
        model_bw_gbs=traffic / median / 1e9,
        comm_bytes=comm_bytes,
        messages=run.messages_per_iteration,
        gather_s=slowest["gather"],
        comm_s=slowest["comm"],
        local_s=slowest["local"],
        remote_s=slowest["remote"],
        result=run.result,
        rank_phases=run.rank_phases,
        log=run.log,
    )


def run_benchmark(
    cfg: ExecConfig,
    problem: Union[ProblemSpec, CsrMatrix],
    rhs: Optional[np.ndarray] = None,
    bandwidth_gbs: Optional[float] = None,
    kappa: float = 0.0,
    matrix_name: Optional[str] = None,
) -> List[RunRecord]:
    """Warm up, time ``cfg.iterations`` spMVMs per mode and report records."""
    cfg.validate()
    if isinstance(problem, CsrMatrix):
        a = problem
        name = matrix_name or f"matrix{a.n_rows}x{a.n_cols}"
        b = rhs if rhs is not None else np.random.default_rng(cfg.seed).random(a.n_cols)
    else:
        a = build_matrix(problem)
        name = matrix_name or problem.name
        b = rhs if rhs is not None else build_rhs(problem, a.n_cols)
    plans = build_all_plans(a, partition_by_nonzeros(a, cfg.n_ranks))
    volume = exchange_volume(plans)
    runs = run_distributed(a, b, cfg, plans)
    return [
        make_record(run, a, name, cfg.iterations, volume["total_bytes"], bandwidth_gbs, kappa)
        for run in runs
    ]
