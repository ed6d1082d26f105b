"""Point-to-point message transports between ranks.

Two implementations share one small interface:

* :class:`InProcessTransport` - ranks are threads of one process exchanging
  messages through a shared :class:`InProcessFabric`.  The fabric can inject
  a delivery delay (base latency plus a per-byte cost) and has two progress
  models: ``"eager"`` moves data at send time, ``"on-wait"`` moves it only
  once the sender enters :meth:`Transport.wait_all`, like a message-passing
  library without asynchronous progress.
* :class:`SocketTransport` - ranks are processes connected by TCP.  Frames are
  little-endian ``[u32 source][u32 epoch][u32 payload bytes][payload]``.

Messages between one pair of ranks are delivered in order.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

log = logging.getLogger(__name__)

__all__ = [
    "Request",
    "Transport",
    "TransportError",
    "TransportTimeout",
    "EpochViolation",
    "InProcessFabric",
    "InProcessTransport",
    "SocketTransport",
    "FRAME_HEADER",
    "connect_mesh",
]

PROGRESS_MODELS = ("eager", "on-wait")

FRAME_HEADER = struct.Struct("<III")
HANDSHAKE_EPOCH = 0xFFFFFFFF
BARRIER_BIT = 0x80000000
# barriers wait longer than receives, so a rank stuck on a missing message
# reports that message instead of a peer reporting a broken barrier
BARRIER_GRACE = 2.0


class TransportError(RuntimeError):
    pass


class TransportTimeout(TransportError):
    pass


class EpochViolation(TransportError):
    """A message from one epoch was matched against a receive of another."""


@dataclass(eq=False)
class Request:
    kind: str  # "send" or "recv"
    peer: int
    epoch: int
    nbytes: int = 0
    data: Optional[bytes] = None
    done: bool = False


class Transport(ABC):
    """Duplex, reliable, per-pair ordered message channel for one rank."""

    rank: int
    n_ranks: int

    def __init__(self, rank: int, n_ranks: int):
        self.rank = rank
        self.n_ranks = n_ranks
        self.epoch = 0
        self.timeout: Optional[float] = None

    @abstractmethod
    def post_receive(self, src: int) -> Request:
        """Start a nonblocking receive of the next message from ``src``."""

    @abstractmethod
    def send(self, dst: int, payload: bytes) -> Request:
        """Start a nonblocking send; the payload is copied."""

    @abstractmethod
    def wait_all(self, requests: Sequence[Request]) -> None:
        """Block until every request has completed."""

    def test_all(self, requests: Sequence[Request]) -> bool:
        """Nonblocking progress; True when every request has completed."""
        return all(r.done for r in requests)

    @abstractmethod
    def barrier(self) -> None:
        """Collective synchronisation of all ranks."""

    def close(self) -> None:
        pass


# ---------------------------------------------------------------------------
# in-process


@dataclass(eq=False)
class _Message:
    src: int
    dst: int
    epoch: int
    payload: bytes
    enqueued: float
    deliver_at: float = 0.0


class InProcessFabric:
    """Shared mailboxes for ``n_ranks`` thread-hosted ranks."""

    def __init__(
        self,
        n_ranks: int,
        progress: str = "eager",
        base_latency_us: float = 0.0,
        per_byte_ns: float = 0.0,
        debug: bool = False,
    ):
        if progress not in PROGRESS_MODELS:
            raise ValueError(f"progress must be one of {PROGRESS_MODELS}, got {progress!r}")
        if base_latency_us < 0 or per_byte_ns < 0:
            raise ValueError("delays must be nonnegative")
        self.n_ranks = n_ranks
        self.progress = progress
        self.base_latency = base_latency_us * 1e-6
        self.per_byte = per_byte_ns * 1e-9
        self.debug = debug
        self.log: List[str] = []
        self._cv = threading.Condition()
        self._boxes: Dict[tuple, deque] = {}
        self._barrier = threading.Barrier(n_ranks)
        self._aborted: Optional[str] = None
        self._t0 = time.perf_counter()

    def abort(self, reason: str = "aborted") -> None:
        """Fail every pending and future wait on this fabric."""
        with self._cv:
            self._aborted = reason
            self._cv.notify_all()
        self._barrier.abort()

    def endpoint(self, rank: int) -> "InProcessTransport":
        return InProcessTransport(self, rank)

    def endpoints(self) -> List["InProcessTransport"]:
        return [self.endpoint(r) for r in range(self.n_ranks)]

    def delay(self, nbytes: int) -> float:
        return self.base_latency + self.per_byte * nbytes

    def _post(self, msg: _Message, now: float) -> None:
        msg.deliver_at = now + self.delay(len(msg.payload))
        with self._cv:
            self._boxes.setdefault((msg.src, msg.dst), deque()).append(msg)
            self._cv.notify_all()

    def _take(self, src: int, dst: int, deadline: Optional[float],
              block: bool = True) -> Optional[_Message]:
        with self._cv:
            while True:
                if self._aborted is not None:
                    raise TransportError(f"rank {dst}: fabric aborted ({self._aborted})")
                box = self._boxes.get((src, dst))
                now = time.perf_counter()
                if box and box[0].deliver_at <= now:
                    msg = box.popleft()
                    break
                if not block:
                    return None
                if deadline is not None and now >= deadline:
                    raise TransportTimeout(f"rank {dst}: no message from rank {src}")
                wake = box[0].deliver_at if box else None
                if deadline is not None:
                    wake = deadline if wake is None else min(wake, deadline)
                self._cv.wait(None if wake is None else max(wake - now, 0.0))
        if self.debug:
            line = (
                f"epoch={msg.epoch} src={msg.src} dst={msg.dst} bytes={len(msg.payload)} "
                f"enqueue_us={(msg.enqueued - self._t0) * 1e6:.1f} "
                f"deliver_us={(time.perf_counter() - self._t0) * 1e6:.1f}"
            )
            with self._cv:
                self.log.append(line)
            log.debug(line)
        return msg


class InProcessTransport(Transport):
    def __init__(self, fabric: InProcessFabric, rank: int):
        super().__init__(rank, fabric.n_ranks)
        self.fabric = fabric
        self._outbox: List[tuple] = []
        self._open_recvs: List[Request] = []

    def post_receive(self, src: int) -> Request:
        req = Request("recv", src, self.epoch)
        self._open_recvs.append(req)
        return req

    def send(self, dst: int, payload: bytes) -> Request:
        if self.fabric.debug:
            stale = [r for r in self._open_recvs if not r.done and r.epoch < self.epoch]
            if stale:
                raise EpochViolation(
                    f"rank {self.rank} sends in epoch {self.epoch} with "
                    f"{len(stale)} receive(s) of epoch {stale[0].epoch} still open"
                )
        now = time.perf_counter()
        msg = _Message(self.rank, dst, self.epoch, bytes(payload), now)
        req = Request("send", dst, self.epoch, len(msg.payload))
        if self.fabric.progress == "eager":
            self.fabric._post(msg, now)
            req.done = True
        else:
            self._outbox.append((req, msg))
        return req

    def _progress(self) -> None:
        now = time.perf_counter()
        for req, msg in self._outbox:
            self.fabric._post(msg, now)
            req.done = True
        self._outbox.clear()

    def test_all(self, requests: Sequence[Request]) -> bool:
        self._progress()
        for req in requests:
            if not req.done and req.kind == "recv":
                msg = self.fabric._take(req.peer, self.rank, None, block=False)
                if msg is not None:
                    self._complete(req, msg)
        self._open_recvs = [r for r in self._open_recvs if not r.done]
        return all(r.done for r in requests)

    def _complete(self, req: Request, msg: _Message) -> None:
        if msg.epoch != req.epoch:
            raise EpochViolation(
                f"rank {self.rank}: receive from {req.peer} posted in epoch "
                f"{req.epoch} matched a message of epoch {msg.epoch}"
            )
        req.data = msg.payload
        req.nbytes = len(msg.payload)
        req.done = True

    def wait_all(self, requests: Sequence[Request]) -> None:
        self._progress()
        deadline = None if self.timeout is None else time.perf_counter() + self.timeout
        for req in requests:
            if req.done:
                continue
            if req.kind != "recv":
                raise TransportError(f"rank {self.rank}: send to {req.peer} not progressed")
            self._complete(req, self.fabric._take(req.peer, self.rank, deadline))
        self._open_recvs = [r for r in self._open_recvs if not r.done]

    def barrier(self) -> None:
        try:
            self.fabric._barrier.wait(None if self.timeout is None else self.timeout * BARRIER_GRACE)
        except threading.BrokenBarrierError:
            raise TransportTimeout(f"rank {self.rank}: barrier broken or timed out") from None


# ---------------------------------------------------------------------------
# sockets


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise TransportError("connection closed by peer")
        got += k
    return bytes(buf)


def write_frame(sock: socket.socket, src: int, epoch: int, payload: bytes) -> None:
    sock.sendall(FRAME_HEADER.pack(src, epoch, len(payload)) + payload)


def read_frame(sock: socket.socket) -> tuple:
    src, epoch, n = FRAME_HEADER.unpack(_recv_exact(sock, FRAME_HEADER.size))
    return src, epoch, _recv_exact(sock, n) if n else b""


def connect_mesh(
    rank: int, addresses: Sequence[tuple], listener: socket.socket, timeout: float = 30.0
) -> Dict[int, socket.socket]:
    """Fully connect ``rank`` to every other rank.

    Lower ranks accept, higher ranks connect; each new connection starts with
    a bare frame carrying the connecting rank's id.
    """
    socks: Dict[int, socket.socket] = {}
    for q in range(rank):
        s = socket.create_connection(addresses[q], timeout=timeout)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        write_frame(s, rank, HANDSHAKE_EPOCH, b"")
        socks[q] = s
    listener.settimeout(timeout)
    for _ in range(rank + 1, len(addresses)):
        s, _addr = listener.accept()
        s.settimeout(timeout)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        src, epoch, _ = read_frame(s)
        if epoch != HANDSHAKE_EPOCH or src in socks or not rank < src < len(addresses):
            raise TransportError(f"rank {rank}: unexpected hello from {src}")
        socks[src] = s
    for s in socks.values():
        s.settimeout(None)
    return socks


class SocketTransport(Transport):
    """TCP transport; one reader thread per peer fills ordered inboxes."""

    def __init__(self, rank: int, n_ranks: int, socks: Dict[int, socket.socket]):
        super().__init__(rank, n_ranks)
        self._socks = socks
        self._locks = {q: threading.Lock() for q in socks}
        self._cv = threading.Condition()
        self._inbox: Dict[int, deque] = {q: deque() for q in socks}
        self._barriers: Dict[int, deque] = {q: deque() for q in socks}
        self._handshakes: Dict[int, deque] = {q: deque() for q in socks}
        self._errors: Dict[int, BaseException] = {}
        self._barrier_seq = 0
        self._closing = False
        self._readers = [
            threading.Thread(target=self._reader, args=(q, s), daemon=True)
            for q, s in socks.items()
        ]
        for t in self._readers:
            t.start()

    def _reader(self, peer: int, sock: socket.socket) -> None:
        try:
            while True:
                src, epoch, payload = read_frame(sock)
                if src != peer:
                    raise TransportError(f"frame from {src} on connection to {peer}")
                with self._cv:
                    if epoch == HANDSHAKE_EPOCH:
                        self._handshakes[peer].append(payload)
                    elif epoch & BARRIER_BIT:
                        self._barriers[peer].append(epoch & ~BARRIER_BIT)
                    else:
                        self._inbox[peer].append((epoch, payload))
                    self._cv.notify_all()
        except (OSError, TransportError) as exc:
            with self._cv:
                if not self._closing:
                    self._errors[peer] = exc
                self._cv.notify_all()

    def _wait_for(self, peer: int, queue: deque, what: str, grace: float = 1.0) -> object:
        deadline = None if self.timeout is None else time.perf_counter() + self.timeout * grace
        with self._cv:
            while not queue:
                if peer in self._errors:
                    raise TransportError(f"rank {self.rank}: link to rank {peer}: {self._errors[peer]}")
                remaining = None if deadline is None else deadline - time.perf_counter()
                if remaining is not None and remaining <= 0:
                    raise TransportTimeout(f"rank {self.rank}: timed out waiting for {what}")
                self._cv.wait(remaining)
            return queue.popleft()

    def _write(self, dst: int, epoch: int, payload: bytes) -> None:
        try:
            with self._locks[dst]:
                write_frame(self._socks[dst], self.rank, epoch, payload)
        except KeyError:
            raise TransportError(f"rank {self.rank}: no connection to rank {dst}") from None
        except OSError as exc:
            raise TransportError(f"rank {self.rank}: send to {dst} failed: {exc}") from exc

    def handshake(self, checksum: Callable[[int], bytes]) -> None:
        """Exchange rank ids and per-pair plan digests; raise on mismatch.

        ``checksum(peer)`` must return 16 bytes: digest of the indices sent to
        ``peer`` followed by digest of the indices received from it.
        """
        for q in self._socks:
            self._write(q, HANDSHAKE_EPOCH, struct.pack("<I", self.rank) + checksum(q))
        for q in self._socks:
            payload = self._wait_for(q, self._handshakes[q], f"handshake from {q}")
            (peer_id,) = struct.unpack_from("<I", payload)
            mine = checksum(q)
            if peer_id != q or payload[4:12] != mine[8:16] or payload[12:20] != mine[0:8]:
                raise TransportError(
                    f"rank {self.rank}: plan checksum mismatch with rank {q}"
                )

    def post_receive(self, src: int) -> Request:
        return Request("recv", src, self.epoch)

    def send(self, dst: int, payload: bytes) -> Request:
        self._write(dst, self.epoch, bytes(payload))
        return Request("send", dst, self.epoch, len(payload), done=True)

    def wait_all(self, requests: Sequence[Request]) -> None:
        for req in requests:
            if req.done:
                continue
            epoch, payload = self._wait_for(req.peer, self._inbox[req.peer], f"message from {req.peer}")
            if epoch != req.epoch:
                raise EpochViolation(
                    f"rank {self.rank}: receive from {req.peer} posted in epoch "
                    f"{req.epoch} matched a message of epoch {epoch}"
                )
            req.data = payload
            req.nbytes = len(payload)
            req.done = True

    def barrier(self) -> None:
        seq = self._barrier_seq
        self._barrier_seq += 1
        for q in self._socks:
            self._write(q, BARRIER_BIT | seq, b"")
        for q in self._socks:
            got = self._wait_for(q, self._barriers[q], f"barrier from {q}", BARRIER_GRACE)
            if got != seq:
                raise TransportError(f"rank {self.rank}: barrier {seq} met {got} from {q}")

    def close(self) -> None:
        with self._cv:
            self._closing = True
        for s in self._socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
