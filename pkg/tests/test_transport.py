import socket
import struct
import threading
import time

import pytest

from overlap_spmv.transport import (
    FRAME_HEADER,
    EpochViolation,
    InProcessFabric,
    SocketTransport,
    TransportError,
    TransportTimeout,
    connect_mesh,
    read_frame,
    write_frame,
)


def test_frame_layout_is_little_endian():
    a, b = socket.socketpair()
    try:
        write_frame(a, 3, 7, b"\x01\x02")
        raw = b.recv(64)
        assert raw == struct.pack("<III", 3, 7, 2) + b"\x01\x02"
        assert FRAME_HEADER.size == 12
        write_frame(a, 1, 2, b"")
        assert read_frame(b) == (1, 2, b"")
    finally:
        a.close()
        b.close()


def test_read_frame_on_closed_socket():
    a, b = socket.socketpair()
    a.sendall(struct.pack("<III", 0, 0, 10) + b"abc")
    a.close()
    with pytest.raises(TransportError, match="closed"):
        read_frame(b)
    b.close()


def run_ranks(n, fn):
    out, errs = [None] * n, []

    def body(r):
        try:
            out[r] = fn(r)
        except BaseException as exc:  # noqa: BLE001 - reported below
            errs.append(exc)

    threads = [threading.Thread(target=body, args=(r,)) for r in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(30)
    if errs:
        raise errs[0]
    return out


def test_inprocess_ring_exchange():
    fabric = InProcessFabric(3)
    ends = fabric.endpoints()

    def body(r):
        t = ends[r]
        t.epoch = 5
        rq = t.post_receive((r - 1) % 3)
        t.send((r + 1) % 3, bytes([r]))
        t.wait_all([rq])
        t.barrier()
        return rq.data, rq.nbytes

    assert run_ranks(3, body) == [(b"\x02", 1), (b"\x00", 1), (b"\x01", 1)]


def test_on_wait_progress_holds_messages_until_wait():
    fabric = InProcessFabric(2, progress="on-wait")
    s, r = fabric.endpoints()
    sreq = s.send(1, b"x")
    rq = r.post_receive(0)
    assert not sreq.done
    assert not r.test_all([rq])
    s.wait_all([sreq])
    assert sreq.done
    assert r.test_all([rq]) and rq.data == b"x"


def test_eager_progress_delivers_at_send():
    fabric = InProcessFabric(2, progress="eager")
    s, r = fabric.endpoints()
    assert s.send(1, b"y").done
    rq = r.post_receive(0)
    assert r.test_all([rq]) and rq.data == b"y"


def test_injected_delay():
    fabric = InProcessFabric(2, base_latency_us=30000, per_byte_ns=1000)
    assert fabric.delay(1000) == pytest.approx(0.031)
    s, r = fabric.endpoints()
    rq = r.post_receive(0)
    t0 = time.perf_counter()
    s.send(1, b"z" * 1000)
    assert not r.test_all([rq])
    r.wait_all([rq])
    assert time.perf_counter() - t0 >= 0.031


def test_debug_log_lines():
    fabric = InProcessFabric(2, debug=True)
    s, r = fabric.endpoints()
    s.epoch = r.epoch = 4
    rq = r.post_receive(0)
    s.send(1, b"12345678")
    r.wait_all([rq])
    assert len(fabric.log) == 1
    line = fabric.log[0]
    assert line.startswith("epoch=4 src=0 dst=1 bytes=8 enqueue_us=")
    assert "deliver_us=" in line


def test_epoch_mismatch_detected():
    fabric = InProcessFabric(2)
    s, r = fabric.endpoints()
    s.epoch = 1
    r.epoch = 2
    rq = r.post_receive(0)
    s.send(1, b"a")
    with pytest.raises(EpochViolation):
        r.wait_all([rq])


def test_debug_flags_send_with_stale_receive():
    fabric = InProcessFabric(2, debug=True)
    t = fabric.endpoint(0)
    t.epoch = 0
    t.post_receive(1)
    t.epoch = 1
    with pytest.raises(EpochViolation, match="still open"):
        t.send(1, b"a")


def test_receive_timeout_and_abort():
    fabric = InProcessFabric(2)
    r = fabric.endpoint(1)
    r.timeout = 0.05
    with pytest.raises(TransportTimeout):
        r.wait_all([r.post_receive(0)])
    fabric.abort("test")
    with pytest.raises(TransportError, match="aborted"):
        r.wait_all([r.post_receive(0)])


def test_bad_fabric_arguments():
    with pytest.raises(ValueError):
        InProcessFabric(2, progress="lazy")
    with pytest.raises(ValueError):
        InProcessFabric(2, base_latency_us=-1)


def socket_mesh(n):
    listeners, addrs = [], []
    for _ in range(n):
        lst = socket.socket()
        lst.bind(("127.0.0.1", 0))
        lst.listen(n)
        listeners.append(lst)
        addrs.append(lst.getsockname())
    socks = run_ranks(n, lambda r: connect_mesh(r, addrs, listeners[r], timeout=10))
    for lst in listeners:
        lst.close()
    return [SocketTransport(r, n, socks[r]) for r in range(n)]


def test_socket_exchange_handshake_and_barrier():
    ts = socket_mesh(3)
    try:
        def digest(r):
            # send half identifies (sender, receiver); receive half the reverse
            return lambda q: bytes([r, q] * 4) + bytes([q, r] * 4)

        def body(r):
            t = ts[r]
            t.timeout = 10
            t.handshake(digest(r))
            t.epoch = 3
            reqs = [t.post_receive(q) for q in range(3) if q != r]
            for q in range(3):
                if q != r:
                    t.send(q, f"{r}->{q}".encode())
            t.wait_all(reqs)
            t.barrier()
            t.barrier()
            return sorted(rq.data.decode() for rq in reqs)

        got = run_ranks(3, body)
        assert got[0] == ["1->0", "2->0"]
        assert got[2] == ["0->2", "1->2"]
    finally:
        for t in ts:
            t.close()


def test_socket_handshake_mismatch():
    ts = socket_mesh(2)
    try:
        def body(r):
            ts[r].timeout = 10
            ts[r].handshake(lambda q: bytes(16) if r == 0 else bytes(8) + b"\x01" * 8)

        with pytest.raises(TransportError, match="checksum mismatch"):
            run_ranks(2, body)
    finally:
        for t in ts:
            t.close()


def test_socket_peer_disconnect_is_reported():
    ts = socket_mesh(2)
    ts[0].close()
    ts[1].timeout = 5
    with pytest.raises(TransportError):
        ts[1].wait_all([ts[1].post_receive(0)])
    ts[1].close()
