import asyncio
import random

import pytest

from p2prdf.messages import ClientReply, ClientStatus, Envelope, PeerId, ReplicateAck, encode_frame
from p2prdf.network import (
    Deadlock, LivelockGuard, SimConfig, SimNetwork, SocketTransport, ClientConnection,
    Unreachable, split_address,
)


class Box:
    """A receiver that records deliveries and optionally echoes."""

    def __init__(self, pid, echo=False):
        self.pid = pid
        self.echo = echo
        self.got = []
        self.failed = []
        self.transport = None

    def deliver(self, env):
        self.got.append((env, self.transport.loop.time() if self.transport else None))
        if self.echo:
            self.transport.send(Envelope(self.pid, env.sender.id, env.request_id, ReplicateAck(1)), env.sender)

    def send_failed(self, env, exc):
        self.failed.append((env, exc))


def sim_pair(config=None):
    net = SimNetwork(config or SimConfig(seed=1))
    a, b = Box(PeerId(1, "a")), Box(PeerId(2, "b"))
    a.transport = net.register(a)
    b.transport = net.register(b)
    return net, a, b


def env(src, dst, rid, n=0):
    return Envelope(src.pid, dst.pid.id, rid, ReplicateAck(n))


def test_latency_model_is_calibrated():
    net = SimNetwork()
    assert net.latency(1024) == pytest.approx(1.147)
    assert net.latency(0) == 1.0


def test_nothing_pending_takes_no_time():
    net = SimNetwork()
    assert net.run_until_quiescent() == 0


def test_request_response_costs_two_latencies():
    net, a, b = sim_pair()
    b.echo = True
    frame_len = len(encode_frame(env(a, b, 1)))
    a.transport.send(env(a, b, 1))
    elapsed = net.run_until_quiescent()
    assert elapsed == pytest.approx(2 * net.latency(frame_len))
    assert len(a.got) == 1 and len(b.got) == 1


def test_fifo_per_pair():
    net, a, b = sim_pair()
    for i in range(50):
        a.transport.send(env(a, b, i, i))
    net.run_until_quiescent()
    assert [e.request_id for e, _ in b.got] == list(range(50))


def _trace(seed):
    net = SimNetwork(SimConfig(seed=seed))
    boxes = [Box(PeerId(i + 1, f"p{i}")) for i in range(5)]
    for box in boxes:
        box.transport = net.register(box)
    rng = random.Random(0)
    for i in range(200):
        src, dst = rng.sample(boxes, 2)
        src.transport.send(env(src, dst, i))
    net.run_until_quiescent()
    return net.trace_digest(), [[e.request_id for e, _ in b.got] for b in boxes]


def test_same_seed_same_trace():
    assert _trace(4) == _trace(4)


def kilobyte_frame(src, dst):
    base = len(encode_frame(Envelope(src.pid, dst.pid.id, 0, ClientReply(True, ""))))
    frame = encode_frame(Envelope(src.pid, dst.pid.id, 0, ClientReply(True, "x" * (1024 - base))))
    assert len(frame) == 1024
    return frame


def test_thousand_one_kilobyte_frames():
    net, a, b = sim_pair()
    frame = kilobyte_frame(a, b)
    for _ in range(1000):
        net.send_frame(a.pid.id, b.pid.id, frame)
    elapsed = net.run_until_quiescent()
    assert elapsed == pytest.approx(1147, rel=1e-9)
    assert len(b.got) == 1000 and net.bytes == 1024 * 1000


def test_frames_due_within_clock_resolution_are_delivered():
    # asyncio runs both timers at the earlier of two nearly equal deadlines
    net = SimNetwork()
    boxes = [Box(PeerId(i, f"p{i}")) for i in range(1, 5)]
    for box in boxes:
        box.transport = net.register(box)
    a, b, c, d = boxes
    latencies = iter([0.3, 0.1 + 0.2])
    net.latency = lambda size: next(latencies)
    net.send_frame(a.pid.id, c.pid.id, encode_frame(env(a, c, 1)))
    net.send_frame(b.pid.id, d.pid.id, encode_frame(env(b, d, 2)))
    net.run_until_quiescent()
    assert len(c.got) == 1 and len(d.got) == 1


def test_unregistered_destination():
    net, a, _ = sim_pair()
    with pytest.raises(Unreachable):
        net.send_frame(a.pid.id, 99, encode_frame(env(a, a, 1)))


def test_livelock_guard():
    net = SimNetwork(SimConfig(seed=0, max_events=20))
    a, b = Box(PeerId(1, "a"), echo=True), Box(PeerId(2, "b"), echo=True)
    a.transport = net.register(a)
    b.transport = net.register(b)
    a.transport.send(env(a, b, 1))
    with pytest.raises(LivelockGuard):
        net.run_until_quiescent()


def test_deadlock_is_reported():
    net = SimNetwork()

    async def never():
        await net.loop.create_future()

    with pytest.raises(Deadlock):
        net.run(never())


def test_timers_advance_virtual_time():
    net = SimNetwork()

    async def nap():
        await asyncio.sleep(250)
        return net.now

    assert net.timed(nap()) == (250, 250)


def test_split_address():
    assert split_address("127.0.0.1:80") == ("127.0.0.1", 80)
    assert split_address(":81") == ("127.0.0.1", 81)
    with pytest.raises(ValueError):
        split_address("nope")


# -- sockets -------------------------------------------------------------------

def _free_port():
    import socket
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_socket_frames_roundtrip():
    async def go():
        a = Box(PeerId(1, f"127.0.0.1:{_free_port()}"))
        b = Box(PeerId(2, f"127.0.0.1:{_free_port()}"), echo=True)
        ta, tb = SocketTransport(a.pid), SocketTransport(b.pid)
        a.transport, b.transport = ta, tb
        await ta.start(a)
        await tb.start(b)
        sent = [env(a, b, i, i) for i in range(20)]
        for e in sent:
            ta.send(e, b.pid)
        for _ in range(200):
            if len(a.got) == 20:
                break
            await asyncio.sleep(0.01)
        await ta.close()
        await tb.close()
        return sent, a, b

    sent, a, b = asyncio.run(go())
    assert [e for e, _ in b.got] == sent
    assert [e.request_id for e, _ in a.got] == list(range(20))


def test_socket_unreachable_reports_failure():
    async def go():
        a = Box(PeerId(1, f"127.0.0.1:{_free_port()}"))
        ta = SocketTransport(a.pid, connect_timeout=0.5)
        a.transport = ta
        await ta.start(a)
        dead = PeerId(3, f"127.0.0.1:{_free_port()}")
        ta.send(Envelope(a.pid, 3, 1, ReplicateAck(0)), dead)
        for _ in range(100):
            if a.failed:
                break
            await asyncio.sleep(0.01)
        await ta.close()
        return a

    a = asyncio.run(go())
    assert len(a.failed) == 1 and isinstance(a.failed[0][1], Unreachable)


def test_client_gets_reply_on_its_connection():
    async def go():
        node = Box(PeerId(1, f"127.0.0.1:{_free_port()}"))
        tn = SocketTransport(node.pid)
        node.transport = tn

        def deliver(e):
            tn.send(Envelope(node.pid, e.sender.id, e.request_id, ClientReply(True, "pong")), e.sender)

        node.deliver = deliver
        await tn.start(node)
        client = ClientConnection(node.pid.address)
        reply = await client.request(ClientStatus(), timeout=5)
        await client.close()
        await tn.close()
        return reply

    reply = asyncio.run(go())
    assert reply.message == ClientReply(True, "pong")


def test_duplicate_listen_address_fails():
    async def go():
        addr = f"127.0.0.1:{_free_port()}"
        t1, t2 = SocketTransport(PeerId(1, addr)), SocketTransport(PeerId(2, addr))
        await t1.start(Box(PeerId(1, addr)))
        try:
            with pytest.raises(OSError):
                await t2.start(Box(PeerId(2, addr)))
        finally:
            await t1.close()

    asyncio.run(go())
