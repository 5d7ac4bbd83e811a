"""Transports: a deterministic simulator and a TCP socket backend.

Both hand whole frames (see ``messages``) to a peer's ``deliver`` method and
accept outbound envelopes through ``send(env, dest)``.  A peer never knows
which backend it runs on.

The simulator runs asyncio code on a virtual clock.  Time only moves when
nothing is runnable, jumping straight to the next timer or delivery.  One
virtual tick is reported as one millisecond.
"""
from __future__ import annotations

import asyncio
import hashlib
import heapq
import logging
import random
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Any, Awaitable, Protocol

from .messages import Envelope, PeerId, WireError, decode_frame, decode_payload, encode_frame, frame_length

log = logging.getLogger(__name__)

# 1000 frames of 1 KiB take 1147 ticks when sent back to back
CALIBRATED_PER_MESSAGE = 1.0
CALIBRATED_PER_KB = 0.147


class Unreachable(ConnectionError):
    """The destination is not registered or cannot be connected to."""


class LivelockGuard(RuntimeError):
    """The simulator processed more events than its configured bound."""


class Deadlock(RuntimeError):
    """The awaited coroutine cannot finish: no events remain."""


class Receiver(Protocol):
    pid: PeerId

    def deliver(self, env: Envelope) -> None: ...

    def send_failed(self, env: Envelope, exc: Exception) -> None: ...


# -- virtual time event loop ----------------------------------------------------

class _Quiescent(Exception):
    pass


class _VirtualSelector:
    def __init__(self, loop: "VirtualLoop"):
        self._loop = loop

    def select(self, timeout):
        loop = self._loop
        loop.iterations += 1
        if loop.iterations > loop.max_iterations:
            raise LivelockGuard(f"more than {loop.max_iterations} loop iterations")
        if timeout is None:
            raise _Quiescent()
        if timeout > 0 and loop._scheduled:
            # jump exactly to the next deadline; avoids float drift from adding timeouts
            loop._now = max(loop._now, loop._scheduled[0].when())
        return []

    def close(self):
        pass


class VirtualLoop(asyncio.BaseEventLoop):
    """An asyncio loop whose clock is advanced by the loop itself."""

    def __init__(self, max_iterations: int = 50_000_000):
        super().__init__()
        self._now = 0.0
        self._selector = _VirtualSelector(self)
        self.iterations = 0
        self.max_iterations = max_iterations
        self._clock_resolution = 1e-9

    def time(self) -> float:
        return self._now

    def _process_events(self, event_list):
        pass

    def _write_to_self(self):
        pass

    def run_until_quiescent(self) -> float:
        start = self._now
        try:
            self.run_forever()
        except _Quiescent:
            pass
        return self._now - start


# -- simulated network ----------------------------------------------------------

@dataclass
class SimConfig:
    seed: int = 0
    per_message_latency: float = CALIBRATED_PER_MESSAGE
    per_kilobyte_latency: float = CALIBRATED_PER_KB
    max_events: int = 50_000_000
    trace: bool = True


@dataclass(frozen=True)
class TraceEvent:
    time: float
    src: int
    dst: int
    tag: int


class SimNetwork:
    """Fully connected in-process network with a seeded delivery order.

    Each sender has one uplink and each receiver one downlink; a frame of
    ``size`` bytes occupies both for ``per_message + per_kb * size/1024``
    ticks, so frames from one peer (or to one peer) queue behind each other.
    Frames from one sender to one receiver are delivered in send order;
    frames arriving at the same instant are ordered by a seeded per-pair rank.
    """

    def __init__(self, config: SimConfig | None = None):
        self.config = config or SimConfig()
        self.loop = VirtualLoop(self.config.max_events)
        self._peers: dict[int, Receiver] = {}
        self._heap: list[tuple[float, int, int, int, int, bytes]] = []
        self._seq = 0
        self._uplink_free: dict[int, float] = defaultdict(float)
        self._downlink_free: dict[int, float] = defaultdict(float)
        self._rank_cache: dict[tuple[int, int], int] = {}
        self.messages = 0
        self.bytes = 0
        self.by_tag: Counter = Counter()
        self.trace: list[TraceEvent] = []
        self.events = 0
        self._failure: Exception | None = None

    # registration

    def register(self, peer: Receiver) -> "SimTransport":
        if peer.pid.id in self._peers:
            raise ValueError(f"peer id {peer.pid.id:#x} already registered")
        self._peers[peer.pid.id] = peer
        return SimTransport(self, peer.pid)

    def unregister(self, peer_id: int) -> None:
        self._peers.pop(peer_id, None)

    @property
    def now(self) -> float:
        return self.loop.time()

    def latency(self, size: int) -> float:
        return self.config.per_message_latency + self.config.per_kilobyte_latency * size / 1024.0

    def _rank(self, src: int, dst: int) -> int:
        rank = self._rank_cache.get((src, dst))
        if rank is None:
            digest = hashlib.blake2b(
                f"{self.config.seed}:{src}:{dst}".encode(), digest_size=8
            ).digest()
            rank = self._rank_cache[(src, dst)] = int.from_bytes(digest, "big")
        return rank

    def send_frame(self, src: int, dst: int, frame: bytes) -> float:
        if dst not in self._peers:
            raise Unreachable(f"no simulated peer {dst:#x}")
        now = self.loop.time()
        d = self.latency(len(frame))
        start = max(now, self._uplink_free[src])
        self._uplink_free[src] = start + d
        arrival = max(start, self._downlink_free[dst]) + d
        self._downlink_free[dst] = arrival
        self._seq += 1
        heapq.heappush(self._heap, (arrival, self._rank(src, dst), self._seq, src, dst, frame))
        self.loop.call_at(arrival, self._pump, arrival)
        self.messages += 1
        self.bytes += len(frame)
        return arrival

    def _pump(self, due: float) -> None:
        # asyncio may run a timer up to its clock resolution early, so the
        # frame this callback was scheduled for counts as due even then
        now = self.loop.time()
        limit = max(now, due)
        heap = self._heap
        while heap and heap[0][0] <= limit:
            _, _, _, src, dst, frame = heapq.heappop(heap)
            self.events += 1
            if self.events > self.config.max_events:
                # exceptions raised inside loop callbacks are swallowed, so stop and re-raise later
                self._failure = LivelockGuard(f"more than {self.config.max_events} deliveries")
                self.loop.stop()
                return
            peer = self._peers.get(dst)
            env = decode_frame(frame)
            self.by_tag[type(env.message).__name__] += 1
            if self.config.trace:
                self.trace.append(TraceEvent(now, src, dst, frame[4]))
            if peer is None:
                log.debug("dropping frame for departed peer %#x", dst)
                continue
            peer.deliver(env)

    # driving

    def run_until_quiescent(self) -> float:
        """Process events until nothing is in flight; returns elapsed ticks."""
        elapsed = self.loop.run_until_quiescent()
        self._check()
        return elapsed

    def _check(self) -> None:
        if self._failure is not None:
            failure, self._failure = self._failure, None
            raise failure

    def run(self, aw: Awaitable[Any]) -> Any:
        """Run ``aw`` to completion on the virtual clock and return its result."""
        try:
            result = self.loop.run_until_complete(aw)
        except RuntimeError:
            self._check()
            raise
        except _Quiescent:
            raise Deadlock("the awaited coroutine is stuck with no pending events") from None
        self._check()
        return result

    def timed(self, aw: Awaitable[Any]) -> tuple[Any, float]:
        start = self.now
        result = self.run(aw)
        return result, self.now - start

    def counters(self) -> tuple[int, int]:
        return self.messages, self.bytes

    def trace_digest(self) -> str:
        h = hashlib.sha256()
        for ev in self.trace:
            h.update(f"{ev.time!r}:{ev.src}:{ev.dst}:{ev.tag};".encode())
        return h.hexdigest()

    def close(self) -> None:
        self.loop.close()


class SimTransport:
    def __init__(self, network: SimNetwork, pid: PeerId):
        self.network = network
        self.pid = pid
        self.loop = network.loop

    def send(self, env: Envelope, dest: PeerId | None = None) -> None:
        self.network.send_frame(self.pid.id, env.to, encode_frame(env))

    async def close(self) -> None:
        self.network.unregister(self.pid.id)


# -- sockets --------------------------------------------------------------------

def split_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {address!r}")
    return host or "127.0.0.1", int(port)


async def read_frame(reader: asyncio.StreamReader) -> Envelope | None:
    """Read one frame; None on a clean end of stream."""
    try:
        header = await reader.readexactly(4)
    except asyncio.IncompleteReadError as exc:
        if exc.partial:
            raise WireError("connection closed inside a frame header") from None
        return None
    payload = await reader.readexactly(frame_length(header))
    return decode_payload(payload)


class SocketTransport:
    """Length-prefixed frames over TCP, one outbound connection per address.

    Inbound frames go through a queue that a single task drains into the
    peer, so the peer's state is only touched from one context.  Replies to
    a sender without a listen address (a CLI client) go back over the
    connection the request arrived on.
    """

    def __init__(self, pid: PeerId, *, connect_timeout: float = 2.0):
        self.pid = pid
        self.connect_timeout = connect_timeout
        self.loop: asyncio.AbstractEventLoop | None = None
        self.receiver: Receiver | None = None
        self.inbox: asyncio.Queue[Envelope] | None = None
        self._server: asyncio.AbstractServer | None = None
        self._outboxes: dict[str, asyncio.Queue] = {}
        self._writer_tasks: dict[str, asyncio.Task] = {}
        self._reply_writers: dict[int, asyncio.StreamWriter] = {}
        self._tasks: set[asyncio.Task] = set()
        self.messages = 0
        self.bytes = 0

    async def start(self, receiver: Receiver, listen: bool = True) -> None:
        self.loop = asyncio.get_running_loop()
        self.receiver = receiver
        self.inbox = asyncio.Queue()
        if listen:
            host, port = split_address(self.pid.address)
            self._server = await asyncio.start_server(self._on_connection, host, port)
        self._spawn(self._drain_inbox())

    def _spawn(self, coro) -> asyncio.Task:
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    async def _drain_inbox(self) -> None:
        assert self.inbox is not None and self.receiver is not None
        while True:
            env = await self.inbox.get()
            try:
                self.receiver.deliver(env)
            except Exception:
                log.exception("peer failed to handle %s", type(env.message).__name__)

    async def _on_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                env = await read_frame(reader)
                if env is None:
                    break
                if not env.sender.address:
                    self._reply_writers[env.sender.id] = writer
                self.inbox.put_nowait(env)
        except (WireError, asyncio.IncompleteReadError, ConnectionError) as exc:
            log.warning("dropping inbound connection: %s", exc)
        finally:
            for key in [k for k, w in self._reply_writers.items() if w is writer]:
                del self._reply_writers[key]
            writer.close()

    def send(self, env: Envelope, dest: PeerId | None = None) -> None:
        frame = encode_frame(env)
        self.messages += 1
        self.bytes += len(frame)
        reply = self._reply_writers.get(env.to)
        if reply is not None and (dest is None or not dest.address):
            reply.write(frame)
            return
        if dest is None or not dest.address:
            raise Unreachable(f"no address for peer {env.to:#x}")
        queue = self._outboxes.get(dest.address)
        if queue is None:
            queue = self._outboxes[dest.address] = asyncio.Queue()
            self._writer_tasks[dest.address] = self._spawn(self._writer(dest.address, queue))
        queue.put_nowait((env, frame))

    async def _writer(self, address: str, queue: asyncio.Queue) -> None:
        writer = None
        try:
            while True:
                env, frame = await queue.get()
                try:
                    if writer is None:
                        host, port = split_address(address)
                        reader, writer = await asyncio.wait_for(
                            asyncio.open_connection(host, port), self.connect_timeout
                        )
                        # replies from the remote side come back on their own connection
                        self._spawn(self._discard_reader(reader))
                    writer.write(frame)
                    await writer.drain()
                except (OSError, asyncio.TimeoutError) as exc:
                    if writer is not None:
                        writer.close()
                    writer = None
                    self._fail(env, Unreachable(f"{address}: {exc}"))
                    while not queue.empty():
                        self._fail(queue.get_nowait()[0], Unreachable(f"{address}: {exc}"))
        finally:
            if writer is not None:
                writer.close()

    async def _discard_reader(self, reader: asyncio.StreamReader) -> None:
        try:
            while await reader.read(65536):
                pass
        except (ConnectionError, OSError):
            pass

    def _fail(self, env: Envelope, exc: Exception) -> None:
        log.debug("send to %#x failed: %s", env.to, exc)
        if self.receiver is not None:
            self.receiver.send_failed(env, exc)

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for task in list(self._tasks):
            task.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)


class ClientConnection:
    """A one-connection client that talks to a node without listening itself."""

    def __init__(self, address: str, client_id: int | None = None):
        self.address = address
        self.pid = PeerId(client_id if client_id is not None else random.getrandbits(63), "")
        self._reader: asyncio.StreamReader | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._next_id = 1

    async def connect(self, timeout: float = 2.0) -> None:
        host, port = split_address(self.address)
        try:
            self._reader, self._writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
        except (OSError, asyncio.TimeoutError) as exc:
            raise Unreachable(f"{self.address}: {exc}") from None

    async def request(self, message, to: int = 0, timeout: float = 60.0) -> Envelope:
        if self._writer is None:
            await self.connect()
        request_id = self._next_id
        self._next_id += 1
        self._writer.write(encode_frame(Envelope(self.pid, to, request_id, message)))
        await self._writer.drain()
        while True:
            env = await asyncio.wait_for(read_frame(self._reader), timeout)
            if env is None:
                raise Unreachable(f"{self.address} closed the connection")
            if env.request_id == request_id:
                return env

    async def close(self) -> None:
        if self._writer is not None:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except (ConnectionError, OSError):
                pass

