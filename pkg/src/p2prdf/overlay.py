"""The distributed layer: binary-trie overlay peers.

A peer owns the keys under its path.  Its routing table holds, for each
level ``i`` below its path length, up to a few peers whose paths share the
first ``i`` bits and differ at bit ``i``.  Paths are built by pairwise
exchanges, after which every peer pushes its block index to one other peer
(two copies network-wide) and starts serving lookups.

All state changes happen inside ``handle_message``; the async methods only
send requests and wait for the replies that ``handle_message`` routes back
to them.
"""
from __future__ import annotations

import asyncio
import enum
import logging
import math
import random
from bisect import bisect_right
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .dictionary import Dictionary
from .keyspace import (
    EMPTY_KEY,
    KEY_BITS,
    BitKey,
    KeyInterval,
    Layout,
    common_prefix_length,
    interval,
    pack,
    val,
)
from .messages import (
    BlockEntriesResponse,
    Bootstrap,
    BootstrapAck,
    ClientLoad,
    ClientQuery,
    ClientReply,
    ClientStatus,
    DictLookup,
    DictResponse,
    Envelope,
    Error,
    ErrorCode,
    ExchangeData,
    ExchangeKind,
    ExchangeRequest,
    FetchTriples,
    InsertAck,
    InsertTriples,
    LookupRequest,
    Message,
    PathChanged,
    PeerId,
    ReplicateAck,
    ReplicateBlock,
    TriplesResponse,
)
from .network import Unreachable
from .storage import WHOLE_SPACE, BlockEntry, Molecule, Storage, UnknownMolecule

log = logging.getLogger(__name__)

# molecules group on a 64-bit prefix, so longer paths could cut through one
MAX_GROUP_PATH = 64


class Phase(enum.IntEnum):
    BOOTSTRAPPING = 0
    EXCHANGING = 1
    REPLICATING = 2
    RUNNING = 3


class BootstrapTimeout(TimeoutError):
    pass


class PartnerUnavailable(ConnectionError):
    pass


class NoRoute(LookupError):
    pass


class RemoteError(RuntimeError):
    def __init__(self, code: ErrorCode, detail: str = ""):
        super().__init__(f"{code.name}: {detail}" if detail else code.name)
        self.code = code
        self.detail = detail


class PhaseError(RuntimeError):
    pass


class _Busy(Exception):
    pass


@dataclass
class PeerConfig:
    """Protocol knobs.  Durations are in event-loop time units."""

    m: int = KEY_BITS
    refs_per_level: int = 2
    replication_target: int = 2
    quiet_rounds: int = 3
    exchange_interval: float = 10.0
    exchange_delay: float = 0.0
    request_timeout: float = 2000.0
    lookup_timeout: float = 2000.0
    bootstrap_timeout: float = 2000.0
    lock_timeout: float = 4000.0
    repush_delay: float = 5.0
    split_threshold: int = 256
    max_path_length: int | None = None
    max_hops: int = 256
    retrieval_rate: float | None = None
    storage_capacity: int | None = None
    replicate: bool = True
    replication_attempts: int = 3
    gossip: bool = True
    surplus_rounds: int = 20
    seed: int = 0

    @property
    def path_limit(self) -> int:
        limit = min(self.m, MAX_GROUP_PATH)
        if self.max_path_length is not None:
            limit = min(limit, self.max_path_length)
        return limit

    @classmethod
    def realtime(cls, **overrides) -> "PeerConfig":
        """Defaults in seconds, for the socket transport."""
        values = dict(
            exchange_interval=0.05,
            exchange_delay=0.5,
            request_timeout=2.0,
            lookup_timeout=2.0,
            bootstrap_timeout=2.0,
            lock_timeout=4.0,
            repush_delay=0.05,
        )
        values.update(overrides)
        return cls(**values)


class RoutingTable:
    """Level-indexed peer references, at most ``cap`` per level."""

    def __init__(self, cap: int = 2):
        self.cap = cap
        self.levels: list[list[PeerId]] = []

    def __len__(self) -> int:
        return len(self.levels)

    def ensure(self, n: int) -> None:
        while len(self.levels) < n:
            self.levels.append([])

    def refs(self, level: int) -> list[PeerId]:
        return self.levels[level] if level < len(self.levels) else []

    def add(self, level: int, peer: PeerId) -> bool:
        self.ensure(level + 1)
        refs = self.levels[level]
        if len(refs) >= self.cap or any(r.id == peer.id for r in refs):
            return False
        refs.append(peer)
        return True

    def remove(self, level: int, peer_id: int) -> bool:
        refs = self.refs(level)
        kept = [r for r in refs if r.id != peer_id]
        if len(kept) == len(refs):
            return False
        self.levels[level] = kept
        return True

    def peers(self) -> list[PeerId]:
        seen = {}
        for refs in self.levels:
            for r in refs:
                seen.setdefault(r.id, r)
        return list(seen.values())

    def snapshot(self) -> list[list[PeerId]]:
        return [list(refs) for refs in self.levels]


@dataclass
class LookupResult:
    layout: Layout
    range: KeyInterval
    entries: list[BlockEntry] = field(default_factory=list)
    origins: dict[int, PeerId] = field(default_factory=dict)
    hops: int = 0
    responses: int = 0
    partial: bool = False


# -- pending request bookkeeping ----------------------------------------------------

class _Call:
    def __init__(self, future: asyncio.Future, handler=None):
        self.future = future
        self.handler = handler

    def accept(self, env: Envelope) -> list[Envelope]:
        if self.future.done():
            return []
        msg = env.message
        if isinstance(msg, Error):
            self.future.set_exception(RemoteError(msg.code, msg.detail))
            return []
        if self.handler is None:
            self.future.set_result(msg)
            return []
        out, result = self.handler(env)
        self.future.set_result(result)
        return out

    def fail(self, exc: Exception) -> None:
        if not self.future.done():
            self.future.set_exception(exc)


class _LookupCollector:
    def __init__(self, future: asyncio.Future, result: LookupResult):
        self.future = future
        self.result = result
        self.covered: list[KeyInterval] = []
        self.covered_total = 0
        self._seen: set[tuple[int, int, int]] = set()

    def accept(self, env: Envelope) -> list[Envelope]:
        msg = env.message
        if self.future.done() or not isinstance(msg, BlockEntriesResponse):
            return []
        res = self.result
        res.responses += 1
        res.hops = max(res.hops, msg.hops)
        if msg.no_route:
            res.partial = True
        for origin in msg.origins:
            res.origins.setdefault(origin.id, origin)
        for entry in msg.entries:
            key = (entry.origin, entry.layout, entry.molecule_key)
            if key not in self._seen:
                self._seen.add(key)
                res.entries.append(entry)
        part = msg.range.intersect(res.range)
        if not part.empty:
            self.covered.append(part)
            self.covered_total += part.size
        if self.covered_total >= res.range.size and _union_length(self.covered) >= res.range.size:
            res.entries.sort(key=lambda e: (e.first, e.origin))
            self.future.set_result(res)
        return []

    def fail(self, exc: Exception) -> None:
        if not self.future.done():
            self.result.partial = True
            self.future.set_result(self.result)


class _InsertCollector:
    def __init__(self, future: asyncio.Future, total: int):
        self.future = future
        self.total = total
        self.count = 0
        self.stored = 0

    def accept(self, env: Envelope) -> list[Envelope]:
        msg = env.message
        if isinstance(msg, InsertAck) and not self.future.done():
            self.count += msg.count
            self.stored += msg.stored
            if self.count >= self.total:
                self.future.set_result(self.stored)
        return []

    def fail(self, exc: Exception) -> None:
        if not self.future.done():
            self.future.set_exception(exc)


def _union_length(parts: list[KeyInterval]) -> int:
    total = 0
    cur_lo = cur_hi = None
    for lo, hi in sorted(parts):
        if cur_hi is None or lo > cur_hi:
            if cur_hi is not None:
                total += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
        else:
            cur_hi = max(cur_hi, hi)
    if cur_hi is not None:
        total += cur_hi - cur_lo
    return total


_RESPONSES = (BootstrapAck, ReplicateAck, BlockEntriesResponse, TriplesResponse, DictResponse, Error, InsertAck, ClientReply)


class Peer:
    """One overlay peer: storage, path, routing table and protocol state."""

    def __init__(
        self,
        pid: PeerId,
        config: PeerConfig | None = None,
        *,
        storage: Storage | None = None,
        dictionary: Dictionary | None = None,
        data_dir=None,
    ) -> None:
        self.pid = pid
        self.config = config or PeerConfig()
        self.storage = storage or Storage(
            pid.id, split_threshold=self.config.split_threshold, data_dir=data_dir
        )
        self.dictionary = dictionary if dictionary is not None else Dictionary()
        self.path: BitKey = EMPTY_KEY
        self.routing = RoutingTable(self.config.refs_per_level)
        self.phase = Phase.BOOTSTRAPPING
        self.known: dict[int, PeerId] = {}
        # last path heard from each peer itself, and the peer sharing our path
        self.peer_paths: dict[int, BitKey] = {}
        self.twin: PeerId | None = None
        self.rng = random.Random(f"{self.config.seed}:{pid.id}")
        self.transport = None
        self.client_handler: Callable | None = None
        self.replica_target: PeerId | None = None
        self.replication_deficit = 0
        self.stats: Counter = Counter()
        self._pending: dict[int, object] = {}
        self._next_request = 1
        self._initiating = False
        self._lock: tuple[int, int, asyncio.TimerHandle] | None = None
        self._unlocked: asyncio.Event | None = None
        self._changed = False
        self._repush_handle: asyncio.TimerHandle | None = None
        self._repushing = False
        self._tasks: set[asyncio.Task] = set()

    def __repr__(self) -> str:
        return f"Peer({self.pid}, path='{self.path}', {self.phase.name})"

    # -- plumbing -------------------------------------------------------------

    def attach(self, transport) -> None:
        self.transport = transport

    @property
    def loop(self) -> asyncio.AbstractEventLoop:
        return self.transport.loop

    @property
    def interval(self) -> KeyInterval:
        return interval(self.path, self.config.m)

    def _spawn(self, coro) -> asyncio.Task:
        task = self.loop.create_task(coro)
        self._tasks.add(task)
        task.add_done_callback(self._task_done)
        return task

    def _task_done(self, task: asyncio.Task) -> None:
        self._tasks.discard(task)
        if not task.cancelled() and task.exception() is not None:
            log.error("%s: background task failed", self.pid, exc_info=task.exception())

    def _new_request_id(self) -> int:
        rid = self._next_request
        self._next_request += 1
        return rid

    def _learn_peer(self, peer: PeerId) -> bool:
        if peer.id == self.pid.id or not peer.address:
            return False
        if peer.id in self.known:
            return False
        self.known[peer.id] = peer
        return True

    def _env(self, to: int, request_id: int, message: Message) -> Envelope:
        return Envelope(self.pid, to, request_id, message)

    def deliver(self, env: Envelope) -> None:
        """Transport entry point; messages addressed to ourselves are handled inline."""
        queue = deque([env])
        while queue:
            current = queue.popleft()
            for out in self._handle_safely(current):
                if out.to == self.pid.id:
                    queue.append(out)
                else:
                    self._send(out)

    def _handle_safely(self, env: Envelope) -> list[Envelope]:
        try:
            return self.handle_message(env)
        except Exception as exc:
            log.exception("%s: failed handling %s", self.pid, type(env.message).__name__)
            if isinstance(env.message, _RESPONSES) or env.sender.id == self.pid.id:
                return []
            return [self._env(env.sender.id, env.request_id, Error(ErrorCode.INTERNAL, str(exc)))]

    def _send(self, env: Envelope, dest: PeerId | None = None) -> None:
        if env.to == self.pid.id:
            self.deliver(env)
            return
        dest = dest or self.known.get(env.to)
        try:
            self.transport.send(env, dest)
        except Unreachable as exc:
            self.send_failed(env, exc)

    def send_failed(self, env: Envelope, exc: Exception) -> None:
        """Called by the transport when an envelope could not be sent."""
        msg = env.message
        if isinstance(msg, LookupRequest):
            # whoever waits for this branch learns that it is unroutable
            reply = BlockEntriesResponse(msg.layout, msg.range, msg.hop_count, True, [], [])
            self._send(self._env(msg.initiator.id, env.request_id, reply), msg.initiator)
            return
        if isinstance(msg, InsertTriples):
            ack = InsertAck(msg.layout, len(msg.triples), 0)
            self._send(self._env(msg.initiator.id, env.request_id, ack), msg.initiator)
            return
        if isinstance(msg, ExchangeData) and msg.blocks:
            log.warning("%s: re-importing %d blocks that could not be sent", self.pid, len(msg.blocks))
            for entry, molecule in msg.blocks:
                self.storage.import_block(entry, molecule)
            return
        if isinstance(msg, (Bootstrap, ExchangeRequest, ReplicateBlock, FetchTriples, DictLookup)):
            pending = self._pending.get(env.request_id)
            if pending is not None:
                pending.fail(exc)

    async def request(self, dest: PeerId, message: Message, timeout: float | None = None, handler=None):
        """Send ``message`` and wait for the correlated reply."""
        rid = self._new_request_id()
        future = self.loop.create_future()
        self._pending[rid] = _Call(future, handler)
        try:
            self._send(self._env(dest.id, rid, message), dest)
            return await asyncio.wait_for(future, timeout or self.config.request_timeout)
        finally:
            self._pending.pop(rid, None)

    # -- dispatch ---------------------------------------------------------------

    def handle_message(self, env: Envelope) -> list[Envelope]:
        """Apply one inbound message to the peer state; returns outbound envelopes."""
        msg = env.message
        sender = env.sender
        self.stats[type(msg).__name__] += 1
        if sender.id != self.pid.id and self._learn_peer(sender) and self.phase == Phase.EXCHANGING:
            self._changed = True
        if isinstance(msg, ExchangeData) and msg.kind == ExchangeKind.REPLY:
            pending = self._pending.get(env.request_id)
            if pending is None:
                return self._late_reply(msg)
            return pending.accept(env)
        if isinstance(msg, _RESPONSES):
            pending = self._pending.get(env.request_id)
            return pending.accept(env) if pending is not None else []
        handler = self._handlers.get(type(msg))
        if handler is None:
            return [self._env(sender.id, env.request_id, Error(ErrorCode.UNKNOWN_MESSAGE, type(msg).__name__))]
        return handler(self, env)

    def _reply(self, env: Envelope, message: Message) -> list[Envelope]:
        return [self._env(env.sender.id, env.request_id, message)]

    def _on_bootstrap(self, env: Envelope) -> list[Envelope]:
        peers = [self.pid] + sorted(self.known.values(), key=lambda p: p.id)
        return self._reply(env, BootstrapAck(int(self.phase), peers))

    def _on_replicate(self, env: Envelope) -> list[Envelope]:
        msg: ReplicateBlock = env.message
        if msg.replace:
            self.storage.replace_replicas(env.sender.id, msg.entries)
        else:
            for entry in msg.entries:
                self.storage.import_replica_entry(entry)
        return self._reply(env, ReplicateAck(len(msg.entries)))

    def _on_dict_lookup(self, env: Envelope) -> list[Envelope]:
        return self._reply(env, DictResponse(self.dictionary.entries_for(env.message.ids)))

    def _on_fetch(self, env: Envelope) -> list[Envelope]:
        msg: FetchTriples = env.message
        try:
            triples, truncated = self.serve_fetch(msg.molecule_key, msg.layout, msg.range)
        except UnknownMolecule:
            return self._reply(env, Error(ErrorCode.UNKNOWN_MOLECULE, f"{msg.molecule_key:#x}"))
        return self._reply(env, TriplesResponse(msg.layout, truncated, triples))

    def serve_fetch(self, molecule_key: int, layout: Layout, rng: KeyInterval) -> tuple[list, bool]:
        triples = self.storage.fetch_molecule_triples(molecule_key, layout, rng)
        rate = self.config.retrieval_rate
        if rate is None:
            return triples, False
        capacity = self.config.storage_capacity or self.storage.tuple_count(layout)
        cap = max(1, math.ceil(rate * capacity))
        if len(triples) > cap:
            return triples[:cap], True
        return triples, False

    def _on_client(self, env: Envelope) -> list[Envelope]:
        if self.client_handler is None:
            return self._reply(env, Error(ErrorCode.UNKNOWN_MESSAGE, "this peer does not serve clients"))
        self._spawn(self._serve_client(env))
        return []

    async def _serve_client(self, env: Envelope) -> None:
        try:
            reply = await self.client_handler(env.message)
        except Exception as exc:
            log.exception("%s: client request failed", self.pid)
            reply = ClientReply(False, f"{type(exc).__name__}: {exc}")
        self._send(self._env(env.sender.id, env.request_id, reply), env.sender)

    # -- bootstrap ----------------------------------------------------------------

    async def bootstrap(self, seeds: Sequence[PeerId] = ()) -> None:
        """Learn the network from the seeds; the first peer passes no seeds."""
        if self._unlocked is None:
            self._unlocked = asyncio.Event()
            self._unlocked.set()
        contacted = False
        for seed in seeds:
            if seed.id == self.pid.id:
                continue
            try:
                ack = await self.request(seed, Bootstrap(int(self.phase)), self.config.bootstrap_timeout)
            except (asyncio.TimeoutError, Unreachable, RemoteError) as exc:
                log.warning("%s: seed %s did not answer: %s", self.pid, seed, exc)
                continue
            contacted = True
            self._learn_peer(seed)
            for peer in ack.peers:
                self._learn_peer(peer)
        if seeds and not contacted:
            raise BootstrapTimeout(f"no seed answered among {len(seeds)}")
        self.phase = Phase.EXCHANGING

    async def _refresh_membership(self) -> None:
        if not self.known:
            return
        target = self.rng.choice(sorted(self.known.values(), key=lambda p: p.id))
        try:
            ack = await self.request(target, Bootstrap(int(self.phase)))
        except (asyncio.TimeoutError, Unreachable, RemoteError):
            return
        for peer in ack.peers:
            if self._learn_peer(peer):
                self._changed = True

    # -- routing ------------------------------------------------------------------

    def route(self, key: BitKey) -> PeerId | None:
        """Next hop for ``key``; None when the key is ours."""
        j = common_prefix_length(key, self.path)
        if j == len(self.path) or j == len(key):
            return None
        refs = self.routing.refs(j)
        if not refs:
            raise NoRoute(f"no reference at level {j} for key {key}")
        return self.rng.choice(refs)

    def _divergence(self, key: int) -> int:
        return common_prefix_length(BitKey(key, self.config.m), self.path)

    def _fits(self, level: int, path: BitKey) -> bool:
        # a level-i reference shares i bits with us and differs at bit i
        return len(path) > level and common_prefix_length(self.path, path) == level

    def _learn_route(self, other: PeerId, other_path: BitKey, other_routing: list[list[PeerId]]) -> bool:
        if other.id == self.pid.id:
            return False
        self.peer_paths[other.id] = other_path
        changed = self._prune(other.id, other_path)
        self.routing.ensure(len(self.path))
        j = common_prefix_length(self.path, other_path)
        if j < len(self.path) and j < len(other_path):
            changed |= self.routing.add(j, other)
        for i in range(min(j, len(other_routing), len(self.path))):
            for ref in other_routing[i]:
                known = self.peer_paths.get(ref.id)
                if ref.id != self.pid.id and (known is None or self._fits(i, known)):
                    changed |= self.routing.add(i, ref)
        self._learn_peer(other)
        return changed

    def _prune(self, peer_id: int, path: BitKey) -> bool:
        """Drop references to ``peer_id`` that its current path no longer justifies."""
        changed = False
        for level in range(len(self.routing)):
            if not self._fits(level, path):
                changed |= self.routing.remove(level, peer_id)
        return changed

    def _depth_cap(self) -> int:
        """Deepest path worth splitting to: ceil(log2) of the known population."""
        return min(self.config.path_limit, len(self.known).bit_length())

    def _surplus(self) -> bool:
        """True for the higher-id peer of a pair stuck on one path at the depth cap."""
        twin = self.twin
        return (
            twin is not None
            and self.peer_paths.get(twin.id) == self.path
            and len(self.path) >= self._depth_cap()
            and self.pid.id > twin.id
        )

    # -- exchange -----------------------------------------------------------------

    def _decide(self, a: BitKey, b: BitKey, a_surplus: bool = False, b_surplus: bool = False) -> tuple[int, BitKey, BitKey]:
        """Case number and new paths for initiator path ``a`` and responder path ``b``.

        1 split, 2 merge as replicas, 3 the shorter path extends, 4 paths
        diverge, 5 the initiator migrates onto ``b`` and splits it, 6 the
        responder migrates onto ``a``.
        """
        l = common_prefix_length(a, b)
        cap = self._depth_cap()
        if a == b:
            if len(a) < cap:
                bit = self.rng.randrange(2)
                return 1, a.extend(bit), b.extend(1 - bit)
            return 2, a, b
        diverging = l < min(len(a), len(b))
        if diverging and a_surplus and len(b) < cap:
            bit = self.rng.randrange(2)
            return 5, b.extend(bit), b.extend(1 - bit)
        if diverging and b_surplus and len(a) < cap:
            bit = self.rng.randrange(2)
            return 6, a.extend(bit), a.extend(1 - bit)
        if l == len(a):
            return 3, a.extend(1 - b.bit(len(a))), b
        if l == len(b):
            return 3, a, b.extend(1 - a.bit(len(b)))
        return 4, a, b

    def _hand_over(self, case: int, partner_path: BitKey) -> tuple[list, list]:
        """Blocks for the partner and strays to forward, removed from local storage."""
        if case == 2:
            return self.storage.export_all(), []
        m = self.config.m
        given = []
        if common_prefix_length(partner_path, self.path) < min(len(partner_path), len(self.path)):
            for layout in Layout:
                given.extend(self.storage.extract(layout, interval(partner_path, m)))
        strays = self.storage.extract_outside(self.interval)
        return given, strays

    def _on_exchange_request(self, env: Envelope) -> list[Envelope]:
        msg: ExchangeRequest = env.message
        if self.phase != Phase.EXCHANGING:
            return self._reply(env, Error(ErrorCode.PHASE, self.phase.name))
        if self._initiating or self._lock is not None:
            return self._reply(env, Error(ErrorCode.BUSY))
        case, new_a, new_b = self._decide(msg.path, self.path, msg.surplus, self._surplus())
        changed = new_b != self.path
        migrate = self._migrate(new_b) if case == 6 else []
        self.path = new_b
        if case == 2:
            self.twin = env.sender
        changed |= self._learn_route(env.sender, new_a, msg.routing)
        given, strays = self._hand_over(case, new_a)
        out = self._forward_blocks(strays)
        if changed or given or strays:
            self._changed = True
        timer = self.loop.call_later(self.config.lock_timeout, self._lock_expired, env.request_id)
        self._lock = (env.sender.id, env.request_id, timer)
        self._unlocked.clear()
        reply = ExchangeData(ExchangeKind.REPLY, case, self.path, new_a, self.routing.snapshot(), given)
        return self._reply(env, reply) + out + migrate

    def _lock_expired(self, request_id: int) -> None:
        if self._lock is not None and self._lock[1] == request_id:
            log.warning("%s: exchange partner never finished, unlocking", self.pid)
            self._release_lock()

    def _release_lock(self) -> None:
        if self._lock is not None:
            self._lock[2].cancel()
        self._lock = None
        if self._unlocked is not None:
            self._unlocked.set()

    def _on_exchange_reply(self, env: Envelope) -> tuple[list[Envelope], bool]:
        msg: ExchangeData = env.message
        changed = msg.partner_path != self.path
        migrate = self._migrate(msg.partner_path) if msg.case == 5 else []
        self.path = msg.partner_path
        if msg.case == 2:
            self.twin = env.sender
        changed |= self._learn_route(env.sender, msg.path, msg.routing)
        out, installed = self._install_blocks(msg.blocks)
        given, strays = self._hand_over(msg.case, msg.path)
        final = ExchangeData(ExchangeKind.FINAL, msg.case, self.path, msg.path, self.routing.snapshot(), given)
        out = [self._env(env.sender.id, env.request_id, final)] + migrate + out + self._forward_blocks(strays)
        changed |= bool(installed or given or strays)
        if changed:
            self._changed = True
        return out, changed

    def _on_exchange_data(self, env: Envelope) -> list[Envelope]:
        msg: ExchangeData = env.message
        if msg.kind == ExchangeKind.FINAL:
            if self._lock is None or self._lock[:2] != (env.sender.id, env.request_id):
                log.warning("%s: unexpected exchange FINAL from %s", self.pid, env.sender)
                out, _ = self._install_blocks(msg.blocks)
                return out
            changed = self._learn_route(env.sender, msg.path, msg.routing)
            out, installed = self._install_blocks(msg.blocks)
            if changed or installed:
                self._changed = True
            self._release_lock()
            return out
        out, installed = self._install_blocks(msg.blocks)
        return out

    def _migrate(self, new_path: BitKey) -> list[Envelope]:
        """Leave our path to the twin: hand it every tuple, start a fresh routing
        table, and tell everyone we know so they can repoint their references."""
        twin = self.twin
        assert twin is not None
        blocks = []
        for layout in Layout:
            blocks.extend(self.storage.extract(layout, WHOLE_SPACE))
        log.info("%s: migrating from '%s' to '%s', twin %s keeps it", self.pid, self.path, new_path, twin)
        out = []
        if blocks:
            out.append(self._env(twin.id, 0, ExchangeData(ExchangeKind.FORWARD, 0, self.path, EMPTY_KEY, [], blocks)))
        notice = PathChanged(self.path, new_path, twin)
        for peer in sorted(self.known.values(), key=lambda p: p.id):
            out.append(self._env(peer.id, 0, notice))
        self.routing = RoutingTable(self.config.refs_per_level)
        self.twin = None
        self.stats["migrations"] += 1
        return out

    def _on_path_changed(self, env: Envelope) -> list[Envelope]:
        msg: PathChanged = env.message
        sender, repl = env.sender, msg.replacement
        self.peer_paths[sender.id] = msg.new_path
        self.peer_paths.setdefault(repl.id, msg.old_path)
        changed = False
        for level in range(len(self.routing)):
            if any(r.id == sender.id for r in self.routing.refs(level)) and not self._fits(level, msg.new_path):
                self.routing.remove(level, sender.id)
                if repl.id != self.pid.id:
                    self.routing.add(level, repl)
                changed = True
        if self.twin is not None and self.twin.id == sender.id:
            self.twin = repl if repl.id != self.pid.id else None
        self._learn_peer(repl)
        if changed and self.phase == Phase.EXCHANGING:
            self._changed = True
        return []

    def _late_reply(self, msg: ExchangeData) -> list[Envelope]:
        # the exchange timed out on our side but the partner already gave us data
        log.warning("%s: late exchange reply, keeping its %d blocks", self.pid, len(msg.blocks))
        out, _ = self._install_blocks(msg.blocks)
        return out

    def _install_blocks(self, blocks: Iterable[tuple[BlockEntry, Molecule]]) -> tuple[list[Envelope], int]:
        """Import the tuples under our path; forward the rest."""
        mine_iv = self.interval
        strays = []
        installed = 0
        for entry, molecule in blocks:
            layout = entry.layout
            keys = [pack(t, layout) for t in molecule.tuples]
            inside = [t for t, k in zip(molecule.tuples, keys) if k in mine_iv]
            outside = [t for t, k in zip(molecule.tuples, keys) if k not in mine_iv]
            if inside:
                first, last = pack(inside[0], layout), pack(inside[-1], layout)
                self.storage.import_block(
                    BlockEntry(layout, first, last, first, self.pid.id), Molecule(layout, first, tuple(inside))
                )
                installed += 1
            if outside:
                first, last = pack(outside[0], layout), pack(outside[-1], layout)
                strays.append((BlockEntry(layout, first, last, first, entry.origin), Molecule(layout, first, tuple(outside))))
        if installed:
            self._data_changed()
        return self._forward_blocks(strays), installed

    def _forward_blocks(self, blocks: list[tuple[BlockEntry, Molecule]]) -> list[Envelope]:
        if not blocks:
            return []
        by_dest: dict[int, list] = defaultdict(list)
        dests: dict[int, PeerId] = {}
        for block in blocks:
            j = self._divergence(block[0].first)
            refs = self.routing.refs(j)
            if not refs:
                log.warning("%s: no route for stray block at level %d, keeping it", self.pid, j)
                self.storage.import_block(*block)
                continue
            dest = self.rng.choice(refs)
            dests[dest.id] = dest
            by_dest[dest.id].append(block)
        out = []
        for dest_id in sorted(by_dest):
            data = ExchangeData(ExchangeKind.FORWARD, 0, self.path, EMPTY_KEY, [], by_dest[dest_id])
            out.append(self._env(dest_id, 0, data))
            self._learn_peer(dests[dest_id])
        return out

    async def exchange(self, partner: PeerId) -> bool:
        """One pairwise exchange initiated by us; True if anything changed."""
        if self.phase != Phase.EXCHANGING:
            raise PhaseError(f"exchange needs the EXCHANGING phase, not {self.phase.name}")
        if self._unlocked is None:
            self._unlocked = asyncio.Event()
            self._unlocked.set()
        await self._unlocked.wait()
        self._initiating = True
        try:
            request = ExchangeRequest(
                self.path, self.storage.block_count(), self.storage.digest(), self.routing.snapshot(),
                self._surplus(),
            )
            return await self.request(partner, request, handler=self._on_exchange_reply)
        except RemoteError as exc:
            if exc.code == ErrorCode.PHASE:
                return False
            if exc.code == ErrorCode.BUSY:
                raise _Busy() from None
            raise
        except (asyncio.TimeoutError, Unreachable) as exc:
            log.warning("%s: exchange with %s failed: %s", self.pid, partner, exc)
            self.known.pop(partner.id, None)
            return True
        finally:
            self._initiating = False

    async def _exchange_with_retry(self, partner: PeerId, attempts: int = 8) -> bool:
        for _ in range(attempts):
            try:
                return await self.exchange(partner)
            except _Busy:
                await asyncio.sleep(self.config.exchange_interval * self.rng.uniform(0.1, 1.0))
        self.stats["busy_giveups"] += 1
        return True

    async def run_exchange_phase(self) -> None:
        """Exchange with every known peer per round until R quiet rounds in a row."""
        if self.config.exchange_delay:
            await asyncio.sleep(self.config.exchange_delay)
        quiet = 0
        surplus_rounds = 0
        while quiet < self.config.quiet_rounds and self.phase == Phase.EXCHANGING:
            self._changed = False
            if self.config.gossip:
                await self._refresh_membership()
            partners = sorted(self.known.values(), key=lambda p: p.id)
            self.rng.shuffle(partners)
            for partner in partners:
                if partner.id not in self.known:
                    continue
                if await self._exchange_with_retry(partner):
                    self._changed = True
            if self._surplus() and surplus_rounds < self.config.surplus_rounds:
                # still looking for a shallow peer to move next to
                surplus_rounds += 1
                self._changed = True
            quiet = 0 if self._changed else quiet + 1
            await asyncio.sleep(self.config.exchange_interval * self.rng.uniform(0.5, 1.5))
        # a partner may still be waiting to send our FINAL
        await self._unlocked.wait()
        if self.phase == Phase.EXCHANGING:
            self.phase = Phase.REPLICATING

    # -- replication --------------------------------------------------------------

    def _replica_candidates(self) -> list[PeerId]:
        ordered: list[PeerId] = []
        for level in range(len(self.routing) - 1, -1, -1):
            refs = sorted(self.routing.refs(level), key=lambda p: p.id)
            self.rng.shuffle(refs)
            ordered.extend(r for r in refs if r not in ordered)
        ordered.extend(p for p in sorted(self.known.values(), key=lambda p: p.id) if p not in ordered)
        return ordered

    async def replicate_blocks(self) -> None:
        if self.phase < Phase.REPLICATING:
            self.phase = Phase.REPLICATING
        await self._push_replicas()
        self.phase = Phase.RUNNING

    async def _push_replicas(self) -> None:
        if not self.config.replicate or self.config.replication_target < 2:
            return
        self._repushing = True
        try:
            candidates = self._replica_candidates()
            if self.replica_target is not None:
                candidates = [self.replica_target] + [c for c in candidates if c.id != self.replica_target.id]
            for target in candidates[: self.config.replication_attempts]:
                entries = self.storage.owned_blocks()
                try:
                    await self.request(target, ReplicateBlock(True, entries))
                except (asyncio.TimeoutError, Unreachable, RemoteError) as exc:
                    log.warning("%s: replication to %s failed: %s", self.pid, target, exc)
                    continue
                self.replica_target = target
                self.replication_deficit = 0
                return
            self.replication_deficit = len(self.storage.owned_blocks())
            if self.replication_deficit:
                log.warning(
                    "%s: %d blocks below the replication target (no reachable peer)",
                    self.pid, self.replication_deficit,
                )
        finally:
            self._repushing = False

    def _data_changed(self) -> None:
        if self.phase in (Phase.REPLICATING, Phase.RUNNING) and self.config.replicate:
            if self._repush_handle is None:
                self._repush_handle = self.loop.call_later(self.config.repush_delay, self._repush)

    def _repush(self) -> None:
        self._repush_handle = None
        if self._repushing:
            self._data_changed()
            return
        self._spawn(self._push_replicas())

    # -- lifecycle ----------------------------------------------------------------

    async def start(self, seeds: Sequence[PeerId] = ()) -> None:
        """Bootstrap, build the trie, replicate, then serve."""
        await self.bootstrap(seeds)
        await self.run_exchange_phase()
        await self.replicate_blocks()

    # -- lookups ------------------------------------------------------------------

    def _on_lookup(self, env: Envelope) -> list[Envelope]:
        msg: LookupRequest = env.message
        initiator = msg.initiator
        self._learn_peer(initiator)
        out = []
        rid = env.request_id
        if msg.hop_count > self.config.max_hops:
            reply = BlockEntriesResponse(msg.layout, msg.range, msg.hop_count, True, [], [])
            return [self._env(initiator.id, rid, reply)]
        m = self.config.m
        local = msg.range.intersect(self.interval)
        if not local.empty:
            entries = self.storage.candidate_blocks(msg.layout, local)
            origin_ids = sorted({e.origin for e in entries})
            origins = [self.pid if o == self.pid.id else self.known.get(o, PeerId(o)) for o in origin_ids]
            reply = BlockEntriesResponse(msg.layout, local, msg.hop_count, False, entries, origins)
            out.append(self._env(initiator.id, rid, reply))
        for j in range(len(self.path)):
            sibling = self.path.prefix(j).extend(1 - self.path.bit(j))
            part = msg.range.intersect(interval(sibling, m))
            if part.empty:
                continue
            refs = self.routing.refs(j)
            if not refs:
                reply = BlockEntriesResponse(msg.layout, part, msg.hop_count, True, [], [])
                out.append(self._env(initiator.id, rid, reply))
                continue
            nxt = self.rng.choice(refs)
            out.append(self._env(nxt.id, rid, LookupRequest(msg.layout, part, msg.hop_count + 1, initiator)))
        return out

    async def lookup(self, layout: Layout, rng: KeyInterval, timeout: float | None = None) -> LookupResult:
        """Block entries for every block meeting ``rng`` anywhere in the overlay."""
        result = LookupResult(layout, rng)
        if rng.empty:
            return result
        rid = self._new_request_id()
        future = self.loop.create_future()
        collector = _LookupCollector(future, result)
        self._pending[rid] = collector
        timer = self.loop.call_later(timeout or self.config.lookup_timeout, collector.fail, asyncio.TimeoutError())
        try:
            self.deliver(self._env(self.pid.id, rid, LookupRequest(layout, rng, 0, self.pid)))
            return await future
        finally:
            timer.cancel()
            self._pending.pop(rid, None)

    async def fetch(self, origin: PeerId, molecule_key: int, layout: Layout, rng: KeyInterval) -> list:
        if origin.id == self.pid.id:
            triples, _ = self.serve_fetch(molecule_key, layout, rng)
            return triples
        reply = await self.request(origin, FetchTriples(molecule_key, layout, rng))
        return reply.triples

    async def dict_lookup(self, peer: PeerId, ids: Iterable[int]) -> list[tuple[int, str]]:
        ids = list(ids)
        if peer.id == self.pid.id:
            return self.dictionary.entries_for(ids)
        reply = await self.request(peer, DictLookup(ids))
        return reply.entries

    # -- inserts ------------------------------------------------------------------

    def _on_insert(self, env: Envelope) -> list[Envelope]:
        msg: InsertTriples = env.message
        initiator = msg.initiator
        self._learn_peer(initiator)
        layout = msg.layout
        rid = env.request_id
        mine_iv = self.interval
        terms = dict(msg.terms)
        mine = []
        by_level: dict[int, list] = defaultdict(list)
        for t in msg.triples:
            key = pack(t, layout)
            if key in mine_iv:
                mine.append(key)
            else:
                by_level[self._divergence(key)].append(t)
        out = []
        unroutable = 0
        for level in sorted(by_level):
            triples = by_level[level]
            refs = self.routing.refs(level)
            if not refs or msg.hop_count >= self.config.max_hops:
                unroutable += len(triples)
                continue
            sub_terms = [(i, terms[i]) for i in sorted({c for t in triples for c in t}) if i in terms]
            fwd = InsertTriples(layout, msg.hop_count + 1, initiator, triples, sub_terms)
            out.append(self._env(self.rng.choice(refs).id, rid, fwd))
        if unroutable:
            log.warning("%s: %d triples could not be routed", self.pid, unroutable)
        stored = 0
        if mine:
            ids = {c for t in msg.triples if pack(t, layout) in mine_iv for c in t}
            self.dictionary.register_many((i, terms[i]) for i in sorted(ids) if i in terms)
            stored = self.storage.insert_keys(layout, mine)
            if stored:
                self._data_changed()
        if mine or unroutable:
            out.append(self._env(initiator.id, rid, InsertAck(layout, len(mine) + unroutable, stored)))
        return out

    async def insert(
        self,
        triples: Sequence[Sequence[int]],
        terms: Sequence[tuple[int, str]] = (),
        layouts: Iterable[Layout] = tuple(Layout),
    ) -> int:
        """Route ``triples`` to their owners under each layout; returns keys newly stored."""
        triples = [tuple(t) for t in triples]
        if not triples:
            return 0
        waits = []
        for layout in layouts:
            rid = self._new_request_id()
            future = self.loop.create_future()
            self._pending[rid] = _InsertCollector(future, len(triples))
            waits.append((rid, future))
            self.deliver(self._env(self.pid.id, rid, InsertTriples(layout, 0, self.pid, triples, list(terms))))
        try:
            stored = await asyncio.wait_for(
                asyncio.gather(*(f for _, f in waits)), self.config.request_timeout * 4
            )
        finally:
            for rid, _ in waits:
                self._pending.pop(rid, None)
        return sum(stored)

    # -- status -------------------------------------------------------------------

    def status(self) -> dict:
        return {
            "id": self.pid.id,
            "address": self.pid.address,
            "phase": self.phase.name,
            "path": str(self.path),
            "routing": [[p.address or f"{p.id:#x}" for p in refs] for refs in self.routing.levels],
            "blocks": {layout.name: self.storage.block_count(layout) for layout in Layout},
            "tuples": {layout.name: self.storage.tuple_count(layout) for layout in Layout},
            "replica_entries": len(self.storage.replica_entries()),
            "replication_deficit": self.replication_deficit,
            "known_peers": len(self.known),
        }

    async def close(self) -> None:
        for task in list(self._tasks):
            task.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        if self._repush_handle is not None:
            self._repush_handle.cancel()
        self.storage.close()


Peer._handlers = {
    Bootstrap: Peer._on_bootstrap,
    ExchangeRequest: Peer._on_exchange_request,
    ExchangeData: Peer._on_exchange_data,
    PathChanged: Peer._on_path_changed,
    ReplicateBlock: Peer._on_replicate,
    LookupRequest: Peer._on_lookup,
    FetchTriples: Peer._on_fetch,
    DictLookup: Peer._on_dict_lookup,
    InsertTriples: Peer._on_insert,
    ClientLoad: Peer._on_client,
    ClientQuery: Peer._on_client,
    ClientStatus: Peer._on_client,
}


# -- pre-partitioned tries ------------------------------------------------------------

def balanced_paths(n: int) -> list[BitKey]:
    """Leaf paths of the most balanced binary trie with ``n`` leaves, in key order."""
    if n < 1:
        raise ValueError("need at least one peer")
    leaves = deque([EMPTY_KEY])
    while len(leaves) < n:
        leaf = leaves.popleft()
        leaves.append(leaf.extend(0))
        leaves.append(leaf.extend(1))
    return sorted(leaves, key=val)


def assign_prepartition(peers: Sequence[Peer], seed: int = 0) -> None:
    """Give the peers balanced paths and well-formed routing tables, then mark them running."""
    rng = random.Random(seed)
    paths = balanced_paths(len(peers))
    for peer, path in zip(peers, paths):
        peer.path = path
        peer.routing = RoutingTable(peer.config.refs_per_level)
        for other in peers:
            if other is not peer:
                peer.known[other.pid.id] = other.pid
    for peer in peers:
        for j in range(len(peer.path)):
            sibling = peer.path.prefix(j).extend(1 - peer.path.bit(j))
            candidates = [
                p for p in peers
                if p.path.length > j and p.path.prefix(j + 1) == sibling
            ]
            k = min(peer.config.refs_per_level, len(candidates))
            for chosen in rng.sample(candidates, k):
                peer.routing.add(j, chosen.pid)
        peer.phase = Phase.RUNNING


class OwnerIndex:
    """Maps keys to the peer whose path interval contains them."""

    def __init__(self, peers: Sequence[Peer]):
        self.peers = sorted(peers, key=lambda p: p.interval.lo)
        self.los = [p.interval.lo for p in self.peers]

    def owner(self, key: int) -> Peer:
        peer = self.peers[bisect_right(self.los, key) - 1]
        if key not in peer.interval:
            raise NoRoute(f"no peer owns key {key:#x}")
        return peer


def load_prepartitioned(
    peers: Sequence[Peer], triples: Sequence[Sequence[int]], layouts: Iterable[Layout] = tuple(Layout)
) -> None:
    """Bulk-load triples straight into their owners under each layout."""
    index = OwnerIndex(peers)
    for layout in layouts:
        keys = sorted(pack(t, layout) for t in triples)
        start = 0
        for i, peer in enumerate(index.peers):
            hi = peer.interval.hi
            end = bisect_right(keys, hi - 1, start)
            if end > start:
                peer.storage.insert_keys(layout, keys[start:end])
            start = end
        if start != len(keys):
            raise NoRoute("keys beyond the covered key space")


def replica_census(peers: Iterable[Peer]) -> Counter:
    """Copies per block (layout, origin, molecule key): owned blocks plus replica entries."""
    census: Counter = Counter()
    for peer in peers:
        for entry in peer.storage.owned_blocks():
            census[(entry.layout, entry.origin, entry.molecule_key)] += 1
        for entry in peer.storage.replica_entries():
            census[(entry.layout, entry.origin, entry.molecule_key)] += 1
    return census
