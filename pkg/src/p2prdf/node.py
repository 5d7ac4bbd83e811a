"""A peer daemon on the socket transport, plus the client calls the CLI makes."""
from __future__ import annotations

import asyncio
import configparser
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import ntriples
from .cluster import peer_id_for
from .dictionary import Dictionary
from .keyspace import KEY_BITS
from .messages import ClientLoad, ClientQuery, ClientReply, ClientStatus, Error
from .network import ClientConnection, SocketTransport
from .overlay import Peer, PeerConfig, Phase
from .query import Executor, format_tsv, parse_query

log = logging.getLogger(__name__)

LOAD_CHUNK = 5000


@dataclass
class NodeConfig:
    listen: str = "127.0.0.1:7400"
    seeds: list[str] = field(default_factory=list)
    data_dir: str | None = None
    replication_target: int = 2
    m: int = KEY_BITS
    exchange_interval: float = 0.05
    split_threshold: int = 256
    seed: int = 0
    data: str | None = None

    def peer_config(self) -> PeerConfig:
        return PeerConfig.realtime(
            m=self.m,
            replication_target=self.replication_target,
            exchange_interval=self.exchange_interval,
            split_threshold=self.split_threshold,
            seed=self.seed,
        )


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; seeds are comma or space separated."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    text = Path(path).read_text(encoding="utf-8")
    parser.read_string("[node]\n" + text)
    known = {f.name: f.type for f in fields(NodeConfig)}
    out = {}
    for key, raw in parser["node"].items():
        key = key.replace("-", "_")
        if key not in known:
            raise ValueError(f"{path}: unknown setting {key!r}")
        if key == "seeds":
            out[key] = [s for s in raw.replace(",", " ").split() if s]
        elif key in ("replication_target", "m", "split_threshold", "seed"):
            out[key] = int(raw)
        elif key == "exchange_interval":
            out[key] = float(raw)
        else:
            out[key] = raw
    return out


def load_config(path=None, **flags) -> NodeConfig:
    """Defaults, overridden by the file, overridden by flags that are not None."""
    values = read_config_file(path) if path else {}
    values.update({k: v for k, v in flags.items() if v is not None})
    return NodeConfig(**values)


class Node:
    def __init__(self, config: NodeConfig):
        self.config = config
        self.pid = peer_id_for(config.listen)
        self.peer = Peer(self.pid, config.peer_config(), data_dir=config.data_dir)
        self.transport = SocketTransport(self.pid)
        self.peer.attach(self.transport)
        self.peer.client_handler = self.handle_client
        self._main: asyncio.Task | None = None

    async def start(self) -> None:
        """Bind, then run the join protocol in the background."""
        await self.transport.start(self.peer)
        if self.config.data:
            triples = ntriples.read_file(self.config.data)
            for s, p, o in triples:
                t = tuple(self.peer.dictionary.encode(x) for x in (s, p, o))
                self.peer.storage.insert_triple(t)
            log.info("%s: preloaded %d triples", self.pid, len(triples))
        seeds = [peer_id_for(a) for a in self.config.seeds if a != self.config.listen]
        self._main = asyncio.ensure_future(self.peer.start(seeds))

    async def wait_running(self, timeout: float | None = None) -> None:
        async def poll():
            while self.peer.phase != Phase.RUNNING:
                if self._main is not None and self._main.done() and self._main.exception():
                    raise self._main.exception()
                await asyncio.sleep(0.02)

        await asyncio.wait_for(poll(), timeout)

    async def serve_forever(self) -> None:
        assert self._main is not None
        await self._main
        log.info("%s: running with path '%s'", self.pid, self.peer.path)
        await asyncio.Event().wait()

    async def handle_client(self, msg) -> ClientReply:
        if isinstance(msg, ClientStatus):
            return ClientReply(True, format_status(self.peer.status()))
        await self.wait_running(60.0)
        if isinstance(msg, ClientLoad):
            self.peer.dictionary.register_many(msg.terms)
            await self.peer.insert(msg.triples, msg.terms)
            return ClientReply(True, str(len(msg.triples)))
        if isinstance(msg, ClientQuery):
            query = parse_query(msg.text, self.peer.dictionary)
            ex = Executor(self.peer)
            select, result = await ex.run(query)
            if not msg.encoded:
                await ex.decode_ids(ident for b in result.bindings for ident in b.values())
            if result.partial:
                log.warning("%s: query answer is partial", self.pid)
            return ClientReply(True, format_tsv(select, result.bindings, self.peer.dictionary, msg.encoded))
        return ClientReply(False, f"unsupported request {type(msg).__name__}")

    async def stop(self) -> None:
        if self._main is not None:
            self._main.cancel()
            await asyncio.gather(self._main, return_exceptions=True)
        await self.peer.close()
        await self.transport.close()


def format_status(status: dict) -> str:
    lines = [
        f"peer: {status['address']} ({status['id']:#018x})",
        f"phase: {status['phase']}",
        f"path: {status['path']}",
    ]
    for level, refs in enumerate(status["routing"]):
        lines.append(f"level {level}: {' '.join(refs) if refs else '-'}")
    for layout, count in status["blocks"].items():
        lines.append(f"blocks {layout}: {count} ({status['tuples'][layout]} tuples)")
    lines.append(f"replica entries: {status['replica_entries']}")
    lines.append(f"replication deficit: {status['replication_deficit']}")
    lines.append(f"known peers: {status['known_peers']}")
    return "\n".join(lines) + "\n"


def parse_status(text: str) -> dict:
    """The inverse of ``format_status`` for the fields scripts care about."""
    out: dict = {}
    for line in text.splitlines():
        key, _, value = line.partition(": ")
        out[key] = value
    return out


# -- client side ------------------------------------------------------------------

class RequestFailed(RuntimeError):
    pass


async def client_call(address: str, message, timeout: float = 120.0) -> str:
    conn = ClientConnection(address)
    try:
        env = await conn.request(message, timeout=timeout)
    finally:
        await conn.close()
    reply = env.message
    if isinstance(reply, Error):
        raise RequestFailed(f"{reply.code.name}: {reply.detail}")
    if not reply.ok:
        raise RequestFailed(reply.text)
    return reply.text


async def client_load(address: str, triples, chunk: int = LOAD_CHUNK) -> int:
    """Encode term triples locally and ship them in chunks; returns the count sent."""
    dictionary = Dictionary()
    sent = 0
    for start in range(0, len(triples), chunk):
        part = triples[start:start + chunk]
        encoded = [tuple(dictionary.encode(x) for x in t) for t in part]
        terms = dictionary.entries_for(c for t in encoded for c in t)
        sent += int(await client_call(address, ClientLoad(encoded, terms)))
    return sent


async def client_query(address: str, text: str, encoded: bool = False) -> str:
    return await client_call(address, ClientQuery(text, encoded))


async def client_status(address: str) -> str:
    return await client_call(address, ClientStatus())
