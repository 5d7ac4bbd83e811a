"""Simulated clusters: N peers on one SimNetwork, built by exchange or pre-partitioned."""
from __future__ import annotations

import asyncio
import random
from typing import Iterable, Sequence

from .dictionary import Dictionary, fnv1a_64
from .keyspace import KeyInterval, Layout
from .messages import PeerId
from .network import SimConfig, SimNetwork
from .overlay import Peer, PeerConfig, Phase, assign_prepartition, load_prepartitioned, replica_census


def peer_id_for(address: str) -> PeerId:
    return PeerId(fnv1a_64(address.encode("utf-8")), address)


class SimCluster:
    def __init__(
        self,
        n: int,
        *,
        seed: int = 0,
        peer_config: PeerConfig | None = None,
        sim_config: SimConfig | None = None,
        shared_dictionary: Dictionary | None = None,
    ):
        if n < 1:
            raise ValueError("a cluster needs at least one peer")
        self.seed = seed
        self.network = SimNetwork(sim_config or SimConfig(seed=seed))
        base = peer_config or PeerConfig()
        self.peers: list[Peer] = []
        for i in range(n):
            pid = peer_id_for(f"sim-{i}")
            cfg = PeerConfig(**{**base.__dict__, "seed": (seed << 8) ^ i})
            peer = Peer(pid, cfg, dictionary=shared_dictionary)
            peer.attach(self.network.register(peer))
            self.peers.append(peer)

    @property
    def loop(self):
        return self.network.loop

    def run(self, aw):
        return self.network.run(aw)

    def timed(self, aw):
        return self.network.timed(aw)

    # construction modes

    def build_exchange(self, triples: Sequence[Sequence[int]] = (), terms: Iterable[tuple[int, str]] = ()) -> float:
        """Scatter the data over the peers, then run the whole join protocol.

        Returns the virtual time the construction took.
        """
        rng = random.Random(self.seed)
        terms = list(terms)
        for t in triples:
            peer = self.peers[rng.randrange(len(self.peers))]
            peer.storage.insert_triple(t)
        for peer in self.peers:
            peer.dictionary.register_many(terms)
        first = self.peers[0].pid

        async def go():
            await self.peers[0].bootstrap([])
            for peer in self.peers[1:]:
                await peer.bootstrap([first])
            await asyncio.gather(*(self._finish(p) for p in self.peers))

        _, elapsed = self.timed(go())
        self.network.run_until_quiescent()
        return elapsed

    async def _finish(self, peer: Peer) -> None:
        await peer.run_exchange_phase()
        await peer.replicate_blocks()

    def build_prepartitioned(
        self,
        triples: Sequence[Sequence[int]] = (),
        terms: Iterable[tuple[int, str]] = (),
        *,
        replicate: bool = True,
        layouts: Iterable[Layout] = tuple(Layout),
    ) -> None:
        assign_prepartition(self.peers, seed=self.seed)
        terms = list(terms)
        for peer in self.peers:
            if terms:
                peer.dictionary.register_many(terms)
        if triples:
            load_prepartitioned(self.peers, triples, layouts)
        if replicate:
            self.replicate()

    def load(self, triples: Sequence[Sequence[int]], layouts: Iterable[Layout] = tuple(Layout)) -> None:
        load_prepartitioned(self.peers, triples, layouts)

    def replicate(self) -> None:
        async def go():
            await asyncio.gather(*(p.replicate_blocks() for p in self.peers))

        self.run(go())
        self.network.run_until_quiescent()

    # inspection

    def census(self):
        return replica_census(self.peers)

    def intervals(self) -> list[KeyInterval]:
        return sorted(p.interval for p in self.peers)

    def all_running(self) -> bool:
        return all(p.phase == Phase.RUNNING for p in self.peers)

    def owner_of(self, key: int) -> Peer:
        for peer in self.peers:
            if key in peer.interval:
                return peer
        raise KeyError(key)

    def triples(self, layout: Layout = Layout.SPO) -> set:
        out = set()
        for p in self.peers:
            out.update(p.storage.triples(layout))
        return out

    def close(self) -> None:
        async def go():
            await asyncio.gather(*(p.close() for p in self.peers))

        self.run(go())
        self.network.close()
