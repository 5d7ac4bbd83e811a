"""Simulator campaigns: data-size scaling of single patterns, and star joins
against per-peer storage.

Both campaigns run on pre-partitioned balanced tries so that every peer
holds a comparable share of the key space, and report virtual query time
in calibrated milliseconds.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from typing import IO, Iterable, Sequence

from .cluster import SimCluster
from .keyspace import Layout, TripleId
from .network import SimConfig
from .overlay import PeerConfig
from .query import Executor, TriplePattern, Var, plan
from . import generator

log = logging.getLogger(__name__)

EXP1_SIZES = (26_000, 52_000, 140_000, 208_000, 416_000, 720_000, 1_000_000, 2_000_000)
EXP2_TUPLES = (1_000, 10_000, 100_000, 1_000_000)
PEER_COUNTS = (4, 8, 16)

CSV_COLUMNS = (
    "experiment", "n_peers", "dataset_size", "tuples_per_peer", "query",
    "qet_ms", "hops", "messages", "bytes", "results",
)

# raw ids of the synthetic star join
Q_SUBJECT, Q_LINK, Q_LEFT, Q_RIGHT = 1, 2, 3, 4


@dataclass
class Row:
    experiment: str
    n_peers: int
    dataset_size: int
    tuples_per_peer: int
    query: str
    qet_ms: float
    hops: int
    messages: int
    bytes: int
    results: int


@dataclass
class ExperimentSpec:
    """Everything a campaign depends on; equal specs give equal CSV."""

    experiment: str = "exp1"
    peers: Sequence[int] = PEER_COUNTS
    sizes: Sequence[int] = EXP1_SIZES
    tuples_per_peer: Sequence[int] = EXP2_TUPLES
    queries: Sequence[str] = ("TP1", "TP2")
    per_message_latency: float = SimConfig.per_message_latency
    per_kilobyte_latency: float = SimConfig.per_kilobyte_latency
    retrieval_rate: float = 0.01
    repetitions: int = 1
    seed: int = 0
    prepartition: bool = True

    def sim_config(self, seed: int) -> SimConfig:
        return SimConfig(
            seed=seed,
            per_message_latency=self.per_message_latency,
            per_kilobyte_latency=self.per_kilobyte_latency,
            trace=False,
        )


def _measure(cluster: SimCluster, coro_factory, repetitions: int):
    """Mean virtual time of ``repetitions`` runs, with the last run's counters."""
    net = cluster.network
    total = 0.0
    result = None
    messages = nbytes = 0
    for _ in range(max(1, repetitions)):
        cluster.network.run_until_quiescent()
        m0, b0 = net.counters()
        result, elapsed = net.timed(coro_factory())
        m1, b1 = net.counters()
        total += elapsed
        messages, nbytes = m1 - m0, b1 - b0
    return result, total / max(1, repetitions), messages, nbytes


def _build(spec: ExperimentSpec, n: int, triples=(), terms=(), peer_config: PeerConfig | None = None) -> SimCluster:
    cluster = SimCluster(n, seed=spec.seed, peer_config=peer_config, sim_config=spec.sim_config(spec.seed))
    if spec.prepartition:
        cluster.build_prepartitioned(triples, terms, replicate=False)
    else:
        cluster.build_exchange(triples, terms)
    return cluster


def _initiator(cluster: SimCluster):
    # the peer at the far end of the key space, so lookups have to travel
    return max(cluster.peers, key=lambda p: p.interval.lo)


# -- Exp1 --------------------------------------------------------------------------

def run_exp1(spec: ExperimentSpec) -> list[Row]:
    """Single-pattern query time over growing prefixes of one dataset."""
    sizes = sorted(spec.sizes)
    records = generator.records_for(sizes[-1])
    dataset = generator.encode(generator.experiment_dataset(records, spec.seed))
    triples = dataset.triples
    patterns = {"TP1": generator.tp1(dataset.dictionary), "TP2": generator.tp2(dataset.dictionary)}
    rows = []
    for n in spec.peers:
        # exchange mode grows the trie from the smallest prefix, then loads the rest directly
        first = generator.records_for(sizes[0]) * generator.TRIPLES_PER_RECORD
        seed_data = () if spec.prepartition else triples[:first]
        cluster = _build(spec, n, seed_data, dataset.dictionary.items(), PeerConfig(replicate=False))
        loaded = len(seed_data)
        for size in sizes:
            target = min(len(triples), generator.records_for(size) * generator.TRIPLES_PER_RECORD)
            if target > loaded:
                cluster.load(triples[loaded:target])
                loaded = target
            initiator = _initiator(cluster)
            for name in spec.queries:
                pattern = patterns[name]
                result, qet, messages, nbytes = _measure(
                    cluster, lambda: Executor(initiator).resolve_pattern(pattern), spec.repetitions
                )
                if result.partial:
                    log.warning("exp1 n=%d size=%d %s returned a partial result", n, size, name)
                rows.append(Row(
                    "exp1", n, loaded, loaded // n, name, round(qet, 3),
                    result.hops, messages, nbytes, len(result.triples),
                ))
                log.info("exp1 n=%d size=%d %s qet=%.1f results=%d", n, loaded, name, qet, len(result.triples))
        cluster.close()
    return rows


# -- Exp2 --------------------------------------------------------------------------

def star_query() -> list[TriplePattern]:
    x, y, z = Var("x"), Var("y"), Var("z")
    return [
        TriplePattern(Q_SUBJECT, Q_LINK, x),
        TriplePattern(x, Q_LEFT, y),
        TriplePattern(x, Q_RIGHT, z),
    ]


def star_data(cluster: SimCluster, tuples_per_peer: int, rate: float) -> list[TripleId]:
    """One join subject inside every peer's SPO interval, each with a
    ``rate`` share of the peer's nominal storage as matching tuples."""
    per_subject = max(1, math.ceil(rate * tuples_per_peer))
    out = []
    for i, peer in enumerate(sorted(cluster.peers, key=lambda p: p.interval.lo)):
        x = (peer.interval.lo >> 64) + 0x100 + i
        out.append(TripleId(Q_SUBJECT, Q_LINK, x))
        out.extend(TripleId(x, Q_LEFT, 0x1000_0000 + y) for y in range(per_subject))
        out.append(TripleId(x, Q_RIGHT, 0x2000_0000 + i))
    return out


def run_exp2(spec: ExperimentSpec) -> list[Row]:
    """Star-join query time against the number of tuples each peer stores."""
    if not spec.prepartition:
        raise ValueError("the star-join campaign places data by peer interval and needs a pre-partitioned trie")
    rows = []
    steps = plan(star_query())
    for tuples in spec.tuples_per_peer:
        for n in spec.peers:
            cfg = PeerConfig(replicate=False, retrieval_rate=spec.retrieval_rate, storage_capacity=tuples)
            cluster = _build(spec, n, peer_config=cfg)
            cluster.load(star_data(cluster, tuples, spec.retrieval_rate), layouts=(Layout.SPO,))
            initiator = _initiator(cluster)
            holder = {}

            def run():
                holder["ex"] = ex = Executor(initiator)
                return ex.execute_join(steps)

            result, qet, messages, nbytes = _measure(cluster, run, spec.repetitions)
            rows.append(Row(
                "exp2", n, n * tuples, tuples, "star", round(qet, 3),
                holder["ex"].hops, messages, nbytes, len(result.bindings),
            ))
            log.info("exp2 n=%d tuples=%d qet=%.1f results=%d", n, tuples, qet, len(result.bindings))
            cluster.close()
    return rows


def run(spec: ExperimentSpec) -> list[Row]:
    if spec.experiment == "exp1":
        return run_exp1(spec)
    if spec.experiment == "exp2":
        return run_exp2(spec)
    raise ValueError(f"unknown experiment {spec.experiment!r}")


def write_csv(rows: Iterable[Row], fh: IO[str]) -> None:
    writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(asdict(row))


def read_csv(fh: IO[str]) -> list[Row]:
    out = []
    for rec in csv.DictReader(fh):
        out.append(Row(
            rec["experiment"], int(rec["n_peers"]), int(rec["dataset_size"]), int(rec["tuples_per_peer"]),
            rec["query"], float(rec["qet_ms"]), int(rec["hops"]), int(rec["messages"]),
            int(rec["bytes"]), int(rec["results"]),
        ))
    return out
