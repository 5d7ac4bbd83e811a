"""Shared fixtures: hand-built tries and random workloads."""
import random

from p2prdf.cluster import SimCluster
from p2prdf.keyspace import BitKey, Layout, interval
from p2prdf.overlay import Phase, PeerConfig, RoutingTable, replica_census

QUADRANT_PATHS = ("00", "01", "10", "11")


def quadrant_cluster(m=6, seed=0):
    """Peer1..Peer4 on paths 00, 01, 10, 11 with one reference per level."""
    cluster = SimCluster(4, seed=seed, peer_config=PeerConfig(m=m, replicate=False))
    p1, p2, p3, p4 = cluster.peers
    wiring = {
        p1: ("00", [[p3], [p2]]),
        p2: ("01", [[p4], [p1]]),
        p3: ("10", [[p1], [p4]]),
        p4: ("11", [[p2], [p3]]),
    }
    for peer, (path, levels) in wiring.items():
        peer.path = BitKey.from_bits(path)
        peer.routing = RoutingTable(2)
        for level, refs in enumerate(levels):
            for ref in refs:
                peer.routing.add(level, ref.pid)
        for other in cluster.peers:
            if other is not peer:
                peer.known[other.pid.id] = other.pid
        peer.phase = Phase.RUNNING
    return cluster


def random_workload(seed, n_triples, n_subjects=None, n_predicates=6):
    """Triples over a small vocabulary so that patterns and joins match often."""
    rng = random.Random(seed)
    n_subjects = n_subjects or max(4, n_triples // 20)
    subjects = [rng.getrandbits(32) for _ in range(n_subjects)]
    predicates = [rng.getrandbits(32) for _ in range(n_predicates)]
    objects = subjects + [rng.getrandbits(32) for _ in range(n_subjects)]
    triples = set()
    while len(triples) < n_triples:
        triples.add((rng.choice(subjects), rng.choice(predicates), rng.choice(objects)))
    return sorted(triples), subjects, predicates, objects


def check_partition(intervals, m=96):
    """Sorted intervals must tile [0, 2^m) without gaps or overlaps."""
    cursor = 0
    for iv in sorted(intervals):
        if iv.lo != cursor:
            return False
        cursor = iv.hi
    return cursor == 1 << m


def check_routing(peers):
    """Every level-i reference shares i bits with the owner and differs at bit i."""
    by_id = {p.pid.id: p for p in peers}
    for peer in peers:
        assert len(peer.routing) <= len(peer.path) or all(
            not refs for refs in peer.routing.levels[len(peer.path):])
        for level, refs in enumerate(peer.routing.levels[:len(peer.path)]):
            for ref in refs:
                other = by_id[ref.id].path
                assert len(other) > level
                assert other.prefix(level) == peer.path.prefix(level)
                assert other.bit(level) != peer.path.bit(level)


def check_ownership(peers, m=96):
    for peer in peers:
        iv = interval(peer.path, m)
        for layout in Layout:
            keys = peer.storage.keys(layout)
            assert all(k in iv for k in keys), (peer, layout)


def census_copies(cluster):
    return set(replica_census(cluster.peers).values())
