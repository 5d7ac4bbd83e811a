"""Per-peer two-layer triple store.

The physical layer keeps, for each layout, the sorted 96-bit keys of the
triples this peer owns.  Keys that share their first two components form a
group; a group is cut into molecules (sorted runs of at most
``split_threshold`` tuples) at explicitly recorded split keys.  A molecule is
addressed by the key of its first tuple.

The buffer layer is the set of block entries: one summary per molecule
(first key, last key, molecule key, origin peer).  Entries for owned
molecules are derived from the physical layer on demand; replica entries
for molecules held by other peers are stored explicitly and never
contribute tuples to local scans.
"""
from __future__ import annotations

import logging
import os
import struct
from bisect import bisect_left, bisect_right, insort
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .keyspace import KEY_BITS, KeyInterval, Layout, TripleId, pack, unpack

log = logging.getLogger(__name__)

GROUP_SHIFT = 32
GROUP_SPAN = 1 << GROUP_SHIFT
DEFAULT_SPLIT_THRESHOLD = 256
WHOLE_SPACE = KeyInterval(0, 1 << KEY_BITS)

LOG_RECORD = struct.Struct(">B12s3I")
BLOCK_ENTRY = struct.Struct(">B12s12s12sQ")
_U32 = struct.Struct(">I")


class UnknownMolecule(KeyError):
    """A molecule key does not resolve in this peer's physical layer."""


@dataclass(frozen=True, slots=True)
class BlockEntry:
    layout: Layout
    first: int
    last: int
    molecule_key: int
    origin: int

    @property
    def span(self) -> KeyInterval:
        return KeyInterval(self.first, self.last + 1)


@dataclass(frozen=True, slots=True)
class Molecule:
    layout: Layout
    key: int
    tuples: tuple[TripleId, ...]


def _group_of(key: int) -> int:
    return key >> GROUP_SHIFT


class _LayoutIndex:
    __slots__ = ("layout", "keys", "splits")

    def __init__(self, layout: Layout):
        self.layout = layout
        self.keys: list[int] = []
        # molecule start keys that are not the first key of their group
        self.splits: list[int] = []

    def molecule_start(self, i: int) -> int:
        keys = self.keys
        k = keys[i]
        group_lo = (k >> GROUP_SHIFT) << GROUP_SHIFT
        start = bisect_left(keys, group_lo, 0, i + 1)
        s = bisect_right(self.splits, k) - 1
        if s >= 0 and self.splits[s] >= group_lo:
            start = max(start, bisect_left(keys, self.splits[s], start, i + 1))
        return start

    def spans(self, a: int, b: int) -> Iterator[tuple[int, int]]:
        """Index spans [x, y) of the molecules holding keys[a:b].

        ``a`` must be a molecule start; spans are complete molecules.
        """
        keys, splits = self.keys, self.splits
        n = len(keys)
        i = a
        while i < b:
            k = keys[i]
            group_hi = ((k >> GROUP_SHIFT) + 1) << GROUP_SHIFT
            j = bisect_left(keys, group_hi, i, n)
            cur = i
            for sk in splits[bisect_right(splits, k):bisect_left(splits, group_hi)]:
                e = bisect_left(keys, sk, cur, j)
                if cur >= b:
                    return
                yield cur, e
                cur = e
            if cur >= b:
                return
            yield cur, j
            i = j

    def span_of(self, i: int) -> tuple[int, int]:
        start = self.molecule_start(i)
        return next(self.spans(start, start + 1))

    def split_oversized(self, a: int, b: int, threshold: int) -> None:
        """Median-split every molecule starting in keys[a:b] until none exceeds ``threshold``."""
        new_splits = []
        stack = [span for span in self.spans(a, b) if span[1] - span[0] > threshold]
        while stack:
            x, y = stack.pop()
            mid = (x + y) // 2
            new_splits.append(self.keys[mid])
            for part in ((x, mid), (mid, y)):
                if part[1] - part[0] > threshold:
                    stack.append(part)
        if new_splits:
            self.splits = sorted(set(self.splits).union(new_splits))

    def resplit_all(self, threshold: int) -> None:
        keys = self.keys
        if not keys:
            return
        groups = [k >> GROUP_SHIFT for k in keys]
        n = len(keys)
        start = 0
        big = []
        for i in range(1, n):
            if groups[i] != groups[i - 1]:
                if i - start > threshold:
                    big.append((start, i))
                start = i
        if n - start > threshold:
            big.append((start, n))
        for a, b in big:
            self.split_oversized(a, b, threshold)


class Storage:
    """Physical layer plus buffer layer for all three layouts."""

    def __init__(
        self,
        owner: int = 0,
        *,
        split_threshold: int = DEFAULT_SPLIT_THRESHOLD,
        data_dir: str | os.PathLike | None = None,
    ) -> None:
        if split_threshold < 2:
            raise ValueError("split_threshold must be at least 2")
        self.owner = owner
        self.split_threshold = split_threshold
        self._index = {layout: _LayoutIndex(layout) for layout in Layout}
        self._replicas: dict[tuple[Layout, int, int], BlockEntry] = {}
        self._replica_sorted: dict[Layout, list[tuple[int, int, int]]] | None = None
        self.version = 0
        self._cache: dict[str, tuple[int, object]] = {}
        self._data_dir = Path(data_dir) if data_dir is not None else None
        self._logs: dict[Layout, object] = {}
        if self._data_dir is not None:
            self._data_dir.mkdir(parents=True, exist_ok=True)
            self._replay_logs()

    # -- mutation -----------------------------------------------------------

    def insert_triple(self, t: Sequence[int], layouts: Iterable[Layout] = tuple(Layout)) -> bool:
        """Insert ``t`` under each of ``layouts``; True if anything was new."""
        changed = False
        for layout in layouts:
            changed |= self._insert_key(layout, pack(t, layout))
        return changed

    def _insert_key(self, layout: Layout, key: int) -> bool:
        idx = self._index[layout]
        keys = idx.keys
        i = bisect_left(keys, key)
        if i < len(keys) and keys[i] == key:
            return False
        keys.insert(i, key)
        x, y = idx.span_of(i)
        if y - x > self.split_threshold:
            insort(idx.splits, keys[(x + y) // 2])
        self._touch()
        self._append_log(layout, [key])
        return True

    def insert_keys(self, layout: Layout, new_keys: Iterable[int]) -> int:
        """Bulk insert of layout keys; returns the number of keys that were new."""
        incoming = sorted(set(new_keys))
        if not incoming:
            return 0
        if len(incoming) < 64:
            return sum(self._insert_key(layout, k) for k in incoming)
        idx = self._index[layout]
        present = set(idx.keys)
        fresh = [k for k in incoming if k not in present]
        if not fresh:
            return 0
        idx.keys = sorted(idx.keys + fresh) if idx.keys else fresh
        idx.resplit_all(self.split_threshold)
        self._touch()
        self._append_log(layout, fresh)
        return len(fresh)

    def bulk_load(self, triples: Iterable[Sequence[int]], layouts: Iterable[Layout] = tuple(Layout)) -> int:
        triples = list(triples)
        added = 0
        for layout in layouts:
            added += self.insert_keys(layout, (pack(t, layout) for t in triples))
        return added

    def import_block(self, entry: BlockEntry, molecule: Molecule) -> int:
        """Take ownership of a transferred molecule (origin becomes this peer)."""
        layout = entry.layout
        idx = self._index[layout]
        keys = [pack(t, layout) for t in molecule.tuples]
        added = self.insert_keys(layout, keys)
        if keys:
            first = min(keys)
            i = bisect_left(idx.keys, first)
            if idx.molecule_start(i) != i:
                insort(idx.splits, first)
                self._touch()
            x, _ = idx.span_of(i)
            idx.split_oversized(x, x + 1, self.split_threshold)
        return added

    def import_replica_entry(self, entry: BlockEntry) -> None:
        if entry.origin == self.owner:
            return
        self._replicas[(entry.layout, entry.origin, entry.molecule_key)] = entry
        self._replica_sorted = None
        self._touch()

    def replace_replicas(self, origin: int, entries: Iterable[BlockEntry]) -> None:
        """Drop every replica entry from ``origin`` and install ``entries``."""
        for key in [k for k in self._replicas if k[1] == origin]:
            del self._replicas[key]
        for entry in entries:
            if entry.origin != origin:
                raise ValueError("replica entry origin does not match the replicating peer")
            self.import_replica_entry(entry)
        self._replica_sorted = None
        self._touch()

    def extract(self, layout: Layout, rng: KeyInterval) -> list[tuple[BlockEntry, Molecule]]:
        """Remove and return the owned tuples of ``layout`` inside ``rng`` as blocks."""
        idx = self._index[layout]
        keys = idx.keys
        a = bisect_left(keys, rng.lo)
        b = bisect_left(keys, rng.hi)
        if a >= b:
            return []
        boundaries = {a, b}
        boundaries.update(x for x, _ in idx.spans(idx.molecule_start(a), b) if a < x < b)
        cuts = sorted(boundaries)
        out = []
        for x, y in zip(cuts, cuts[1:]):
            chunk = keys[x:y]
            entry = BlockEntry(layout, chunk[0], chunk[-1], chunk[0], self.owner)
            out.append((entry, Molecule(layout, chunk[0], tuple(unpack(k, layout) for k in chunk))))
        follower = keys[b] if b < len(keys) else None
        del keys[a:b]
        s0 = bisect_left(idx.splits, rng.lo)
        s1 = bisect_left(idx.splits, rng.hi)
        del idx.splits[s0:s1]
        if follower is not None:
            i = bisect_left(keys, follower)
            if idx.molecule_start(i) != i:
                insort(idx.splits, follower)
        self._touch()
        self._rewrite_log(layout)
        return out

    def extract_outside(self, keep: KeyInterval) -> list[tuple[BlockEntry, Molecule]]:
        """Remove every owned block that lies outside ``keep`` (all layouts)."""
        out = []
        for layout in Layout:
            if keep.lo > 0:
                out.extend(self.extract(layout, KeyInterval(0, keep.lo)))
            if keep.hi < WHOLE_SPACE.hi:
                out.extend(self.extract(layout, KeyInterval(keep.hi, WHOLE_SPACE.hi)))
        return out

    # -- queries ------------------------------------------------------------

    def scan_range(self, layout: Layout, rng: KeyInterval) -> list[TripleId]:
        """Owned triples of ``layout`` with keys in ``rng``, ascending.

        Goes through the buffer layer: pick the owned block entries that
        overlap the range, then fetch and trim each molecule.
        """
        out: list[TripleId] = []
        for entry in self._owned_candidates(layout, rng):
            out.extend(self.fetch_molecule_triples(entry.molecule_key, layout, rng))
        return out

    def candidate_blocks(self, layout: Layout, rng: KeyInterval) -> list[BlockEntry]:
        """Owned and replica block entries whose [first, last] meets ``rng``, by first key."""
        owned = self._owned_candidates(layout, rng)
        replicas = self._replica_candidates(layout, rng)
        if not replicas:
            return owned
        return sorted(owned + replicas, key=lambda e: (e.first, e.origin))

    def _owned_candidates(self, layout: Layout, rng: KeyInterval) -> list[BlockEntry]:
        idx = self._index[layout]
        keys = idx.keys
        if rng.empty or not keys:
            return []
        i = bisect_left(keys, rng.lo)
        if i == len(keys):
            return []
        start = idx.molecule_start(i)
        end = bisect_left(keys, rng.hi, i)
        if start == end:
            return []
        owner = self.owner
        return [
            BlockEntry(layout, keys[x], keys[y - 1], keys[x], owner)
            for x, y in idx.spans(start, max(end, start + 1))
            if keys[x] < rng.hi
        ]

    def _replica_candidates(self, layout: Layout, rng: KeyInterval) -> list[BlockEntry]:
        if not self._replicas:
            return []
        if self._replica_sorted is None:
            table: dict[Layout, list[tuple[int, int, int]]] = {lay: [] for lay in Layout}
            for (lay, origin, mk), entry in self._replicas.items():
                table[lay].append((entry.first, origin, mk))
            for rows in table.values():
                rows.sort()
            self._replica_sorted = table
        rows = self._replica_sorted[layout]
        # every block lies inside one group, so its first key is within GROUP_SPAN of its last
        a = bisect_left(rows, (max(0, rng.lo - GROUP_SPAN),))
        b = bisect_left(rows, (rng.hi,))
        out = []
        for first, origin, mk in rows[a:b]:
            entry = self._replicas[(layout, origin, mk)]
            if entry.last >= rng.lo:
                out.append(entry)
        return out

    def fetch_molecule_triples(
        self, molecule_key: int, layout: Layout, rng: KeyInterval = WHOLE_SPACE
    ) -> list[TripleId]:
        idx = self._index[layout]
        x, y = self._locate(idx, molecule_key)
        keys = idx.keys
        lo = max(x, bisect_left(keys, rng.lo, x, y))
        hi = bisect_left(keys, rng.hi, lo, y)
        return [unpack(k, layout) for k in keys[lo:hi]]

    def _locate(self, idx: _LayoutIndex, molecule_key: int) -> tuple[int, int]:
        keys = idx.keys
        i = bisect_left(keys, molecule_key)
        if i == len(keys) or keys[i] != molecule_key or idx.molecule_start(i) != i:
            raise UnknownMolecule(molecule_key)
        return idx.span_of(i)

    def export_block(self, molecule_key: int, layout: Layout) -> tuple[BlockEntry, Molecule]:
        idx = self._index[layout]
        x, y = self._locate(idx, molecule_key)
        chunk = idx.keys[x:y]
        entry = BlockEntry(layout, chunk[0], chunk[-1], chunk[0], self.owner)
        return entry, Molecule(layout, chunk[0], tuple(unpack(k, layout) for k in chunk))

    def export_all(self) -> list[tuple[BlockEntry, Molecule]]:
        return [
            self.export_block(entry.molecule_key, entry.layout)
            for entry in self.owned_blocks()
        ]

    def owned_blocks(self, layout: Layout | None = None) -> list[BlockEntry]:
        layouts = [layout] if layout is not None else list(Layout)
        out = []
        for lay in layouts:
            idx = self._index[lay]
            keys = idx.keys
            if keys:
                out.extend(
                    BlockEntry(lay, keys[x], keys[y - 1], keys[x], self.owner)
                    for x, y in idx.spans(0, len(keys))
                )
        return out

    def replica_entries(self, layout: Layout | None = None) -> list[BlockEntry]:
        return [e for e in self._replicas.values() if layout is None or e.layout == layout]

    def molecules(self, layout: Layout) -> list[Molecule]:
        return [self.export_block(e.molecule_key, layout)[1] for e in self.owned_blocks(layout)]

    def keys(self, layout: Layout) -> list[int]:
        return list(self._index[layout].keys)

    def triples(self, layout: Layout = Layout.SPO) -> list[TripleId]:
        return [unpack(k, layout) for k in self._index[layout].keys]

    def tuple_count(self, layout: Layout | None = None) -> int:
        if layout is not None:
            return len(self._index[layout].keys)
        return sum(len(idx.keys) for idx in self._index.values())

    def block_count(self, layout: Layout | None = None) -> int:
        if layout is not None:
            return self._cached(f"blocks:{layout}", lambda: self._count_blocks(layout))
        return sum(self.block_count(lay) for lay in Layout)

    def _count_blocks(self, layout: Layout) -> int:
        idx = self._index[layout]
        return len({k >> GROUP_SHIFT for k in idx.keys}) + len(idx.splits)

    def digest(self) -> int:
        """Order-insensitive fingerprint of the owned tuples."""
        def compute() -> int:
            total = 0
            for layout, idx in self._index.items():
                total += (sum(idx.keys) * (2 * layout + 1)) + len(idx.keys)
            return total & 0xFFFFFFFFFFFFFFFF
        return self._cached("digest", compute)

    def _cached(self, name: str, compute):
        hit = self._cache.get(name)
        if hit is not None and hit[0] == self.version:
            return hit[1]
        value = compute()
        self._cache[name] = (self.version, value)
        return value

    def _touch(self) -> None:
        self.version += 1

    # -- persistence --------------------------------------------------------

    def _log_path(self, layout: Layout) -> Path:
        assert self._data_dir is not None
        return self._data_dir / f"{layout.name.lower()}.log"

    def _replay_logs(self) -> None:
        for layout in Layout:
            path = self._log_path(layout)
            if not path.exists():
                continue
            keys = []
            data = path.read_bytes()
            usable = len(data) - len(data) % LOG_RECORD.size
            if usable != len(data):
                log.warning("%s: ignoring %d trailing bytes", path, len(data) - usable)
            for tag, raw_key, s, p, o in LOG_RECORD.iter_unpack(data[:usable]):
                if tag != layout:
                    raise ValueError(f"{path}: record tagged {tag} in the {layout.name} log")
                key = int.from_bytes(raw_key, "big")
                if key != pack((s, p, o), layout):
                    raise ValueError(f"{path}: key does not match its triple")
                keys.append(key)
            idx = self._index[layout]
            idx.keys = sorted(set(keys))
            idx.resplit_all(self.split_threshold)
        self._touch()

    def _append_log(self, layout: Layout, keys: Iterable[int]) -> None:
        if self._data_dir is None:
            return
        fh = self._logs.get(layout)
        if fh is None:
            fh = open(self._log_path(layout), "ab")
            self._logs[layout] = fh
        fh.write(b"".join(_log_record(layout, k) for k in keys))

    def _rewrite_log(self, layout: Layout) -> None:
        if self._data_dir is None:
            return
        fh = self._logs.pop(layout, None)
        if fh is not None:
            fh.close()
        path = self._log_path(layout)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(b"".join(_log_record(layout, k) for k in self._index[layout].keys))
        os.replace(tmp, path)

    def flush(self) -> None:
        for fh in self._logs.values():
            fh.flush()

    def close(self) -> None:
        for fh in self._logs.values():
            fh.close()
        self._logs.clear()


def _log_record(layout: Layout, key: int) -> bytes:
    s, p, o = unpack(key, layout)
    return LOG_RECORD.pack(layout, key.to_bytes(12, "big"), s, p, o)


# -- block transfer payload ---------------------------------------------------

def encode_entry(entry: BlockEntry) -> bytes:
    return BLOCK_ENTRY.pack(
        entry.layout,
        entry.first.to_bytes(12, "big"),
        entry.last.to_bytes(12, "big"),
        entry.molecule_key.to_bytes(12, "big"),
        entry.origin,
    )


def decode_entry(buf: bytes | memoryview, offset: int = 0) -> tuple[BlockEntry, int]:
    tag, first, last, mk, origin = BLOCK_ENTRY.unpack_from(buf, offset)
    entry = BlockEntry(
        Layout(tag),
        int.from_bytes(first, "big"),
        int.from_bytes(last, "big"),
        int.from_bytes(mk, "big"),
        origin,
    )
    return entry, offset + BLOCK_ENTRY.size


def encode_block(entry: BlockEntry, molecule: Molecule) -> bytes:
    flat = [c for t in molecule.tuples for c in t]
    return encode_entry(entry) + struct.pack(f">I{len(flat)}I", len(molecule.tuples), *flat)


def decode_block(buf: bytes | memoryview, offset: int = 0) -> tuple[tuple[BlockEntry, Molecule], int]:
    entry, offset = decode_entry(buf, offset)
    (count,) = _U32.unpack_from(buf, offset)
    offset += 4
    flat = struct.unpack_from(f">{3 * count}I", buf, offset)
    offset += 12 * count
    tuples = tuple(TripleId(*flat[i:i + 3]) for i in range(0, len(flat), 3))
    return (entry, Molecule(entry.layout, entry.molecule_key, tuples)), offset
