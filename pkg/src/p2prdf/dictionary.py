"""Term dictionary: RDF term strings <-> 32-bit identifiers.

Identifiers are the 32-bit FNV-1a hash of the term's UTF-8 bytes, so every
peer computes the same id for the same string without coordination.  The
store only remembers which strings it has seen, and refuses to map two
different strings onto one id.
"""
from __future__ import annotations

import threading
from typing import Iterable, Iterator

FNV32_OFFSET = 0x811C9DC5
FNV32_PRIME = 0x01000193
FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


class CollisionError(ValueError):
    """Two distinct terms hash to the same identifier."""

    def __init__(self, term_id: int, existing: str, incoming: str):
        super().__init__(
            f"term id {term_id:#010x} already maps to {existing!r}, cannot register {incoming!r}"
        )
        self.term_id = term_id
        self.existing = existing
        self.incoming = incoming


class UnknownId(KeyError):
    """No string is registered for an identifier."""


def fnv1a_32(data: bytes) -> int:
    h = FNV32_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV32_PRIME) & 0xFFFFFFFF
    return h


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def term_id(term: str) -> int:
    """The identifier of ``term``; pure, does not touch any store."""
    return fnv1a_32(term.encode("utf-8"))


class Dictionary:
    """Forward and reverse maps between term strings and ids.

    Reads are lock-free; registration is serialised so a dictionary can be
    shared between a peer's message handler and its query executors.
    """

    def __init__(self) -> None:
        self._forward: dict[str, int] = {}
        self._reverse: dict[int, str] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._reverse)

    def __contains__(self, ident: int) -> bool:
        return ident in self._reverse

    def encode(self, term: str) -> int:
        ident = self._forward.get(term)
        if ident is not None:
            return ident
        if not term:
            raise ValueError("cannot encode an empty term")
        ident = term_id(term)
        self.register(ident, term)
        return ident

    def register(self, ident: int, term: str) -> None:
        """Record ``term`` under ``ident`` (e.g. learned from a remote peer)."""
        with self._lock:
            existing = self._reverse.get(ident)
            if existing is not None:
                if existing != term:
                    raise CollisionError(ident, existing, term)
                return
            self._reverse[ident] = term
            self._forward[term] = ident

    def register_many(self, entries: Iterable[tuple[int, str]]) -> None:
        for ident, term in entries:
            self.register(ident, term)

    def decode(self, ident: int) -> str:
        try:
            return self._reverse[ident]
        except KeyError:
            raise UnknownId(ident) from None

    def get(self, ident: int) -> str | None:
        return self._reverse.get(ident)

    def entries_for(self, idents: Iterable[int]) -> list[tuple[int, str]]:
        """Known (id, term) pairs for ``idents``, skipping unknown ones."""
        out = []
        seen = set()
        for ident in idents:
            if ident in seen:
                continue
            seen.add(ident)
            term = self._reverse.get(ident)
            if term is not None:
                out.append((ident, term))
        return out

    def items(self) -> Iterator[tuple[int, str]]:
        return iter(list(self._reverse.items()))
