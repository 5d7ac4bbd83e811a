"""Binary keys, key intervals and the three triple layouts.

A triple key is the 96-bit concatenation of the triple's three 32-bit
component ids in layout order, most significant bit first, so integer order
and lexicographic bit order agree.  Shorter keys (peer paths, pattern
prefixes) address intervals of the key space.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

KEY_BITS = 96
COMPONENT_BITS = 32
COMPONENT_MASK = (1 << COMPONENT_BITS) - 1


class LayoutMismatch(ValueError):
    """A pattern's bound components do not form a prefix under a layout."""


class Layout(enum.IntEnum):
    SPO = 0
    POS = 1
    OSP = 2

    @property
    def order(self) -> tuple[int, int, int]:
        """Positions of (s, p, o) read in layout order."""
        return _ORDERS[self]


_ORDERS = {
    Layout.SPO: (0, 1, 2),
    Layout.POS: (1, 2, 0),
    Layout.OSP: (2, 0, 1),
}


class TripleId(NamedTuple):
    s: int
    p: int
    o: int


@dataclass(frozen=True, slots=True)
class BitKey:
    """A binary string p1..pk held as a k-bit unsigned integer."""

    value: int
    length: int

    def __post_init__(self) -> None:
        if self.length < 0:
            raise ValueError("negative key length")
        if not 0 <= self.value < (1 << self.length):
            raise ValueError(f"value {self.value} does not fit in {self.length} bits")

    @classmethod
    def from_bits(cls, bits: str) -> "BitKey":
        if bits and set(bits) - {"0", "1"}:
            raise ValueError(f"not a bit string: {bits!r}")
        return cls(int(bits, 2) if bits else 0, len(bits))

    def __str__(self) -> str:
        return format(self.value, f"0{self.length}b") if self.length else ""

    def __repr__(self) -> str:
        return f"BitKey('{self}')"

    def __len__(self) -> int:
        return self.length

    def bit(self, i: int) -> int:
        """The bit at 0-based position ``i`` (position i+1 in 1-based terms)."""
        if not 0 <= i < self.length:
            raise IndexError(i)
        return (self.value >> (self.length - 1 - i)) & 1

    def prefix(self, n: int) -> "BitKey":
        if not 0 <= n <= self.length:
            raise ValueError(f"prefix length {n} out of range for {self.length}-bit key")
        return BitKey(self.value >> (self.length - n), n)

    def extend(self, bit: int) -> "BitKey":
        return BitKey((self.value << 1) | (bit & 1), self.length + 1)

    def sibling(self) -> "BitKey":
        """The key with its last bit flipped."""
        if not self.length:
            raise ValueError("the empty key has no sibling")
        return BitKey(self.value ^ 1, self.length)


EMPTY_KEY = BitKey(0, 0)


class KeyInterval(NamedTuple):
    """Half-open integer interval [lo, hi)."""

    lo: int
    hi: int

    @property
    def size(self) -> int:
        # not __len__: sizes reach 2^96, beyond what len() can return
        return max(0, self.hi - self.lo)

    @property
    def empty(self) -> bool:
        return self.hi <= self.lo

    def __contains__(self, value: object) -> bool:
        return isinstance(value, int) and self.lo <= value < self.hi

    def intersect(self, other: "KeyInterval") -> "KeyInterval":
        return KeyInterval(max(self.lo, other.lo), min(self.hi, other.hi))

    def overlaps(self, other: "KeyInterval") -> bool:
        return max(self.lo, other.lo) < min(self.hi, other.hi)

    def covers(self, other: "KeyInterval") -> bool:
        return self.lo <= other.lo and other.hi <= self.hi


def val(key: BitKey, m: int = KEY_BITS) -> int:
    """Sum of p_i * 2^(m-i) over the key's bits."""
    if key.length > m:
        raise ValueError(f"key of length {key.length} exceeds m={m}")
    return key.value << (m - key.length)


def interval(key: BitKey, m: int = KEY_BITS) -> KeyInterval:
    lo = val(key, m)
    return KeyInterval(lo, lo + (1 << (m - key.length)))


def full_key(value: int, m: int = KEY_BITS) -> BitKey:
    return BitKey(value, m)


def common_prefix_length(a: BitKey, b: BitKey) -> int:
    n = min(a.length, b.length)
    diff = (a.value >> (a.length - n)) ^ (b.value >> (b.length - n))
    return n - diff.bit_length()


def common_prefix(keys: Iterable[BitKey]) -> BitKey:
    it = iter(keys)
    try:
        acc = next(it)
    except StopIteration:
        raise ValueError("common_prefix of an empty collection") from None
    for key in it:
        acc = acc.prefix(common_prefix_length(acc, key))
        if not acc.length:
            break
    return acc


def is_prefix(a: BitKey, b: BitKey) -> bool:
    return a.length <= b.length and (b.value >> (b.length - a.length)) == a.value


def key_in_path(key: int, path: BitKey, m: int = KEY_BITS) -> bool:
    """Whether the full m-bit key ``key`` lies under ``path``."""
    return (key >> (m - path.length)) == path.value


def permute(t: Sequence[int], layout: Layout) -> tuple[int, int, int]:
    a, b, c = layout.order
    return t[a], t[b], t[c]


def pack(t: Sequence[int], layout: Layout) -> int:
    """The 96-bit integer key of triple ``t`` under ``layout``."""
    a, b, c = layout.order
    return (t[a] << 64) | (t[b] << 32) | t[c]


def unpack(key: int, layout: Layout) -> TripleId:
    first = key >> 64
    second = (key >> 32) & COMPONENT_MASK
    third = key & COMPONENT_MASK
    if layout is Layout.SPO:
        return TripleId(first, second, third)
    if layout is Layout.POS:
        return TripleId(third, first, second)
    return TripleId(second, third, first)


def triple_key(t: Sequence[int], layout: Layout) -> BitKey:
    return BitKey(pack(t, layout), KEY_BITS)


def is_bound(component: object) -> bool:
    return isinstance(component, int) and not isinstance(component, bool)


def pattern_prefix(pattern: Sequence[object], layout: Layout) -> BitKey:
    """Concatenated bits of the pattern's bound components under ``layout``.

    Integer components are bound; anything else is a variable.  The bound
    components must come first in layout order.
    """
    value = 0
    length = 0
    seen_variable = False
    for position in layout.order:
        component = pattern[position]
        if is_bound(component):
            if seen_variable:
                raise LayoutMismatch(
                    f"bound components of {tuple(pattern)!r} are not a prefix under {layout.name}"
                )
            value = (value << COMPONENT_BITS) | component
            length += COMPONENT_BITS
        else:
            seen_variable = True
    return BitKey(value, length)
