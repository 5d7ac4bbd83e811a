"""Random well-formed envelopes for round-trip fuzzing."""
import random

from p2prdf import messages as m
from p2prdf.keyspace import BitKey, KeyInterval, Layout, TripleId
from p2prdf.storage import BlockEntry, Molecule


def _text(rng, n=12):
    alphabet = "abcxyz019:/.#\"<>_ éß中\t"
    return "".join(rng.choice(alphabet) for _ in range(rng.randrange(n)))


def _key(rng):
    return rng.choice([0, (1 << 96) - 1, rng.getrandbits(96)])


def _peer(rng):
    return m.PeerId(rng.getrandbits(64), rng.choice(["", f"10.0.0.{rng.randrange(256)}:{rng.randrange(65536)}", _text(rng)]))


def _entry(rng):
    a, b = sorted((_key(rng), _key(rng)))
    return BlockEntry(rng.choice(list(Layout)), a, b, a, rng.getrandbits(64))


def _block(rng):
    entry = _entry(rng)
    tuples = tuple(TripleId(rng.getrandbits(32), rng.getrandbits(32), rng.getrandbits(32))
                   for _ in range(rng.randrange(4)))
    return entry, Molecule(entry.layout, entry.molecule_key, tuples)


def value_for(codec, rng):
    if isinstance(codec, m._UInt):
        return rng.choice([0, codec.limit - 1, rng.randrange(codec.limit)])
    if isinstance(codec, m._Bool):
        return rng.random() < 0.5
    if isinstance(codec, m._Str):
        return _text(rng)
    if isinstance(codec, m._Enum):
        return rng.choice(list(codec.enum_type))
    if isinstance(codec, m._Key):
        return _key(rng)
    if isinstance(codec, m._BitKey):
        n = rng.randrange(97)
        return BitKey(rng.getrandbits(n) if n else 0, n)
    if isinstance(codec, m._Interval):
        lo = _key(rng)
        return KeyInterval(lo, rng.randint(lo, 1 << 96))
    if isinstance(codec, m._Peer):
        return _peer(rng)
    if isinstance(codec, m._Triple):
        return TripleId(rng.getrandbits(32), rng.getrandbits(32), rng.getrandbits(32))
    if isinstance(codec, m._Entry):
        return _entry(rng)
    if isinstance(codec, m._Block):
        return _block(rng)
    if isinstance(codec, m._List):
        return [value_for(codec.item, rng) for _ in range(rng.randrange(4))]
    if isinstance(codec, m._Pair):
        return (value_for(codec.a, rng), value_for(codec.b, rng))
    raise TypeError(f"no generator for {type(codec).__name__}")


def random_message(rng, cls=None):
    cls = cls or rng.choice(list(m.MESSAGE_TYPES.values()))
    return cls(**{name: value_for(codec, rng) for name, codec in cls._codecs})


def random_envelope(rng, cls=None):
    return m.Envelope(_peer(rng), rng.getrandbits(64), rng.getrandbits(64), random_message(rng, cls))
