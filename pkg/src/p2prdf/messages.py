"""Protocol messages and their binary framing.

Frame layout, all integers big-endian::

    [u32 length of the rest][u8 tag][sender][u64 to_id][u64 request_id][body]

The sender is a peer id (u64) followed by its address (u16 length + UTF-8).
Keys are packed most significant bit first into 12 bytes; a bit key is a
u8 bit length followed by its bits left-aligned in 12 bytes.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from enum import IntEnum
from typing import Any, ClassVar

from .keyspace import KEY_BITS, BitKey, KeyInterval, Layout, TripleId
from .storage import BLOCK_ENTRY, decode_block, decode_entry, encode_block, encode_entry

MAX_FRAME = 1 << 30


class WireError(ValueError):
    """A frame could not be decoded."""


class ErrorCode(IntEnum):
    UNKNOWN_MESSAGE = 1
    PHASE = 2
    BUSY = 3
    UNKNOWN_MOLECULE = 4
    UNKNOWN_ID = 5
    NO_ROUTE = 6
    BAD_REQUEST = 7
    INTERNAL = 8


@dataclass(frozen=True, order=True)
class PeerId:
    id: int
    address: str = ""

    def __str__(self) -> str:
        return f"{self.address or '?'}#{self.id:016x}"


# -- primitive codecs ---------------------------------------------------------

class _Writer:
    __slots__ = ("parts",)

    def __init__(self) -> None:
        self.parts: list[bytes] = []

    def u8(self, v: int) -> None:
        self.parts.append(v.to_bytes(1, "big"))

    def u16(self, v: int) -> None:
        self.parts.append(v.to_bytes(2, "big"))

    def u32(self, v: int) -> None:
        self.parts.append(v.to_bytes(4, "big"))

    def u64(self, v: int) -> None:
        self.parts.append(v.to_bytes(8, "big"))

    def raw(self, b: bytes) -> None:
        self.parts.append(b)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes | memoryview, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise WireError("truncated frame")
        chunk = bytes(self.buf[self.pos:end])
        self.pos = end
        return chunk

    def uint(self, n: int) -> int:
        return int.from_bytes(self.take(n), "big")


class _Codec:
    def write(self, w: _Writer, v: Any) -> None:
        raise NotImplementedError

    def read(self, r: _Reader) -> Any:
        raise NotImplementedError


class _UInt(_Codec):
    def __init__(self, size: int):
        self.size = size
        self.limit = 1 << (8 * size)

    def write(self, w, v):
        if not 0 <= v < self.limit:
            raise WireError(f"{v} does not fit in {self.size} bytes")
        w.raw(v.to_bytes(self.size, "big"))

    def read(self, r):
        return r.uint(self.size)


class _Bool(_Codec):
    def write(self, w, v):
        w.u8(1 if v else 0)

    def read(self, r):
        b = r.uint(1)
        if b > 1:
            raise WireError(f"bad boolean byte {b}")
        return bool(b)


class _Str(_Codec):
    def __init__(self, width: int = 4):
        self.width = width

    def write(self, w, v):
        data = v.encode("utf-8")
        if len(data) >= 1 << (8 * self.width):
            raise WireError("string too long")
        w.raw(len(data).to_bytes(self.width, "big"))
        w.raw(data)

    def read(self, r):
        try:
            return r.take(r.uint(self.width)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WireError(f"bad utf-8: {exc}") from None


class _Enum(_Codec):
    def __init__(self, enum_type):
        self.enum_type = enum_type

    def write(self, w, v):
        w.u8(int(v))

    def read(self, r):
        raw = r.uint(1)
        try:
            return self.enum_type(raw)
        except ValueError:
            raise WireError(f"bad {self.enum_type.__name__} value {raw}") from None


class _Key(_Codec):
    def write(self, w, v):
        w.raw(v.to_bytes(12, "big"))

    def read(self, r):
        return r.uint(12)


class _BitKey(_Codec):
    def write(self, w, v: BitKey):
        if v.length > KEY_BITS:
            raise WireError("bit key longer than 96 bits")
        w.u8(v.length)
        w.raw((v.value << (KEY_BITS - v.length)).to_bytes(12, "big"))

    def read(self, r):
        length = r.uint(1)
        aligned = r.uint(12)
        if length > KEY_BITS:
            raise WireError(f"bit key length {length}")
        shift = KEY_BITS - length
        if aligned & ((1 << shift) - 1):
            raise WireError("bit key has bits beyond its length")
        return BitKey(aligned >> shift, length)


class _Interval(_Codec):
    # lo as a 12-byte key, hi as 13 bytes so that 2^96 fits
    def write(self, w, v: KeyInterval):
        w.raw(v.lo.to_bytes(12, "big"))
        w.raw(v.hi.to_bytes(13, "big"))

    def read(self, r):
        return KeyInterval(r.uint(12), r.uint(13))


class _Peer(_Codec):
    def write(self, w, v: PeerId):
        w.u64(v.id)
        _STR16.write(w, v.address)

    def read(self, r):
        return PeerId(r.uint(8), _STR16.read(r))


class _Triple(_Codec):
    def write(self, w, v):
        s, p, o = v
        w.raw(struct.pack(">III", s, p, o))

    def read(self, r):
        return TripleId(*struct.unpack(">III", r.take(12)))


class _Entry(_Codec):
    def write(self, w, v):
        w.raw(encode_entry(v))

    def read(self, r):
        try:
            entry, _ = decode_entry(r.take(BLOCK_ENTRY.size))
        except ValueError as exc:
            raise WireError(f"bad block entry: {exc}") from None
        return entry


class _Block(_Codec):
    def write(self, w, v):
        entry, molecule = v
        w.raw(encode_block(entry, molecule))

    def read(self, r):
        try:
            block, r.pos = decode_block(r.buf, r.pos)
        except (struct.error, ValueError) as exc:
            raise WireError(f"bad block: {exc}") from None
        return block


class _List(_Codec):
    def __init__(self, item: _Codec):
        self.item = item

    def write(self, w, v):
        w.u32(len(v))
        for x in v:
            self.item.write(w, x)

    def read(self, r):
        n = r.uint(4)
        if n > len(r.buf) - r.pos:
            raise WireError("list length exceeds frame")
        return [self.item.read(r) for _ in range(n)]


class _Pair(_Codec):
    def __init__(self, a: _Codec, b: _Codec):
        self.a, self.b = a, b

    def write(self, w, v):
        self.a.write(w, v[0])
        self.b.write(w, v[1])

    def read(self, r):
        return (self.a.read(r), self.b.read(r))


U8, U16, U32, U64 = _UInt(1), _UInt(2), _UInt(4), _UInt(8)
BOOL = _Bool()
STR = _Str(4)
_STR16 = _Str(2)
KEY = _Key()
BITKEY = _BitKey()
INTERVAL = _Interval()
PEER = _Peer()
LAYOUT = _Enum(Layout)
TRIPLE = _Triple()
ENTRY = _Entry()
BLOCK = _Block()
PEERS = _List(PEER)
ROUTING = _List(PEERS)
TERMS = _List(_Pair(U32, STR))


# -- messages -----------------------------------------------------------------

class Message:
    TAG: ClassVar[int]
    _codecs: ClassVar[tuple[tuple[str, _Codec], ...]]

    def encode_body(self) -> bytes:
        w = _Writer()
        for name, codec in self._codecs:
            codec.write(w, getattr(self, name))
        return w.getvalue()

    @classmethod
    def decode_body(cls, r: _Reader) -> "Message":
        return cls(**{name: codec.read(r) for name, codec in cls._codecs})


MESSAGE_TYPES: dict[int, type[Message]] = {}


def _message(tag: int, **codecs: _Codec):
    """Class decorator: make a dataclass message with the given field codecs."""
    def wrap(cls):
        cls = dataclass(cls)
        names = [f.name for f in fields(cls)]
        if list(codecs) != names:
            raise TypeError(f"{cls.__name__}: codecs {list(codecs)} do not match fields {names}")
        cls.TAG = tag
        cls._codecs = tuple(codecs.items())
        MESSAGE_TYPES[tag] = cls
        return cls
    return wrap


class ExchangeKind(IntEnum):
    REPLY = 1
    FINAL = 2
    FORWARD = 3


@_message(1, phase=U8)
class Bootstrap(Message):
    phase: int = 0


@_message(2, phase=U8, peers=PEERS)
class BootstrapAck(Message):
    phase: int = 0
    peers: list = field(default_factory=list)


@_message(3, path=BITKEY, block_count=U32, digest=U64, routing=ROUTING, surplus=BOOL)
class ExchangeRequest(Message):
    path: BitKey
    block_count: int = 0
    digest: int = 0
    routing: list = field(default_factory=list)
    surplus: bool = False


@_message(4, kind=_Enum(ExchangeKind), case=U8, path=BITKEY, partner_path=BITKEY,
          routing=ROUTING, blocks=_List(BLOCK))
class ExchangeData(Message):
    kind: ExchangeKind
    case: int
    path: BitKey
    partner_path: BitKey
    routing: list = field(default_factory=list)
    blocks: list = field(default_factory=list)


@_message(5, replace=BOOL, entries=_List(ENTRY))
class ReplicateBlock(Message):
    replace: bool = True
    entries: list = field(default_factory=list)


@_message(6, count=U32)
class ReplicateAck(Message):
    count: int = 0


@_message(7, layout=LAYOUT, range=INTERVAL, hop_count=U16, initiator=PEER)
class LookupRequest(Message):
    layout: Layout
    range: KeyInterval
    hop_count: int
    initiator: PeerId


@_message(8, layout=LAYOUT, range=INTERVAL, hops=U16, no_route=BOOL,
          entries=_List(ENTRY), origins=PEERS)
class BlockEntriesResponse(Message):
    layout: Layout
    range: KeyInterval
    hops: int = 0
    no_route: bool = False
    entries: list = field(default_factory=list)
    origins: list = field(default_factory=list)


@_message(9, molecule_key=KEY, layout=LAYOUT, range=INTERVAL)
class FetchTriples(Message):
    molecule_key: int
    layout: Layout
    range: KeyInterval


@_message(10, layout=LAYOUT, truncated=BOOL, triples=_List(TRIPLE))
class TriplesResponse(Message):
    layout: Layout
    truncated: bool = False
    triples: list = field(default_factory=list)


@_message(11, ids=_List(U32))
class DictLookup(Message):
    ids: list = field(default_factory=list)


@_message(12, entries=TERMS)
class DictResponse(Message):
    entries: list = field(default_factory=list)


@_message(13, code=_Enum(ErrorCode), detail=STR)
class Error(Message):
    code: ErrorCode
    detail: str = ""


@_message(14, layout=LAYOUT, hop_count=U16, initiator=PEER, triples=_List(TRIPLE), terms=TERMS)
class InsertTriples(Message):
    layout: Layout
    hop_count: int
    initiator: PeerId
    triples: list = field(default_factory=list)
    terms: list = field(default_factory=list)


@_message(15, layout=LAYOUT, count=U32, stored=U32)
class InsertAck(Message):
    layout: Layout
    count: int = 0
    stored: int = 0


@_message(16, triples=_List(TRIPLE), terms=TERMS)
class ClientLoad(Message):
    triples: list = field(default_factory=list)
    terms: list = field(default_factory=list)


@_message(17, text=STR, encoded=BOOL)
class ClientQuery(Message):
    text: str
    encoded: bool = False


@_message(18)
class ClientStatus(Message):
    pass


@_message(19, ok=BOOL, text=STR)
class ClientReply(Message):
    ok: bool
    text: str = ""


@_message(20, old_path=BITKEY, new_path=BITKEY, replacement=PEER)
class PathChanged(Message):
    """The sender left ``old_path``; ``replacement`` still holds it."""
    old_path: BitKey
    new_path: BitKey
    replacement: PeerId


# -- envelopes ----------------------------------------------------------------

@dataclass
class Envelope:
    sender: PeerId
    to: int
    request_id: int
    message: Message


def encode_frame(env: Envelope) -> bytes:
    w = _Writer()
    w.u8(env.message.TAG)
    PEER.write(w, env.sender)
    U64.write(w, env.to)
    U64.write(w, env.request_id)
    w.raw(env.message.encode_body())
    rest = w.getvalue()
    if len(rest) > MAX_FRAME:
        raise WireError("frame too large")
    return len(rest).to_bytes(4, "big") + rest


def decode_frame(frame: bytes | memoryview) -> Envelope:
    """Decode one complete frame, including its length prefix."""
    if len(frame) < 5:
        raise WireError("truncated frame header")
    length = int.from_bytes(frame[:4], "big")
    if length != len(frame) - 4:
        raise WireError(f"length prefix {length} does not match {len(frame) - 4} bytes")
    return decode_payload(frame[4:])


def decode_payload(payload: bytes | memoryview) -> Envelope:
    """Decode a frame with its length prefix already stripped."""
    r = _Reader(payload)
    tag = r.uint(1)
    cls = MESSAGE_TYPES.get(tag)
    if cls is None:
        raise WireError(f"unknown message tag {tag}")
    sender = PEER.read(r)
    to = r.uint(8)
    request_id = r.uint(8)
    message = cls.decode_body(r)
    if r.pos != len(payload):
        raise WireError(f"{len(payload) - r.pos} trailing bytes after {cls.__name__}")
    return Envelope(sender, to, request_id, message)


def frame_tag(frame: bytes) -> int:
    return frame[4]


def frame_length(header: bytes) -> int:
    """Payload length from a 4-byte length prefix, with a sanity bound."""
    (length,) = struct.unpack(">I", header)
    if length == 0 or length > MAX_FRAME:
        raise WireError(f"bad frame length {length}")
    return length

