"""Basic graph pattern queries over the overlay.

A query is parsed into triple patterns whose constants are dictionary ids.
Each pattern is answered in two stages: find the block entries covering the
pattern's key range, then fetch the matching tuples from each block's
origin peer.  Multi-pattern queries run as bind joins; patterns that only
share already-bound variables are probed concurrently for every binding.
"""
from __future__ import annotations

import asyncio
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence, Union

from .dictionary import Dictionary
from .keyspace import KeyInterval, Layout, TripleId, interval, is_bound, pattern_prefix
from .messages import PeerId
from .ntriples import render_term
from .overlay import Peer, RemoteError

RDF_TYPE = "http://www.w3.org/1999/02/22-rdf-syntax-ns#type"
MAX_CONCURRENT_PROBES = 64


class ParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class DisconnectedPattern(ValueError):
    """The patterns do not form one connected join graph."""


@dataclass(frozen=True)
class Var:
    name: str

    def __str__(self) -> str:
        return f"?{self.name}"


Term = Union[int, Var]


class TriplePattern(NamedTuple):
    s: Term
    p: Term
    o: Term

    def variables(self) -> list[str]:
        out = []
        for c in self:
            if isinstance(c, Var) and c.name not in out:
                out.append(c.name)
        return out

    def bound_count(self) -> int:
        return sum(1 for c in self if is_bound(c))


Binding = dict  # variable name -> term id


# -- parsing ------------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+|\#[^\n]*)
  | (?P<iri><[^<>"{}|^`\\\x00-\x20]*>)
  | (?P<literal>"(?:[^"\\\n]|\\.)*"(?:@[A-Za-z]+(?:-[A-Za-z0-9]+)*|\^\^(?:<[^<>"{}|^`\\\x00-\x20]*>|[A-Za-z][\w-]*:(?:[\w%-]|\.(?=[\w%-]))*))?)
  | (?P<var>[?$][A-Za-z_]\w*)
  | (?P<bnode>_:[A-Za-z0-9_]+)
  | (?P<pname>(?:[A-Za-z][\w-]*)?:(?:[\w%-]|\.(?=[\w%-]))*)
  | (?P<word>[A-Za-z]+)
  | (?P<punct>[{}.;,*])
    """,
    re.VERBOSE,
)


@dataclass
class Query:
    select: list[str] | None
    patterns: list[TriplePattern]
    prefixes: dict[str, str] = field(default_factory=dict)

    @property
    def variables(self) -> list[str]:
        if self.select is not None:
            return list(self.select)
        out = []
        for pat in self.patterns:
            out.extend(v for v in pat.variables() if v not in out and not v.startswith("_:"))
        return out


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), pos))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, dictionary: Dictionary):
        self.tokens = _tokenize(text)
        self.i = 0
        self.dictionary = dictionary
        self.prefixes: dict[str, str] = {}

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def next(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def keyword(self, word: str) -> bool:
        kind, value, _ = self.peek()
        if kind == "word" and value.upper() == word:
            self.i += 1
            return True
        return False

    def expect_punct(self, p: str) -> None:
        kind, value, pos = self.next()
        if kind != "punct" or value != p:
            raise ParseError(f"expected {p!r}, found {value or 'end of input'!r}", pos)

    def parse(self) -> Query:
        while self.keyword("PREFIX"):
            kind, value, pos = self.next()
            if kind != "pname" or not value.endswith(":"):
                raise ParseError("expected a prefix name like 'ex:'", pos)
            kind2, iri, pos2 = self.next()
            if kind2 != "iri":
                raise ParseError("expected an IRI after the prefix name", pos2)
            self.prefixes[value[:-1]] = iri[1:-1]
        if not self.keyword("SELECT"):
            raise ParseError("expected SELECT", self.peek()[2])
        select: list[str] | None = []
        kind, value, pos = self.peek()
        if kind == "punct" and value == "*":
            self.next()
            select = None
        else:
            while self.peek()[0] == "var":
                select.append(self.next()[1][1:])
            if not select:
                raise ParseError("expected variables or '*' after SELECT", pos)
        self.keyword("WHERE")
        self.expect_punct("{")
        patterns = self.triples()
        self.expect_punct("}")
        kind, value, pos = self.peek()
        if kind != "eof":
            raise ParseError(f"unexpected {value!r} after the closing brace", pos)
        if not patterns:
            raise ParseError("empty WHERE block", pos)
        query = Query(select, patterns, dict(self.prefixes))
        if select is not None:
            known = {v for pat in patterns for v in pat.variables()}
            for v in select:
                if v not in known:
                    raise ParseError(f"selected variable ?{v} does not occur in WHERE", 0)
        return query

    def triples(self) -> list[TriplePattern]:
        out = []
        while not (self.peek()[0] == "punct" and self.peek()[1] == "}") and self.peek()[0] != "eof":
            subject = self.term(position="subject")
            while True:
                predicate = self.term(position="predicate")
                while True:
                    obj = self.term(position="object")
                    out.append(TriplePattern(subject, predicate, obj))
                    kind, value, _ = self.peek()
                    if kind == "punct" and value == ",":
                        self.next()
                        continue
                    break
                kind, value, _ = self.peek()
                if kind == "punct" and value == ";":
                    self.next()
                    if self.peek()[0] == "punct" and self.peek()[1] in ".}":
                        break
                    continue
                break
            kind, value, pos = self.peek()
            if kind == "punct" and value == ".":
                self.next()
            elif not (kind == "punct" and value == "}"):
                raise ParseError(f"expected '.' or '}}', found {value or 'end of input'!r}", pos)
        return out

    def term(self, position: str) -> Term:
        kind, value, pos = self.next()
        if kind == "var":
            return Var(value[1:])
        if kind == "bnode":
            if position == "predicate":
                raise ParseError("a blank node cannot be a predicate", pos)
            return Var(value)
        if kind == "iri":
            return self.dictionary.encode(value[1:-1])
        if kind == "pname":
            return self.dictionary.encode(self.expand(value, pos))
        if kind == "word" and value == "a" and position == "predicate":
            return self.dictionary.encode(RDF_TYPE)
        if kind == "literal":
            if position != "object":
                raise ParseError("literals are only allowed as objects", pos)
            return self.dictionary.encode(self.canonical_literal(value, pos))
        raise ParseError(f"expected a {position}, found {value or 'end of input'!r}", pos)

    def expand(self, pname: str, pos: int) -> str:
        prefix, _, local = pname.partition(":")
        if prefix not in self.prefixes:
            raise ParseError(f"undeclared prefix {prefix!r}", pos)
        return self.prefixes[prefix] + local

    def canonical_literal(self, text: str, pos: int) -> str:
        body_end = text.rindex('"') + 1
        suffix = text[body_end:]
        if suffix.startswith("^^") and not suffix.startswith("^^<"):
            suffix = f"^^<{self.expand(suffix[2:], pos)}>"
        return text[:body_end] + suffix


def parse_query(text: str, dictionary: Dictionary) -> Query:
    return _Parser(text, dictionary).parse()


def parse_bgp(text: str, dictionary: Dictionary) -> list[TriplePattern]:
    return parse_query(text, dictionary).patterns


# -- planning -------------------------------------------------------------------

def select_layout(pattern: Sequence[Term]) -> Layout:
    s, p, o = (is_bound(c) for c in pattern)
    if s and p and o:
        return Layout.SPO
    if s and o:
        return Layout.OSP
    if s:
        return Layout.SPO
    if p:
        return Layout.POS
    if o:
        return Layout.OSP
    return Layout.SPO


def pattern_range(pattern: Sequence[Term], layout: Layout | None = None, m: int = 96) -> KeyInterval:
    layout = select_layout(pattern) if layout is None else layout
    return interval(pattern_prefix(pattern, layout), m)


@dataclass(frozen=True)
class PlanStep:
    pattern: TriplePattern
    layout: Layout
    join_vars: tuple[str, ...]


@dataclass
class QueryPlan:
    steps: list[PlanStep]

    def __iter__(self):
        return iter(self.steps)

    def __len__(self) -> int:
        return len(self.steps)


def plan(patterns: Sequence[TriplePattern]) -> QueryPlan:
    """Most-bound pattern first, then greedily the most-bound connected one.

    Ties go to the earlier pattern in the query text.
    """
    patterns = [TriplePattern(*p) for p in patterns]
    if not patterns:
        raise ValueError("nothing to plan")
    remaining = list(range(len(patterns)))
    steps: list[PlanStep] = []
    bound: set[str] = set()
    while remaining:
        candidates = [i for i in remaining if set(patterns[i].variables()) & bound] if steps else remaining
        if not candidates:
            raise DisconnectedPattern(f"pattern {patterns[remaining[0]]} shares no variable with the others")
        best = max(candidates, key=lambda i: (patterns[i].bound_count(), -i))
        remaining.remove(best)
        pat = patterns[best]
        steps.append(PlanStep(pat, select_layout(pat), tuple(v for v in pat.variables() if v in bound)))
        bound.update(pat.variables())
    return QueryPlan(steps)


# -- matching -------------------------------------------------------------------

def match(pattern: Sequence[Term], triple: Sequence[int], binding: Binding | None = None) -> Binding | None:
    """Extend ``binding`` so that ``pattern`` equals ``triple``; None if impossible."""
    out = dict(binding) if binding else {}
    for component, value in zip(pattern, triple):
        if isinstance(component, Var):
            have = out.get(component.name)
            if have is None:
                out[component.name] = value
            elif have != value:
                return None
        elif component != value:
            return None
    return out


def substitute(pattern: TriplePattern, binding: Binding) -> TriplePattern:
    return TriplePattern(
        *(binding.get(c.name, c) if isinstance(c, Var) else c for c in pattern)
    )


def oracle_match(triples: Iterable[Sequence[int]], pattern: Sequence[Term]) -> list[TripleId]:
    """Flat-scan reference for a single pattern."""
    return sorted({TripleId(*t) for t in triples if match(pattern, t) is not None})


def oracle_join(
    triples: Iterable[Sequence[int]], patterns: Sequence[Sequence[Term]], select: Sequence[str] | None = None
) -> Counter:
    """Reference join over flat scans; a multiset of projected rows.

    Each pattern is matched against every triple on its own, then joined to
    the rows so far on the variables they share.
    """
    data = sorted({TripleId(*t) for t in triples})
    bindings: list[Binding] = [{}]
    bound: set[str] = set()
    for pat in patterns:
        shared = sorted(bound & {c.name for c in pat if isinstance(c, Var)})
        index: dict[tuple, list[Binding]] = {}
        for t in data:
            row = match(pat, t)
            if row is not None:
                index.setdefault(tuple(row[v] for v in shared), []).append(row)
        bindings = [{**b, **row} for b in bindings for row in index.get(tuple(b[v] for v in shared), ())]
        bound.update(c.name for c in pat if isinstance(c, Var))
    if select is None:
        select = _all_vars(patterns)
    return Counter(tuple(b[v] for v in select) for b in bindings)


def _all_vars(patterns: Sequence[Sequence[Term]]) -> list[str]:
    out: list[str] = []
    for pat in patterns:
        for c in pat:
            if isinstance(c, Var) and c.name not in out:
                out.append(c.name)
    return out


# -- execution ------------------------------------------------------------------

@dataclass
class PatternResult:
    triples: list[TripleId]
    partial: bool = False
    hops: int = 0
    blocks: int = 0


@dataclass
class JoinResult:
    bindings: list[Binding]
    partial: bool = False
    probes: int = 0

    def rows(self, select: Sequence[str]) -> list[tuple[int, ...]]:
        return [tuple(b[v] for v in select) for b in self.bindings]


class Executor:
    """Runs patterns and joins from one initiating peer."""

    def __init__(self, peer: Peer, *, max_concurrent: int = MAX_CONCURRENT_PROBES, sequential: bool = False):
        self.peer = peer
        self.max_concurrent = max_concurrent
        self.sequential = sequential
        self.sources: dict[int, int] = {}  # term id -> origin peer id
        self.origins: dict[int, PeerId] = {}
        self.hops = 0
        self.probes = 0
        self._fetch_slots: asyncio.Semaphore | None = None

    async def resolve_pattern(self, pattern: Sequence[Term]) -> PatternResult:
        pattern = TriplePattern(*pattern)
        layout = select_layout(pattern)
        rng = pattern_range(pattern, layout, self.peer.config.m)
        found = await self.peer.lookup(layout, rng)
        self.hops = max(self.hops, found.hops)
        self.origins.update(found.origins)
        partial = found.partial

        if self._fetch_slots is None:
            # bounded so that queued requests do not run into their timeouts
            self._fetch_slots = asyncio.Semaphore(self.max_concurrent)

        async def fetch(entry):
            origin = found.origins.get(entry.origin) or self.peer.known.get(entry.origin)
            if origin is None:
                origin = self.peer.pid if entry.origin == self.peer.pid.id else PeerId(entry.origin)
            part = rng.intersect(entry.span)
            try:
                async with self._fetch_slots:
                    triples = await self.peer.fetch(origin, entry.molecule_key, layout, part)
                return entry.origin, triples, False
            except (RemoteError, asyncio.TimeoutError, ConnectionError):
                return entry.origin, [], True

        if self.sequential:
            fetched = [await fetch(e) for e in found.entries]
        else:
            fetched = await asyncio.gather(*(fetch(e) for e in found.entries))
        seen = set()
        out = []
        for origin, triples, failed in fetched:
            partial |= failed
            for t in triples:
                t = TripleId(*t)
                if t in seen or match(pattern, t) is None:
                    continue
                seen.add(t)
                out.append(t)
                for c in t:
                    self.sources.setdefault(c, origin)
        out.sort()
        return PatternResult(out, partial, found.hops, len(found.entries))

    async def execute_join(self, query_plan: QueryPlan) -> JoinResult:
        steps = list(query_plan)
        if not steps:
            raise ValueError("empty plan")
        first = await self.resolve_pattern(steps[0].pattern)
        partial = first.partial
        bindings = [b for t in first.triples if (b := match(steps[0].pattern, t)) is not None]
        bound = set(steps[0].pattern.variables())
        remaining = steps[1:]
        semaphore = asyncio.Semaphore(self.max_concurrent)
        while remaining and bindings:
            stage = [s for s in remaining if set(s.pattern.variables()) & bound] or remaining[:1]
            remaining = [s for s in remaining if s not in stage]
            probes: dict[TriplePattern, PatternResult | None] = {}
            for b in bindings:
                for step in stage:
                    probes.setdefault(substitute(step.pattern, b), None)

            async def probe(inst: TriplePattern):
                async with semaphore:
                    probes[inst] = await self.resolve_pattern(inst)

            self.probes += len(probes)
            if self.sequential:
                for inst in list(probes):
                    await probe(inst)
            else:
                await asyncio.gather(*(probe(inst) for inst in list(probes)))
            partial |= any(r.partial for r in probes.values())
            joined = []
            for b in bindings:
                partials = [b]
                for step in stage:
                    rows = probes[substitute(step.pattern, b)].triples
                    partials = [
                        merged for pb in partials for t in rows
                        if (merged := match(step.pattern, t, pb)) is not None
                    ]
                    if not partials:
                        break
                joined.extend(partials)
            bindings = joined
            for step in stage:
                bound.update(step.pattern.variables())
        if remaining:
            bindings = []
        return JoinResult(bindings, partial, self.probes)

    async def run(self, query: Query) -> tuple[list[str], JoinResult]:
        result = await self.execute_join(plan(query.patterns))
        select = query.variables
        result.bindings = [{v: b[v] for v in select} for b in result.bindings]
        return select, result

    async def decode_ids(self, ids: Iterable[int]) -> None:
        """Learn the strings of ``ids`` from the peers that supplied them."""
        dictionary = self.peer.dictionary
        wanted: dict[int, list[int]] = {}
        for ident in set(ids):
            if ident in dictionary:
                continue
            wanted.setdefault(self.sources.get(ident, self.peer.pid.id), []).append(ident)
        for origin_id, idents in sorted(wanted.items()):
            origin = self.origins.get(origin_id) or self.peer.known.get(origin_id)
            if origin is None:
                continue
            try:
                entries = await self.peer.dict_lookup(origin, sorted(idents))
            except (RemoteError, asyncio.TimeoutError, ConnectionError):
                continue
            dictionary.register_many(entries)


def format_tsv(select: Sequence[str], bindings: Iterable[Binding], dictionary: Dictionary | None, encoded: bool = False) -> str:
    lines = ["\t".join(f"?{v}" for v in select)]
    for b in bindings:
        cells = []
        for v in select:
            ident = b[v]
            if encoded or dictionary is None:
                cells.append(str(ident))
            else:
                term = dictionary.get(ident)
                cells.append(render_term(term) if term is not None else f"#{ident:08x}")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
