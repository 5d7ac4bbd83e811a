"""A small N-Triples reader and writer.

Supported: IRIs in angle brackets, blank nodes, and quoted literals with an
optional language tag or datatype IRI.  Terms are kept as the strings the
dictionary stores: IRIs without brackets, literals with their quotes and
suffix, blank nodes as ``_:label``.
"""
from __future__ import annotations

import re
from typing import IO, Iterable, Iterator

_IRI = r"<([^<>\"{}|^`\\\x00-\x20]*)>"
_BNODE = r"(_:[A-Za-z0-9_][A-Za-z0-9_.\-]*)"
_LITERAL = r'("(?:[^"\\\n\r]|\\.)*"(?:@[A-Za-z]+(?:-[A-Za-z0-9]+)*|\^\^<[^<>"{}|^`\\\x00-\x20]*>)?)'
_TERM = re.compile(rf"\s*(?:{_IRI}|{_BNODE}|{_LITERAL})")
_END = re.compile(r"\s*\.\s*(?:#.*)?$")


class NTriplesError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _term(text: str, pos: int, line_no: int, what: str, allow: str) -> tuple[str, int]:
    m = _TERM.match(text, pos)
    if m is None:
        raise NTriplesError(line_no, f"expected {what} at column {pos + 1}")
    iri, bnode, literal = m.groups()
    if iri is not None:
        if not iri:
            raise NTriplesError(line_no, f"empty IRI as {what}")
        return iri, m.end()
    kind = "bnode" if bnode is not None else "literal"
    if kind not in allow:
        raise NTriplesError(line_no, f"a {'blank node' if bnode else 'literal'} cannot be the {what}")
    return (bnode if bnode is not None else literal), m.end()


def parse_line(text: str, line_no: int = 1) -> tuple[str, str, str] | None:
    """One triple, or None for a blank or comment line."""
    stripped = text.strip()
    if not stripped or stripped.startswith("#"):
        return None
    s, pos = _term(text, 0, line_no, "subject", "bnode")
    p, pos = _term(text, pos, line_no, "predicate", "")
    o, pos = _term(text, pos, line_no, "object", "bnode literal")
    if _END.match(text, pos) is None:
        raise NTriplesError(line_no, "expected ' .' after the object")
    return s, p, o


def parse(lines: Iterable[str]) -> Iterator[tuple[str, str, str]]:
    for line_no, line in enumerate(lines, 1):
        triple = parse_line(line, line_no)
        if triple is not None:
            yield triple


def read_file(path) -> list[tuple[str, str, str]]:
    with open(path, encoding="utf-8") as fh:
        return list(parse(fh))


def render_term(term: str) -> str:
    if term.startswith('"') or term.startswith("_:"):
        return term
    return f"<{term}>"


def format_triple(triple: Iterable[str]) -> str:
    return " ".join(render_term(t) for t in triple) + " .\n"


def write(triples: Iterable[Iterable[str]], fh: IO[str]) -> int:
    n = 0
    for t in triples:
        fh.write(format_triple(t))
        n += 1
    return n
