"""Synthetic weather-observation graphs shaped like SOSA-annotated station data.

Every record is one station-day with seven sensor observations.  A record
contributes 3 record-level triples plus 12 per observation, 87 in all, and
exactly 7 of them match ``?obs rdf:type sosa:Observation``.
"""
from __future__ import annotations

import datetime
import random
from dataclasses import dataclass
from typing import Iterable, Iterator

from .dictionary import CollisionError, Dictionary
from .keyspace import TripleId
from .query import RDF_TYPE, Var, TriplePattern

SOSA = "http://www.w3.org/ns/sosa/"
EX = "http://example.org/weather/"
XSD = "http://www.w3.org/2001/XMLSchema#"

TRIPLES_PER_RECORD = 87
OBSERVATIONS_PER_RECORD = 7
RECORDS_PER_STATION = 15

# property, unit, value range
PROPERTIES = [
    ("AirTemperature", "degC", (-30.0, 45.0)),
    ("DewPoint", "degC", (-40.0, 30.0)),
    ("SeaLevelPressure", "hPa", (950.0, 1050.0)),
    ("WindDirection", "deg", (0.0, 360.0)),
    ("WindSpeed", "m_per_s", (0.0, 40.0)),
    ("SkyCoverage", "okta", (0.0, 8.0)),
    ("Precipitation", "mm", (0.0, 80.0)),
]


def _literal(text: str, datatype: str | None = None) -> str:
    return f'"{text}"^^<{XSD}{datatype}>' if datatype else f'"{text}"'


def station_iri(k: int) -> str:
    return f"{EX}station/{k}"


def sensor_iri(k: int, prop: str) -> str:
    return f"{EX}station/{k}/sensor/{prop}"


def record_triples(r: int, station: int, seed: int = 0) -> list[tuple[str, str, str]]:
    """The 87 triples of record ``r`` taken at ``station``."""
    rng = random.Random(f"{seed}:{r}")
    date = (datetime.date(2000, 1, 1) + datetime.timedelta(days=r % 3650)).isoformat()
    rec = f"{EX}record/{r}"
    st = station_iri(station)
    out = [
        (rec, RDF_TYPE, f"{EX}WeatherRecord"),
        (rec, f"{EX}station", st),
        (rec, f"{EX}date", _literal(date, "date")),
    ]
    hour = rng.randrange(24)
    stamp = _literal(f"{date}T{hour:02d}:00:00Z", "dateTime")
    for j, (prop, unit, (lo, hi)) in enumerate(PROPERTIES):
        obs = f"{EX}obs/{r}/{j}"
        result = f"{EX}result/{r}/{j}"
        sensor = sensor_iri(station, prop)
        value = round(rng.uniform(lo, hi), 1)
        out += [
            (obs, RDF_TYPE, f"{SOSA}Observation"),
            (obs, f"{SOSA}hasFeatureOfInterest", f"{st}/atmosphere"),
            (obs, f"{SOSA}observedProperty", f"{EX}property/{prop}"),
            (obs, f"{SOSA}madeBySensor", sensor),
            (sensor, f"{SOSA}madeObservation", obs),
            (obs, f"{SOSA}hasResult", result),
            (result, RDF_TYPE, f"{SOSA}Result"),
            (result, f"{EX}numericValue", _literal(str(value), "decimal")),
            (result, f"{EX}unit", f"{EX}unit/{unit}"),
            (obs, f"{SOSA}resultTime", stamp),
            (obs, f"{SOSA}phenomenonTime", stamp),
            (obs, f"{EX}partOf", rec),
        ]
    return out


def generate(stations: int, records: int, seed: int = 0) -> Iterator[tuple[str, str, str]]:
    """``records`` records spread over ``stations`` in contiguous runs."""
    if stations < 0 or records < 0:
        raise ValueError("counts must be non-negative")
    if records and not stations:
        raise ValueError("records need at least one station")
    for r in range(records):
        yield from record_triples(r, r * stations // records, seed)


def experiment_dataset(records: int, seed: int = 0) -> Iterator[tuple[str, str, str]]:
    """Records in the order they are loaded: a fixed number per station,
    so every prefix keeps station 0 complete."""
    for r in range(records):
        yield from record_triples(r, r // RECORDS_PER_STATION, seed)


def records_for(size: int) -> int:
    return max(1, round(size / TRIPLES_PER_RECORD))


def tp1(dictionary: Dictionary) -> TriplePattern:
    """Every observation: about 8% of the data."""
    return TriplePattern(Var("obs"), dictionary.encode(RDF_TYPE), dictionary.encode(f"{SOSA}Observation"))


def tp2(dictionary: Dictionary, station: int = 0) -> TriplePattern:
    """Observations of one sensor: a fixed count once its station is complete."""
    return TriplePattern(
        dictionary.encode(sensor_iri(station, PROPERTIES[0][0])),
        dictionary.encode(f"{SOSA}madeObservation"),
        Var("obs"),
    )


@dataclass
class EncodedDataset:
    triples: list[TripleId]
    dictionary: Dictionary
    renamed: dict[str, str]


def encode(triples: Iterable[tuple[str, str, str]], dictionary: Dictionary | None = None) -> EncodedDataset:
    """Dictionary-encode term triples.

    A 32-bit id space collides by the birthday bound somewhere past a few
    hundred thousand distinct terms.  A term whose id is taken gets a
    ``#n`` suffix until it encodes uniquely, so a synthetic dataset of any
    size maps one-to-one onto ids.
    """
    dictionary = dictionary or Dictionary()
    renamed: dict[str, str] = {}
    cache: dict[str, int] = {}
    out = []

    def enc(term: str) -> int:
        ident = cache.get(term)
        if ident is not None:
            return ident
        name = term
        n = 0
        while True:
            try:
                ident = dictionary.encode(name)
                break
            except CollisionError:
                n += 1
                # literals keep their quotes and suffix
                name = f"{term}#{n}" if not term.startswith('"') else f'"#{n}{term[1:]}'
        if name != term:
            renamed[term] = name
        cache[term] = ident
        return ident

    for s, p, o in triples:
        out.append(TripleId(enc(s), enc(p), enc(o)))
    return EncodedDataset(out, dictionary, renamed)

