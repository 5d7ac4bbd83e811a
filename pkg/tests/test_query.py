import asyncio
import random
from collections import Counter

import pytest

from p2prdf.cluster import SimCluster
from p2prdf.dictionary import Dictionary
from p2prdf.keyspace import Layout
from p2prdf.query import (
    RDF_TYPE, DisconnectedPattern, Executor, ParseError, TriplePattern, Var,
    format_tsv, oracle_join, oracle_match, parse_query, plan, select_layout, substitute,
)
from helpers import random_workload

SOSA = "http://www.w3.org/ns/sosa/"

OBSERVATION_QUERY = """PREFIX sosa:<http://www.w3.org/ns/sosa/>
PREFIX rdf:<http://www.w3.org/1999/02/22-rdf-syntax-ns#>

SELECT ?observation
WHERE { ?observation rdf:type  sosa:Observation. }
"""

SENSOR_JOIN_QUERY = """PREFIX sosa:<http://www.w3.org/ns/sosa/>
PREFIX rdf:<http://www.w3.org/1999/02/22-rdf-syntax-ns#>

SELECT ?obs ?featureOfInterest ?obsProperty
WHERE {
?obs sosa:hasFeatureOfInterest ?featureOfInterest.
?obs sosa:observedProperty     ?obsProperty.
}
"""

x, y, z = Var("x"), Var("y"), Var("z")


# -- parsing -----------------------------------------------------------------------

def test_observation_query():
    d = Dictionary()
    q = parse_query(OBSERVATION_QUERY, d)
    assert q.select == ["observation"]
    assert q.patterns == [TriplePattern(Var("observation"), d.encode(RDF_TYPE), d.encode(SOSA + "Observation"))]


def test_sensor_join_query():
    d = Dictionary()
    q = parse_query(SENSOR_JOIN_QUERY, d)
    obs = Var("obs")
    assert q.patterns == [
        TriplePattern(obs, d.encode(SOSA + "hasFeatureOfInterest"), Var("featureOfInterest")),
        TriplePattern(obs, d.encode(SOSA + "observedProperty"), Var("obsProperty")),
    ]
    steps = plan(q.patterns)
    assert [s.pattern for s in steps] == q.patterns
    # layouts belong to the templates; bound probes re-select at run time
    assert [s.layout for s in steps] == [Layout.POS, Layout.POS]
    assert select_layout(substitute(steps.steps[1].pattern, {"obs": 5})) == Layout.SPO
    assert steps.steps[1].join_vars == ("obs",)


def test_query_without_closing_brace_is_rejected():
    with pytest.raises(ParseError):
        parse_query(OBSERVATION_QUERY.replace("}", ""), Dictionary())


def test_syntax_sugar():
    d = Dictionary()
    q = parse_query(
        'PREFIX ex: <http://e/> SELECT * WHERE { ?s a ex:T ; ex:p "v"@en , "1"^^ex:int . _:b ex:q ?s }', d
    )
    t = d.encode("http://e/T")
    assert q.select is None
    assert q.patterns[0] == TriplePattern(Var("s"), d.encode(RDF_TYPE), t)
    assert q.patterns[1].o == d.encode('"v"@en')
    assert q.patterns[2].o == d.encode('"1"^^<http://e/int>')
    assert q.patterns[3].s == Var("_:b")
    assert q.variables == ["s"]


@pytest.mark.parametrize("text", [
    "SELECT ?x WHERE { ?x <p> }",
    "SELECT WHERE { ?x <p> ?y }",
    "SELECT ?x WHERE { ?x ex:p ?y }",
    "SELECT ?z WHERE { ?x <p> ?y }",
    "SELECT ?x WHERE { }",
    "SELECT ?x WHERE { \"lit\" <p> ?x }",
    "SELECT ?x WHERE { ?x _:b ?y }",
    "SELECT ?x WHERE { ?x <p> ?y } extra",
    "PREFIX ex <http://e/> SELECT ?x WHERE { ?x <p> ?y }",
])
def test_parse_errors(text):
    with pytest.raises(ParseError) as info:
        parse_query(text, Dictionary())
    assert "position" in str(info.value)


# -- planning ----------------------------------------------------------------------

@pytest.mark.parametrize("pattern, layout", [
    ((1, 2, x), Layout.SPO),
    ((x, 2, 3), Layout.POS),
    ((1, x, 3), Layout.OSP),
    ((x, y, 3), Layout.OSP),
    ((1, 2, 3), Layout.SPO),
    ((x, y, z), Layout.SPO),
    ((1, y, z), Layout.SPO),
    ((x, 2, z), Layout.POS),
])
def test_select_layout(pattern, layout):
    assert select_layout(pattern) == layout


def test_plan_puts_most_bound_first():
    steps = plan([TriplePattern(x, 3, y), TriplePattern(1, 2, x)])
    assert [s.pattern for s in steps] == [TriplePattern(1, 2, x), TriplePattern(x, 3, y)]


def test_plan_rejects_cartesian_products():
    with pytest.raises(DisconnectedPattern):
        plan([TriplePattern(x, 1, y), TriplePattern(z, 2, 3)])


def test_substitution_binds_more_components():
    rng = random.Random(5)
    for _ in range(500):
        comps = [rng.choice([x, y, z, rng.randrange(10)]) for _ in range(3)]
        pat = TriplePattern(*comps)
        binding = {v: rng.randrange(10) for v in ("x", "y", "z") if rng.random() < 0.7}
        inst = substitute(pat, binding)
        touched = any(isinstance(c, Var) and c.name in binding for c in pat)
        if touched:
            assert inst.bound_count() > pat.bound_count()
        else:
            assert inst == pat


# -- execution against the oracle --------------------------------------------------

def _patterns(rng, subjects, predicates, objects):
    s, p, o = rng.choice(subjects), rng.choice(predicates), rng.choice(objects)
    shapes = [(s, p, o), (s, p, x), (s, x, o), (x, p, o), (s, x, y), (x, p, y), (x, y, o), (x, y, z)]
    return [TriplePattern(*shape) for shape in shapes]


def _stars(rng, subjects, predicates, objects):
    p1, p2, p3 = rng.sample(predicates, 3)
    return [
        [TriplePattern(x, p1, y), TriplePattern(x, p2, z)],
        [TriplePattern(rng.choice(subjects), p1, x), TriplePattern(x, p2, y)],
        [TriplePattern(x, p1, y), TriplePattern(x, p2, z), TriplePattern(x, p3, rng.choice(objects))],
        [TriplePattern(x, p1, x)],
    ]


@pytest.mark.parametrize("n", [1, 2, 4, 8])
@pytest.mark.parametrize("build", ["prepartitioned", "exchange"])
def test_results_equal_the_oracle(n, build):
    triples, subjects, predicates, objects = random_workload(n * 7, 600, n_subjects=40)
    cluster = SimCluster(n, seed=n)
    getattr(cluster, f"build_{build}")(triples)
    rng = random.Random(n)
    for _ in range(3):
        peer = rng.choice(cluster.peers)
        for pat in _patterns(rng, subjects, predicates, objects):
            got = cluster.run(Executor(peer).resolve_pattern(pat))
            assert not got.partial
            assert got.triples == oracle_match(triples, pat), pat
        for star in _stars(rng, subjects, predicates, objects):
            result = cluster.run(Executor(peer).execute_join(plan(star)))
            select = sorted({v for pat in star for v in pat.variables()})
            assert Counter(result.rows(select)) == oracle_join(triples, star, select)


def test_concurrent_and_sequential_probes_agree():
    triples, subjects, predicates, objects = random_workload(11, 800, n_subjects=30)
    cluster = SimCluster(4, seed=11)
    cluster.build_prepartitioned(triples)
    rng = random.Random(11)
    for star in _stars(rng, subjects, predicates, objects):
        select = sorted({v for pat in star for v in pat.variables()})
        rows = []
        for sequential in (False, True):
            ex = Executor(cluster.peers[0], sequential=sequential, max_concurrent=3)
            rows.append(Counter(cluster.run(ex.execute_join(plan(star))).rows(select)))
        assert rows[0] == rows[1]


def test_empty_first_pattern_short_circuits():
    triples, *_ = random_workload(3, 200)
    cluster = SimCluster(4, seed=3)
    cluster.build_prepartitioned(triples)
    star = [TriplePattern(0xDEAD, 0xBEEF, x), TriplePattern(x, y, z)]
    ex = Executor(cluster.peers[1])
    result = cluster.run(ex.execute_join(plan(star)))
    assert result.bindings == [] and result.probes == 0


def test_sensor_join_on_generated_observations():
    from p2prdf import generator
    data = generator.encode(generator.generate(2, 4))
    cluster = SimCluster(4, seed=2)
    cluster.build_prepartitioned(data.triples, data.dictionary.items())
    q = parse_query(SENSOR_JOIN_QUERY, cluster.peers[0].dictionary)
    select, result = cluster.run(Executor(cluster.peers[0]).run(q))
    assert select == ["obs", "featureOfInterest", "obsProperty"]
    assert len(result.bindings) == 4 * generator.OBSERVATIONS_PER_RECORD
    assert Counter(result.rows(select)) == oracle_join(data.triples, q.patterns, select)


def test_decode_ids_fetches_unknown_terms():
    d = Dictionary()
    triples = [tuple(d.encode(t) for t in ("http://e/s", "http://e/p", '"o"'))]
    cluster = SimCluster(2, seed=4)
    cluster.build_prepartitioned(triples, d.items())
    initiator = cluster.peers[0]
    initiator.dictionary = Dictionary()
    ex = Executor(initiator)
    q = parse_query("SELECT ?o WHERE { <http://e/s> <http://e/p> ?o }", initiator.dictionary)
    select, result = cluster.run(ex.run(q))
    cluster.run(ex.decode_ids(b["o"] for b in result.bindings))
    assert format_tsv(select, result.bindings, initiator.dictionary) == '?o\n"o"\n'


def test_format_tsv():
    d = Dictionary()
    a, b = d.encode("http://e/a"), d.encode('"x"@en')
    text = format_tsv(["s", "o"], [{"s": a, "o": b}, {"s": a, "o": 7}], d)
    assert text == '?s\t?o\n<http://e/a>\t"x"@en\n<http://e/a>\t#00000007\n'
    assert format_tsv(["s"], [{"s": a}], d, encoded=True) == f"?s\n{a}\n"


def test_oracle_join_matches_brute_force():
    import itertools
    from p2prdf.query import match
    rng = random.Random(8)
    for _ in range(40):
        triples = {tuple(rng.randrange(4) for _ in range(3)) for _ in range(25)}
        star = [TriplePattern(*(rng.choice([x, y, z, rng.randrange(4)]) for _ in range(3))) for _ in range(2)]
        select = sorted({v for pat in star for v in pat.variables()})
        expected = Counter()
        for combo in itertools.product(sorted(triples), repeat=len(star)):
            b = {}
            for pat, t in zip(star, combo):
                b = match(pat, t, b)
                if b is None:
                    break
            if b is not None:
                expected[tuple(b[v] for v in select)] += 1
        assert oracle_join(triples, star, select) == expected
