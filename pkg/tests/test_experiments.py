import io

import pytest

from p2prdf import experiments
from p2prdf.experiments import CSV_COLUMNS, ExperimentSpec


def small_exp1(**kw):
    values = dict(experiment="exp1", peers=[1, 4], sizes=[2_000, 6_000], seed=3)
    values.update(kw)
    return ExperimentSpec(**values)


def test_exp1_rows_and_csv():
    rows = experiments.run(small_exp1())
    assert [(r.n_peers, r.query) for r in rows] == [
        (1, "TP1"), (1, "TP2"), (1, "TP1"), (1, "TP2"),
        (4, "TP1"), (4, "TP2"), (4, "TP1"), (4, "TP2"),
    ]
    assert [r.dataset_size for r in rows[:4:2]] == [23 * 87, 69 * 87]
    for r in rows:
        if r.query == "TP2":
            assert r.results == 15
        else:
            assert r.results == r.dataset_size * 7 // 87
        if r.n_peers == 1:
            assert r.hops == 0 and r.messages == 0 and r.qet_ms == 0
        else:
            assert r.messages > 0 and r.qet_ms > 0
    out = io.StringIO()
    experiments.write_csv(rows, out)
    assert out.getvalue().splitlines()[0] == ",".join(CSV_COLUMNS)
    assert experiments.read_csv(io.StringIO(out.getvalue())) == rows


def test_same_spec_same_csv():
    def csv_text(spec):
        out = io.StringIO()
        experiments.write_csv(experiments.run(spec), out)
        return out.getvalue()

    assert csv_text(small_exp1()) == csv_text(small_exp1())
    spec = ExperimentSpec(experiment="exp2", peers=[4], tuples_per_peer=[1_000])
    assert csv_text(spec) == csv_text(spec)


def test_exp1_with_exchange_built_trie():
    rows = experiments.run(small_exp1(peers=[4], prepartition=False))
    assert [r.results for r in rows] == [23 * 7, 15, 69 * 7, 15]


def test_exp2_star_join():
    spec = ExperimentSpec(experiment="exp2", peers=[4, 8], tuples_per_peer=[1_000, 10_000])
    rows = experiments.run(spec)
    for r in rows:
        assert r.results == r.n_peers * (r.tuples_per_peer // 100)
        assert r.dataset_size == r.n_peers * r.tuples_per_peer
    by = {(r.n_peers, r.tuples_per_peer): r.qet_ms for r in rows}
    assert by[(4, 1_000)] <= by[(8, 1_000)]
    assert by[(4, 1_000)] <= by[(4, 10_000)]


def test_exp2_needs_prepartition():
    with pytest.raises(ValueError):
        experiments.run(ExperimentSpec(experiment="exp2", prepartition=False))


def test_unknown_experiment():
    with pytest.raises(ValueError):
        experiments.run(ExperimentSpec(experiment="exp3"))
