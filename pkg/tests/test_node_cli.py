import asyncio
import socket
import subprocess
import sys
import threading

import pytest

from p2prdf import cli, generator, ntriples
from p2prdf.node import Node, NodeConfig, load_config, parse_status, read_config_file
from helpers import check_partition
from p2prdf.keyspace import BitKey, interval


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class LiveCluster:
    """Socket nodes on an event loop in a background thread."""

    def __init__(self, n, tmp_path, data=None):
        self.loop = asyncio.new_event_loop()
        self.thread = threading.Thread(target=self.loop.run_forever, daemon=True)
        self.thread.start()
        addrs = [f"127.0.0.1:{free_port()}" for _ in range(n)]
        self.addresses = addrs
        self.nodes = []
        for i, addr in enumerate(addrs):
            config = NodeConfig(
                listen=addr, seeds=addrs[:1] if i else [], data_dir=str(tmp_path / f"n{i}"),
                seed=i, data=data if i == 0 else None,
            )
            node = Node(config)
            self.call(node.start())
            self.nodes.append(node)
        for node in self.nodes:
            self.call(node.wait_running(60))

    def call(self, coro, timeout=120):
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(timeout)

    def close(self):
        for node in self.nodes:
            self.call(node.stop())
        self.loop.call_soon_threadsafe(self.loop.stop)
        self.thread.join(5)


@pytest.fixture(scope="module")
def live(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("live")
    data = tmp / "weather.nt"
    with open(data, "w", encoding="utf-8") as fh:
        ntriples.write(generator.generate(2, 30), fh)
    cluster = LiveCluster(4, tmp)
    cluster.data = data
    yield cluster
    cluster.close()


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_nodes_converge_to_a_partition(live, capsys):
    paths = []
    for addr in live.addresses:
        code, out, _ = run_cli(capsys, "status", "--node", addr)
        assert code == 0
        status = parse_status(out)
        assert status["phase"] == "RUNNING"
        paths.append(status["path"])
    assert sorted(paths) == ["00", "01", "10", "11"]
    assert check_partition([interval(BitKey.from_bits(p)) for p in paths])


def test_load_then_query(live, capsys):
    code, out, _ = run_cli(capsys, "load", live.data, "--node", live.addresses[1])
    assert code == 0 and out.strip() == str(30 * 87)
    query = live.data.parent / "q.rq"
    query.write_text(
        "PREFIX sosa: <http://www.w3.org/ns/sosa/>\n"
        "SELECT ?obs WHERE { ?obs a sosa:Observation }\n"
    )
    code, out, _ = run_cli(capsys, "query", "--node", live.addresses[3], "--file", query)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "?obs" and len(lines) == 1 + 30 * 7
    assert lines[1].startswith("<http://example.org/weather/obs/")
    code, out, _ = run_cli(capsys, "query", "--node", live.addresses[2], "--file", query, "--encoded")
    assert code == 0 and out.splitlines()[1].isdigit()


def test_everything_replicated_twice(live):
    from p2prdf.overlay import replica_census

    async def settled():
        # replica pushes trail the load by a short delay
        for _ in range(200):
            census = replica_census([n.peer for n in live.nodes])
            if census and set(census.values()) == {2}:
                return census
            await asyncio.sleep(0.05)
        return census

    census = live.call(settled())
    assert set(census.values()) == {2}


def test_query_errors(live, capsys):
    code, _, err = run_cli(capsys, "query", "--node", live.addresses[0], "--file", __file__)
    assert code == 2 and "request failed" in err


def test_unreachable_node(capsys):
    code, _, err = run_cli(capsys, "status", "--node", f"127.0.0.1:{free_port()}")
    assert code == 2


def test_duplicate_listen_address_fails(live):
    proc = subprocess.run(
        [sys.executable, "-m", "p2prdf.cli", "node", "--listen", live.addresses[0]],
        capture_output=True, text=True, timeout=60,
    )
    assert proc.returncode == 2 and "cannot listen" in proc.stderr


def test_bad_ntriples_file(tmp_path, capsys):
    bad = tmp_path / "bad.nt"
    bad.write_text("<s> <p> <o> .\n<s> <p>\n")
    code, _, err = run_cli(capsys, "load", bad, "--node", "127.0.0.1:1")
    assert code == 2 and "line 2" in err


def test_usage_errors(capsys):
    assert run_cli(capsys, "frobnicate")[0] == 1
    assert run_cli(capsys, "load")[0] == 1
    assert run_cli(capsys, "generate", "--stations", "0", "--observations", "3")[0] == 1
    assert run_cli(capsys, "experiment", "exp1", "--queries", "TP9", "--peers", "1", "--sizes", "100")[0] == 1


def test_generate_command(tmp_path, capsys):
    out = tmp_path / "g.nt"
    code, _, _ = run_cli(capsys, "generate", "--stations", "20", "--observations", "300", "-o", out)
    assert code == 0
    assert len(ntriples.read_file(out)) == 26_100
    code, text, _ = run_cli(capsys, "generate", "--stations", "1", "--observations", "1")
    assert code == 0 and len(text.splitlines()) == 87


def test_experiment_command(tmp_path, capsys):
    out = tmp_path / "e.csv"
    code, _, _ = run_cli(capsys, "experiment", "exp2", "--peers", "4", "--tuples-per-peer", "1000", "-o", out)
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("experiment,n_peers") and len(lines) == 2
    code, _, err = run_cli(capsys, "experiment", "exp2", "--exchange", "--peers", "4")
    assert code == 2 and "pre-partitioned" in err


def test_config_precedence(tmp_path):
    path = tmp_path / "node.conf"
    path.write_text("listen = 127.0.0.1:9000\nseeds = a:1, b:2  # two seeds\nm = 32\nexchange-interval = 0.2\n")
    assert read_config_file(path) == {
        "listen": "127.0.0.1:9000", "seeds": ["a:1", "b:2"], "m": 32, "exchange_interval": 0.2,
    }
    config = load_config(path, m=48, listen=None)
    assert config.m == 48 and config.listen == "127.0.0.1:9000" and config.replication_target == 2
    path.write_text("colour = blue\n")
    with pytest.raises(ValueError):
        read_config_file(path)


def test_node_preloads_data(tmp_path):
    data = tmp_path / "d.nt"
    data.write_text("<http://e/s> <http://e/p> <http://e/o> .\n")
    cluster = LiveCluster(1, tmp_path, data=data)
    try:
        peer = cluster.nodes[0].peer
        assert peer.storage.tuple_count() == 3 and peer.dictionary.encode("http://e/o") in peer.dictionary
    finally:
        cluster.close()
