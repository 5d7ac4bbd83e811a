"""Command line: ``p2prdf node|load|query|generate|experiment|status``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import asyncio
import logging
import sys

from . import experiments, generator, ntriples
from .node import Node, RequestFailed, client_load, client_query, client_status, load_config
from .network import SimConfig, Unreachable
from .overlay import BootstrapTimeout

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("p2prdf")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ints(text: str) -> list[int]:
    return [int(float(x)) for x in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="p2prdf", description="Peer-to-peer RDF triple store")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("node", help="run a peer")
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--listen")
    p.add_argument("--seed-peer", dest="seeds", action="append", help="address of a running peer (repeatable)")
    p.add_argument("--data-dir")
    p.add_argument("--data", help="N-Triples file to start with in local storage")
    p.add_argument("--replication-target", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--exchange-interval", type=float)
    p.add_argument("--split-threshold", type=int)
    p.add_argument("--rng-seed", dest="seed", type=int)

    p = sub.add_parser("load", help="load an N-Triples file through a peer")
    p.add_argument("file")
    p.add_argument("--node", required=True, help="peer address host:port")

    p = sub.add_parser("query", help="run a SPARQL basic graph pattern query")
    p.add_argument("--node", required=True)
    p.add_argument("--file", help="query file; stdin when omitted")
    p.add_argument("--encoded", action="store_true", help="print raw term ids")

    p = sub.add_parser("status", help="print a peer's state")
    p.add_argument("--node", required=True)

    p = sub.add_parser("generate", help="write a synthetic observation dataset")
    p.add_argument("--stations", type=int, required=True)
    p.add_argument("--observations", type=int, required=True, help="number of 87-triple records")
    p.add_argument("--rng-seed", dest="seed", type=int, default=0)
    p.add_argument("-o", "--output", help="output file; stdout when omitted")

    p = sub.add_parser("experiment", help="run a simulator campaign and write CSV")
    p.add_argument("name", choices=["exp1", "exp2"])
    p.add_argument("--peers", type=_ints, default=list(experiments.PEER_COUNTS))
    p.add_argument("--sizes", type=_ints, default=list(experiments.EXP1_SIZES))
    p.add_argument("--tuples-per-peer", type=_ints, default=list(experiments.EXP2_TUPLES))
    p.add_argument("--queries", default="TP1,TP2")
    p.add_argument("--retrieval-rate", type=float, default=0.01)
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--per-message-latency", type=float, default=SimConfig.per_message_latency)
    p.add_argument("--per-kilobyte-latency", type=float, default=SimConfig.per_kilobyte_latency)
    p.add_argument("--rng-seed", dest="seed", type=int, default=0)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--prepartition", dest="prepartition", action="store_true", default=True,
                      help="start from a balanced pre-assigned trie (default)")
    mode.add_argument("--exchange", dest="prepartition", action="store_false",
                      help="build the trie with the exchange protocol")
    p.add_argument("-o", "--output", help="CSV file; stdout when omitted")
    return parser


# -- commands ---------------------------------------------------------------------

async def _run_node(args) -> int:
    config = load_config(
        args.config,
        listen=args.listen,
        seeds=args.seeds,
        data_dir=args.data_dir,
        data=args.data,
        replication_target=args.replication_target,
        m=args.m,
        exchange_interval=args.exchange_interval,
        split_threshold=args.split_threshold,
        seed=args.seed,
    )
    node = Node(config)
    try:
        await node.start()
    except OSError as exc:
        print(f"cannot listen on {config.listen}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        await node.serve_forever()
    except BootstrapTimeout as exc:
        print(f"bootstrap failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        await node.stop()
    return EXIT_OK


def cmd_node(args) -> int:
    try:
        return asyncio.run(_run_node(args))
    except KeyboardInterrupt:
        return EXIT_OK


def cmd_load(args) -> int:
    triples = ntriples.read_file(args.file)
    count = asyncio.run(client_load(args.node, triples))
    print(count)
    return EXIT_OK


def cmd_query(args) -> int:
    if args.file:
        with open(args.file, encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = sys.stdin.read()
    sys.stdout.write(asyncio.run(client_query(args.node, text, args.encoded)))
    return EXIT_OK


def cmd_status(args) -> int:
    sys.stdout.write(asyncio.run(client_status(args.node)))
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.stations < 0 or args.observations < 0:
        print("counts must be non-negative", file=sys.stderr)
        return EXIT_USAGE
    if args.observations and not args.stations:
        print("observations need at least one station", file=sys.stderr)
        return EXIT_USAGE
    triples = generator.generate(args.stations, args.observations, args.seed)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            n = ntriples.write(triples, fh)
    else:
        n = ntriples.write(triples, sys.stdout)
    log.info("wrote %d triples", n)
    return EXIT_OK


def cmd_experiment(args) -> int:
    spec = experiments.ExperimentSpec(
        experiment=args.name,
        peers=args.peers,
        sizes=args.sizes,
        tuples_per_peer=args.tuples_per_peer,
        queries=[q.strip() for q in args.queries.split(",") if q.strip()],
        per_message_latency=args.per_message_latency,
        per_kilobyte_latency=args.per_kilobyte_latency,
        retrieval_rate=args.retrieval_rate,
        repetitions=args.repetitions,
        seed=args.seed,
        prepartition=args.prepartition,
    )
    unknown = set(spec.queries) - {"TP1", "TP2"}
    if spec.experiment == "exp1" and unknown:
        print(f"unknown queries: {', '.join(sorted(unknown))}", file=sys.stderr)
        return EXIT_USAGE
    rows = experiments.run(spec)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            experiments.write_csv(rows, fh)
    else:
        experiments.write_csv(rows, sys.stdout)
    return EXIT_OK


COMMANDS = {
    "node": cmd_node,
    "load": cmd_load,
    "query": cmd_query,
    "status": cmd_status,
    "generate": cmd_generate,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help and usage errors; return the code instead of exiting
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ntriples.NTriplesError as exc:
        print(f"{args.file}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RequestFailed, Unreachable, ConnectionError, asyncio.TimeoutError) as exc:
        print(f"request failed: {exc or type(exc).__name__}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
