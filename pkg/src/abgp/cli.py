"""``abgp`` command line: run a node, append, query status, run a simulation."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import AbgpError


def _setup_logging():
    level = os.environ.get("ABGP_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _run(args):
    from .node import load_config, serve

    serve(load_config(args.config))
    return 0


def _append(args):
    from .node import cmd_append

    print(cmd_append(args.node, args.key, args.value, args.version))
    return 0


def _status(args):
    from .node import cmd_status

    status = cmd_status(args.node)
    status.pop("type", None)
    print(json.dumps(status, indent=2, sort_keys=True))
    return 0


def _sim(args):
    from .sim import SimConfig, Simulation

    config = SimConfig.from_json(json.loads(Path(args.scenario).read_text(encoding="utf-8")))
    sim = Simulation(config)
    report = sim.run()
    text = json.dumps(report.to_json(), indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0 if report.converged else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abgp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a node until interrupted")
    p.add_argument("--config", required=True, help="node config JSON file")
    p.set_defaults(func=_run)

    p = sub.add_parser("append", help="append a record through a node's local API")
    p.add_argument("--node", required=True, help="host:port of the node")
    p.add_argument("--key", required=True)
    p.add_argument("--value", required=True)
    p.add_argument("--version", required=True, type=int)
    p.set_defaults(func=_append)

    p = sub.add_parser("status", help="print a node's root and counters")
    p.add_argument("--node", required=True, help="host:port of the node")
    p.set_defaults(func=_status)

    p = sub.add_parser("sim", help="run a simulation scenario")
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--report", help="also write the report JSON here")
    p.set_defaults(func=_sim)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (AbgpError, OSError) as exc:
        print(f"abgp {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
