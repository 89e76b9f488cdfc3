"""Command line: ``python -m netopt {train,oracle,report,node}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config
from .access import ProtocolError
from .kernel import Deadlock
from .switch import WindowViolation

log = logging.getLogger("netopt")

FLAG_KEYS = {
    "mode": "run.mode",
    "workers": "run.workers",
    "rounds": "run.rounds",
    "seed": "run.seed",
    "loss_prob": "fabric.loss_prob",
    "rate_limit": "store.rate_limit_bytes_per_sec",
}


def _run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--mode", choices=("sim", "udp"))
    p.add_argument("--workers", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss-prob", type=float)
    p.add_argument("--rate-limit", type=float, help="store bytes/sec, 0 = unlimited")
    p.add_argument("--out", type=Path, default=Path("run"))
    p.add_argument("--trace", action="store_true", help="dump every fabric event to trace.txt")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def build_config(args: argparse.Namespace) -> config.RunConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise config.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "trace", False):
        overrides["fabric.trace"] = True
    return config.load(args.config, overrides)


def cmd_train(args) -> int:
    from .cluster import run_sim, run_udp

    cfg = build_config(args)
    if cfg["run.role"] == "oracle":
        return cmd_oracle(args)
    try:
        result = run_udp(cfg, args.out) if cfg["run.mode"] == "udp" else run_sim(cfg, args.out)
    except (Deadlock, WindowViolation, ProtocolError, AssertionError) as e:
        trace = args.out / "trace.txt"
        print(f"invariant violation: {e}", file=sys.stderr)
        if trace.exists():
            print(f"trace dump: {trace}", file=sys.stderr)
        else:
            print("re-run with --trace for a full event dump", file=sys.stderr)
        return 2
    last = result.rows[-1] if result.rows else {}
    print(f"{len(result.rows)} rounds, final loss {last.get('loss', float('nan')):.6g}; "
          f"wrote {args.out / 'metrics.csv'} and {result.store_dir}")
    return 0


def cmd_oracle(args) -> int:
    from .oracle import run_oracle

    cfg = build_config(args)
    result = run_oracle(cfg, args.out)
    print(f"oracle: {len(result.rows)} rounds; wrote {args.out / 'metrics.csv'} and {result.store_dir}")
    return 0


def cmd_report(args) -> int:
    from .report import ReportError, make_report

    try:
        summary = make_report(args.run, args.reference, args.out)
    except ReportError as e:
        print(e, file=sys.stderr)
        return 1
    for key, value in summary.items():
        print(f"{key}: {value}")
    return 0


def cmd_node(args) -> int:
    from .cluster import run_udp_node

    cfg = config.load(args.config)
    run_udp_node(cfg, args.role, args.index, args.manifest, args.out)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="netopt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="distributed training run")
    _run_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("oracle", help="single-process reference run")
    _run_args(p)
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("report", help="loss-curve / traffic / overlap CSVs")
    p.add_argument("run", type=Path)
    p.add_argument("--reference", type=Path, help="second run (e.g. the oracle) to compare")
    p.add_argument("--out", type=Path, default=Path("report"))
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("node", help="one process of a UDP deployment")
    p.add_argument("--role", choices=("switch", "optimizer", "worker"), required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_node)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except config.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
