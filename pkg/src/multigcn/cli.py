"""Command-line entry point: ``multigcn {simulate,partition,oracle,reproduce,generate}``."""

from __future__ import annotations

import argparse
import sys

from .config import BYTE_UNITS, load_config
from .errors import ConfigError, MultiGCNError, SimulationDeadlock
from .experiments import reproduce, run_experiments
from .graph import build_csr, generate_rmat, load_edge_list, write_edge_list
from .metrics import parse_report, read_trace, verify_report
from .partition import build_partition_plan, compute_field_widths, dump_plan

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_DEADLOCK = 3


def _bytes(text: str) -> int:
    t = text.strip().lower().replace(" ", "")
    for unit in sorted(BYTE_UNITS, key=len, reverse=True):
        if t.endswith(unit) and t[:-len(unit)]:
            try:
                value = float(t[:-len(unit)]) * BYTE_UNITS[unit]
            except ValueError:
                break
            if value.is_integer() and value > 0:
                return int(value)
            break
    try:
        value = int(t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse byte count {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError("byte count must be positive")
    return value


def _status_code(manifest: dict) -> int:
    statuses = [r["status"] for r in manifest["runs"]]
    if any("SimulationDeadlock" in s for s in statuses):
        return EXIT_DEADLOCK
    if any("ConfigError" in s for s in statuses):
        return EXIT_CONFIG
    if any(s != "ok" for s in statuses):
        return EXIT_FAILED
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    spec = load_config(args.config)
    manifest = run_experiments(spec, args.out, models=args.model or None, jobs=args.jobs,
                               trace=args.trace, round_log=args.round_log)
    for r in manifest["runs"]:
        if r["status"] != "ok":
            print(f"run {r['index']} ({r['model']}): {r['status']}", file=sys.stderr)
    ok = sum(r["status"] == "ok" for r in manifest["runs"])
    print(f"{ok}/{len(manifest['runs'])} runs completed; results in {manifest['output']}")
    return _status_code(manifest)


def cmd_partition(args: argparse.Namespace) -> int:
    with open(args.graph, "rb") as fh:
        edges = load_edge_list(fh, args.format)
    g = build_csr(edges, args.feature_len, args.feature_len_out)
    widths = compute_field_widths(args.nodes, args.agg_buffer, args.feature_len * 4, args.alpha)
    plan = build_partition_plan(g, widths, args.max_packet_neighbors)
    with open(args.out, "wb") as fh:
        dump_plan(plan, fh)
    print(f"n={widths.n} x={widths.x} rounds={plan.rounds} tasks={sum(len(t) for t in plan.tasks.values())}")
    return EXIT_OK


def cmd_oracle(args: argparse.Namespace) -> int:
    with open(args.trace, encoding="utf-8") as fh:
        trace = read_trace(fh)
    with open(args.report, "rb") as fh:
        report = parse_report(fh.read())
    problems = verify_report(trace, report)
    for p in problems:
        print(p)
    if problems:
        print(f"{len(problems)} counter mismatches", file=sys.stderr)
        return EXIT_FAILED
    print("all counters reproduced from trace")
    return EXIT_OK


def cmd_reproduce(args: argparse.Namespace) -> int:
    manifest = reproduce(args.manifest, args.out, jobs=args.jobs)
    print(f"reproduced {len(manifest['runs'])} runs into {args.out}")
    return _status_code(manifest)


def cmd_generate(args: argparse.Namespace) -> int:
    edges = generate_rmat(args.scale, args.degree, seed=args.seed)
    with open(args.out, "wb") as fh:
        write_edge_list(edges, fh, args.format)
    print(f"{len(edges)} edges over {edges.num_vertices} vertices")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multigcn", description="Multi-node GCN accelerator simulator")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run the experiments described by a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--model", action="append", help="restrict to this model (repeatable)")
    s.add_argument("--trace", action="store_true", help="write per-run traces and JSON reports")
    s.add_argument("--round-log", action="store_true", help="write per-run round progress logs")
    s.add_argument("--out", help="result CSV (defaults to the config's output key)")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("partition", help="build and store a round partition plan")
    s.add_argument("--graph", required=True)
    s.add_argument("--format", choices=("text", "binary"), default="text")
    s.add_argument("--nodes", type=int, required=True)
    s.add_argument("--agg-buffer", type=_bytes, required=True)
    s.add_argument("--feature-len", type=int, default=512)
    s.add_argument("--feature-len-out", type=int, default=128)
    s.add_argument("--alpha", type=float, default=0.75)
    s.add_argument("--max-packet-neighbors", type=int, default=1024)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_partition)

    s = sub.add_parser("oracle", help="recompute a report's counters from its trace")
    s.add_argument("--trace", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(fn=cmd_oracle)

    s = sub.add_parser("reproduce", help="re-run a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_reproduce)

    s = sub.add_parser("generate", help="write an RMAT edge list")
    s.add_argument("--scale", type=int, required=True)
    s.add_argument("--degree", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=("text", "binary"), default="binary")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_generate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationDeadlock as exc:
        print(f"deadlock: {exc}", file=sys.stderr)
        return EXIT_DEADLOCK
    except (MultiGCNError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
