"""Command line entry point: ``fedgroups run|topo|partition``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .experiment import build, datasets
from .runtime import RuntimeAbort
from .topology import export_graph, validate


def _setup_logging() -> None:
    level = os.environ.get("OPENFED_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = load_config(args.config)
    report = run_experiment(cfg, node=args.node, stable_output=args.stable_output, metrics_path=args.metrics)
    if report.final_accuracy is not None:
        print(f"rounds={report.rounds_completed} accuracy={report.final_accuracy:.4f} loss={report.final_loss:.4f}")
    return report.exit_code


def cmd_topo_check(args) -> int:
    cfg = load_config(args.config)
    diags = validate(cfg.topology)
    for d in diags:
        print(d)
    if not diags:
        print("ok")
    return 1 if any(d.severity == "error" for d in diags) else 0


def cmd_topo_render(args) -> int:
    cfg = load_config(args.config)
    dot = export_graph(cfg.topology, "dot")
    if args.out in (None, "-"):
        sys.stdout.write(dot.decode())
    else:
        Path(args.out).write_bytes(dot)
    return 0


def cmd_partition_inspect(args) -> int:
    cfg = load_config(args.config)
    setup = build(cfg)
    train, _ = datasets(cfg)
    hist = setup.partition.label_histograms(train)
    width = max(len(c) for c in hist)
    print(f"{'client':<{width}}  " + " ".join(f"{f'y={k}':>6}" for k in range(train.num_classes)))
    for client, counts in hist.items():
        print(f"{client:<{width}}  " + " ".join(f"{c:>6}" for c in counts))
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgroups", description="Federated group orchestration and simulation.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--node", help="run only this node (distributed tcp mode)")
    run.add_argument("--stable-output", action="store_true", help="omit wall-clock fields from metrics")
    run.add_argument("--metrics", help="override output.metrics")
    run.set_defaults(func=cmd_run)

    topo = sub.add_parser("topo", help="inspect a topology")
    topo_sub = topo.add_subparsers(dest="topo_command", required=True)
    check = topo_sub.add_parser("check", help="print topology diagnostics")
    check.add_argument("--config", required=True)
    check.set_defaults(func=cmd_topo_check)
    render = topo_sub.add_parser("render", help="write the topology as DOT")
    render.add_argument("--config", required=True)
    render.add_argument("--out")
    render.set_defaults(func=cmd_topo_render)

    part = sub.add_parser("partition", help="inspect the data partition")
    part_sub = part.add_subparsers(dest="partition_command", required=True)
    inspect = part_sub.add_parser("inspect", help="print per-client label histograms")
    inspect.add_argument("--config", required=True)
    inspect.set_defaults(func=cmd_partition_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RuntimeAbort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
