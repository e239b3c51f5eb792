"""Command line entry point: ``fedzkt {run,partition,gradcheck,plotdata}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, parse_config
from .experiment import ExperimentError, emit_plot_data, run_experiment, write_partition
from .gradcheck import run_all


def _load(args) -> object:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.federation.seed = args.seed
    if args.out is not None:
        cfg.out_dir = str(Path(args.out).resolve())
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    result = run_experiment(cfg)
    last = result.metrics[-1]
    print(f"{cfg.name}: round {last.round} mean device accuracy {last.mean_device_accuracy:.4f}, "
          f"global accuracy {last.global_accuracy:.4f} -> {cfg.out_dir}")
    return 0


def cmd_partition(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out_dir) / "partition.json" if args.out is not None or args.plan is None else Path(args.plan)
    plan = write_partition(cfg, out)
    print(f"{plan.scheme} partition over {plan.num_devices} devices, sizes {plan.sizes()} -> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_all(args.seed or 0)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return 1 if failed else 0


def cmd_plotdata(args) -> int:
    n = emit_plot_data(args.metrics_dir, args.out_path)
    print(f"{n} rows -> {args.out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedzkt", description="Federated zero-shot knowledge transfer simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment from a YAML config")
    p.add_argument("config")
    p.add_argument("--seed", type=int, help="override federation.seed")
    p.add_argument("--out", help="override out_dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("partition", help="write the device partition plan only")
    p.add_argument("config")
    p.add_argument("--seed", type=int, help="override federation.seed")
    p.add_argument("--out", help="override out_dir (plan goes to <out>/partition.json)")
    p.add_argument("--plan", help="explicit output path for the plan JSON")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plotdata", help="collect metrics.csv files into one long-format CSV")
    p.add_argument("metrics_dir")
    p.add_argument("out_path")
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ExperimentError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
