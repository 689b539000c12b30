"""Command line front-end: ``python -m fedmil {run,plot,inspect-kernel}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import FedMILError
from .experiment import ExperimentConfig, emit_plot_data, inspect_kernel, run_experiment


def _load_config(args):
    with open(args.config) as fh:
        doc = json.load(fh)
    if getattr(args, "method", None):
        doc["methods"] = args.method
    if getattr(args, "seed", None) is not None:
        doc["base_seed"] = args.seed
    if getattr(args, "out", None):
        doc["output_dir"] = args.out
    return ExperimentConfig.from_dict(doc)


def cmd_run(args):
    cfg = _load_config(args)
    summary = run_experiment(cfg)
    print(f"{summary['status']}: results in {cfg.output_dir}")
    for cell in summary["cells"]:
        acc = cell["metrics"]["accuracy"]
        print(f"  s={cell['strength']:g} u={cell['utilization']:g} {cell['method']:>6}: "
              f"acc {acc['mean']:.4f} +- {acc['std']:.4f} (n={cell['n_runs']})")
    return 0 if summary["status"] == "complete" else 1


def cmd_plot(args):
    for path in emit_plot_data(args.results):
        print(path)
    return 0


def cmd_inspect(args):
    doc = inspect_kernel(_load_config(args))
    text = json.dumps(doc, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="fedmil", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment sweep from a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--method", action="append", choices=["random", "dpp", "dppq"],
                     help="restrict to this method (repeatable)")
    run.add_argument("--seed", type=int, help="override base_seed")
    run.add_argument("--out", help="override output_dir")
    run.set_defaults(func=cmd_run)

    plot = sub.add_parser("plot", help="emit per-figure CSVs from a results directory")
    plot.add_argument("--results", required=True)
    plot.set_defaults(func=cmd_plot)

    insp = sub.add_parser("inspect-kernel", help="dump S, q and kernel eigenvalues")
    insp.add_argument("--config", required=True)
    insp.add_argument("--seed", type=int)
    insp.add_argument("--out", help="write JSON here instead of stdout")
    insp.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FedMILError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
