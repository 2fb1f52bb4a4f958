"""Command-line interface: gen-data, run, report."""
from __future__ import annotations

import argparse
import sys

from kap.experiment import (
    ARMS,
    generate_data,
    load_config,
    plot_param_histograms,
    plot_pck,
    run_arm,
    write_report,
)
from kap.training import DivergenceError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kap",
        description="Cross-modal distillation and learned-prior experiments "
                    "on synthetic paired-modality regression data.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate the dataset bundle")
    gen.add_argument("--config", required=True, help="experiment config JSON")
    gen.add_argument("--out", required=True, help="data directory to create")

    run = sub.add_parser("run", help="execute one experiment arm")
    run.add_argument("--config", required=True, help="experiment config JSON")
    run.add_argument("--arm", required=True, choices=ARMS)
    run.add_argument("--data", required=True, help="directory from gen-data")
    run.add_argument("--out", required=True, help="runs directory for artifacts")
    run.add_argument("--seed", type=int, default=None,
                     help="single seed to run (default: every configured seed)")

    rep = sub.add_parser("report", help="aggregate metrics from a runs directory")
    rep.add_argument("--runs", required=True, help="directory holding run artifacts")
    rep.add_argument("--out", required=True, help="summary CSV to write")
    rep.add_argument("--plot", default=None, metavar="PREFIX",
                     help="also write PREFIX_pck.png and PREFIX_hist.png")

    return parser


def _dispatch(args) -> int:
    if args.command == "gen-data":
        config = load_config(args.config)
        path = generate_data(config, args.out)
        print(f"wrote {path}")
        return 0
    if args.command == "run":
        config = load_config(args.config)
        seeds = None if args.seed is None else [args.seed]
        records = run_arm(config, args.arm, args.data, args.out, seeds)
        for record in records:
            print(f"{record.setting} seed={record.seed} "
                  f"epe={record.epe:.6f} auc={record.auc:.4f}")
        return 0
    if args.command == "report":
        rows = write_report(args.runs, args.out)
        if args.plot is not None:
            plot_pck(args.runs, f"{args.plot}_pck.png")
            try:
                plot_param_histograms(args.runs, f"{args.plot}_hist.png")
            except FileNotFoundError:
                print("histogram plot skipped: no baseline/meta checkpoints")
        width = max(len(r["setting"]) for r in rows)
        for row in rows:
            gain = row.get("epe_gain_vs_baseline")
            tail = "" if gain is None else f"  gain-vs-baseline={gain:+.6f}"
            print(f"{row['setting']:<{width}}  n={row['n_runs']}  "
                  f"epe={row['epe_median']:.6f}{tail}")
        print(f"wrote {args.out}")
        return 0
    raise AssertionError("unreachable")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ValueError, FileNotFoundError, DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
