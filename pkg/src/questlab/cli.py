"""Command-line entry point: ``questlab <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from questlab.attention import KINDS
from questlab.toy_data import ToyConfig, dump_splits


def _cmd_gradcheck(args) -> int:
    from questlab.gradcheck import run_all

    results = run_all(seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def _cmd_train(args) -> int:
    from questlab.numerics import derive_seed
    from questlab.training import RunConfig, telemetry_csv, train_run

    if args.config:
        cfg = RunConfig.from_json(json.loads(Path(args.config).read_text()))
    else:
        cfg = RunConfig(
            variant=args.variant,
            lr=args.lr,
            weight_decay=args.wd,
            seed_weights=derive_seed(0, "weights", args.weight_seed),
            seed_data=derive_seed(0, "data", args.data_seed),
            epochs=args.epochs,
            batch_size=args.batch_size,
            wiring=args.wiring,
        )
    res = train_run(cfg)
    text = telemetry_csv(res.telemetry)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    o = res.outcome
    print(f"{cfg.variant}: {o.tag} train_acc={o.train_acc:.3f} test_acc={o.test_acc:.3f} crashed={res.crashed}", file=sys.stderr)
    return 0


def sweep_config_from_args(args):
    from questlab.sweep import REDUCED_LRS, REDUCED_WDS, SweepConfig

    cfg = SweepConfig.from_json(json.loads(Path(args.config).read_text())) if args.config else SweepConfig()
    if args.reduced:
        cfg = replace(cfg, lrs=REDUCED_LRS, wds=REDUCED_WDS, weight_seeds=3, data_seeds=3)
    return cfg


def _cmd_sweep(args) -> int:
    from questlab.sweep import run_sweep

    summary, _ = run_sweep(sweep_config_from_args(args), args.out, parallel=args.parallel)
    for v in summary.cells:
        print(f"{v}: success {summary.overall(v):.3f} over {sum(c.runs for c in summary.cells[v])} runs")
    return 0


def _cmd_report(args) -> int:
    from questlab.reports import emit_reports
    from questlab.sweep import load_sweep

    summary, records = load_sweep(args.sweep_dir)
    selected = list(args.runs)
    if args.biased_examples:
        selected += [r["name"] for r in records if r["variant"] == "standard" and r["outcome"] == "Biased"][: args.biased_examples]
    out = args.out or str(Path(args.sweep_dir) / "reports")
    for p in emit_reports(summary, Path(args.sweep_dir) / "telemetry", out, selected):
        print(p)
    return 0


def _cmd_gen_data(args) -> int:
    toy = ToyConfig.from_dict(json.loads(Path(args.config).read_text())) if args.config else ToyConfig()
    for seed in args.seeds:
        for p in dump_splits(args.out, toy, seed):
            print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="questlab", description="Attention-variant toy experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="run gradient and invariance checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("train", help="train a single run")
    p.add_argument("--config", help="RunConfig JSON file (overrides the flags below)")
    p.add_argument("--variant", choices=KINDS, default="quest")
    p.add_argument("--lr", type=float, default=0.0025)
    p.add_argument("--wd", type=float, default=0.01)
    p.add_argument("--weight-seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--wiring", choices=("printed", "prenorm"), default="printed")
    p.add_argument("--out", help="telemetry CSV path (default: stdout)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", help="run a hyperparameter grid")
    p.add_argument("--config", help="sweep JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--reduced", action="store_true", help="3 lr x 3 wd x 3 x 3 seeds")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="write CSV/SVG reports for a sweep directory")
    p.add_argument("sweep_dir")
    p.add_argument("--out")
    p.add_argument("--runs", nargs="*", default=[], help="run names to plot norm trajectories for")
    p.add_argument("--biased-examples", type=int, default=0, help="also plot the first K Biased standard runs")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("gen-data", help="dump toy datasets as JSON lines")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="toy-data JSON file")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.set_defaults(func=_cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
