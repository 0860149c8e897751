"""Write success-rate CSV, per-variant heatmaps and key-norm trajectory plots for a finished sweep.

Usage: python3 scripts/make_reports.py SWEEP_DIR [--examples K]
"""

import argparse
from pathlib import Path

from questlab.reports import emit_reports
from questlab.sweep import load_sweep


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("sweep_dir")
    ap.add_argument("--examples", type=int, default=4, help="Biased standard runs to plot")
    args = ap.parse_args()
    summary, records = load_sweep(args.sweep_dir)
    picks = [r["name"] for r in records if r["variant"] == "standard" and r["outcome"] == "Biased"][: args.examples]
    picks += [r["name"] for r in records if r["variant"] == "quest" and r["outcome"] == "Correct"][:1]
    for p in emit_reports(summary, Path(args.sweep_dir) / "telemetry", Path(args.sweep_dir) / "reports", picks):
        print(p)


if __name__ == "__main__":
    main()
