"""Run the reduced 3x3 lr/wd grid (3 weight seeds x 3 data seeds) for every sweep variant.

Usage: python3 scripts/run_reduced_sweep.py OUT_DIR [--parallel K] [--wiring printed|prenorm]
"""

import argparse
import logging
import time
from dataclasses import replace

from questlab.sweep import SweepConfig, run_sweep


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--parallel", type=int, default=1)
    ap.add_argument("--wiring", choices=("printed", "prenorm"), default="printed")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = replace(SweepConfig.reduced(), wiring=args.wiring)
    t0 = time.perf_counter()
    summary, _ = run_sweep(cfg, args.out, parallel=args.parallel)
    for v in summary.cells:
        print(f"{v:12s} success {summary.overall(v):.3f}")
    print(f"elapsed {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
