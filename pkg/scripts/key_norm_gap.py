"""Print final key-norm statistics of Biased standard runs in a finished sweep."""

import sys

import numpy as np

from questlab.sweep import load_sweep

_, records = load_sweep(sys.argv[1])
runs = [r for r in records if r["variant"] == "standard" and r["outcome"] == "Biased"]
if not runs:
    sys.exit("no Biased standard runs")
kb, ku, kn = (np.array([r[f"final_knorm_{s}"] for r in runs]) for s in ("biased_ans", "unbiased_ans", "non_ans"))
print(f"biased runs          {len(runs)}")
print(f"share kb >= 1.5 ku   {np.mean(kb >= 1.5 * ku):.3f}")
print(f"mean kb / ku / kn    {kb.mean():.3f} / {ku.mean():.3f} / {kn.mean():.3f}")
print(f"|ku - kn| / kn       {abs(ku.mean() - kn.mean()) / kn.mean():.3f}")
