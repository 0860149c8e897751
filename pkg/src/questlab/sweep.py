"""Hyperparameter sweeps over variants x learning rates x weight decays x seeds.

Run identity, not scheduling, determines every random stream: the data
realization depends only on the data-seed index, the initialization only on
the weight-seed index, and the batch order on the whole run identity.  Runs
are grouped into fixed stacks (one per variant and learning rate), and the
``parallel`` width only decides how many stacks execute at once, so outputs
are byte-identical for any width.
"""

from __future__ import annotations

import json
import logging
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from questlab.attention import canonical_kind
from questlab.numerics import derive_seed
from questlab.toy_data import ToyConfig
from questlab.training import (
    BIASED,
    CORRECT,
    DEGENERATE,
    OTHER,
    RunConfig,
    RunResult,
    telemetry_csv,
    train_stack,
)

log = logging.getLogger(__name__)

PAPER_LRS = (0.0005, 0.001, 0.0025, 0.005, 0.0075, 0.01)
PAPER_WDS = (0.0, 0.01, 0.02, 0.05, 0.1)
REDUCED_LRS = (0.001, 0.0025, 0.005)
REDUCED_WDS = (0.0, 0.02, 0.05)
SWEEP_VARIANTS = ("standard", "quest", "qnorm", "qknorm_hs", "qknorm_ds", "qknorm_full")


@dataclass(frozen=True)
class SweepConfig:
    variants: tuple[str, ...] = SWEEP_VARIANTS
    lrs: tuple[float, ...] = PAPER_LRS
    wds: tuple[float, ...] = PAPER_WDS
    weight_seeds: int = 5
    data_seeds: int = 5
    toy: ToyConfig = ToyConfig()
    epochs: int = 50
    batch_size: int = 32
    base_seed: int = 0
    wiring: str = "printed"

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(canonical_kind(v) for v in self.variants))
        object.__setattr__(self, "lrs", tuple(float(x) for x in self.lrs))
        object.__setattr__(self, "wds", tuple(float(x) for x in self.wds))
        if not (self.variants and self.lrs and self.wds) or self.weight_seeds < 1 or self.data_seeds < 1:
            raise ValueError("sweep grid must be non-empty")

    @classmethod
    def reduced(cls, **kw) -> "SweepConfig":
        return cls(lrs=REDUCED_LRS, wds=REDUCED_WDS, weight_seeds=3, data_seeds=3, **kw)

    @classmethod
    def from_json(cls, d: dict) -> "SweepConfig":
        d = dict(d)
        if "toy" in d:
            d["toy"] = ToyConfig.from_dict(d["toy"])
        for key in ("variants", "lrs", "wds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_json(self) -> dict:
        d = asdict(self)
        d["toy"] = asdict(self.toy)
        for key in ("variants", "lrs", "wds"):
            d[key] = list(d[key])
        return d

    @property
    def runs_per_variant(self) -> int:
        return len(self.lrs) * len(self.wds) * self.weight_seeds * self.data_seeds


@dataclass(frozen=True)
class RunKey:
    variant: str
    lr: float
    wd: float
    w: int
    d: int

    @property
    def name(self) -> str:
        return f"{self.variant}_lr{self.lr:g}_wd{self.wd:g}_w{self.w}_d{self.d}"


def expand(cfg: SweepConfig) -> list[tuple[RunKey, RunConfig]]:
    runs = []
    for v in cfg.variants:
        for lr in cfg.lrs:
            for wd in cfg.wds:
                for w in range(cfg.weight_seeds):
                    for d in range(cfg.data_seeds):
                        key = RunKey(v, lr, wd, w, d)
                        rc = RunConfig(
                            variant=v,
                            lr=lr,
                            weight_decay=wd,
                            seed_weights=derive_seed(cfg.base_seed, "weights", w),
                            seed_data=derive_seed(cfg.base_seed, "data", d),
                            epochs=cfg.epochs,
                            batch_size=cfg.batch_size,
                            toy=cfg.toy,
                            wiring=cfg.wiring,
                        )
                        runs.append((key, rc))
    return runs


def groups(cfg: SweepConfig) -> list[list[tuple[RunKey, RunConfig]]]:
    """Fixed stacks of runs: one per (variant, learning rate)."""
    out: dict[tuple[str, float], list] = {}
    for key, rc in expand(cfg):
        out.setdefault((key.variant, key.lr), []).append((key, rc))
    return list(out.values())


@dataclass
class CellStats:
    lr: float
    wd: float
    runs: int = 0
    correct: int = 0
    biased: int = 0
    degenerate: int = 0
    other: int = 0
    crashed: int = 0

    @property
    def success_rate(self) -> float:
        return self.correct / self.runs if self.runs else 0.0

    def to_json(self) -> dict:
        return {
            "lr": self.lr,
            "wd": self.wd,
            "runs": self.runs,
            "correct": self.correct,
            "biased": self.biased,
            "degenerate": self.degenerate,
            "other": self.other,
            "crashed": self.crashed,
            "success_rate": self.success_rate,
        }


@dataclass
class SweepSummary:
    """Per-variant success statistics, cells ordered by (lr, wd)."""

    cells: dict[str, list[CellStats]] = field(default_factory=dict)

    def overall(self, variant: str) -> float:
        cells = self.cells[variant]
        runs = sum(c.runs for c in cells)
        return sum(c.correct for c in cells) / runs if runs else 0.0

    def to_json(self) -> dict:
        return {
            v: {"overall_success_rate": self.overall(v), "cells": [c.to_json() for c in cells]}
            for v, cells in self.cells.items()
        }

    @classmethod
    def from_json(cls, d: dict) -> "SweepSummary":
        cells = {}
        for v, entry in d.items():
            cells[v] = [
                CellStats(**{k: c[k] for k in ("lr", "wd", "runs", "correct", "biased", "degenerate", "other")}, crashed=c.get("crashed", 0))
                for c in entry["cells"]
            ]
        return cls(cells)


_TAG_FIELD = {CORRECT: "correct", BIASED: "biased", DEGENERATE: "degenerate", OTHER: "other"}


def summarize(records: list[dict]) -> SweepSummary:
    """Aggregate per-run records (as stored in ``runs.json``)."""
    summary = SweepSummary()
    for rec in records:
        cells = summary.cells.setdefault(rec["variant"], [])
        cell = next((c for c in cells if c.lr == rec["lr"] and c.wd == rec["wd"]), None)
        if cell is None:
            cell = CellStats(rec["lr"], rec["wd"])
            cells.append(cell)
        cell.runs += 1
        setattr(cell, _TAG_FIELD[rec["outcome"]], getattr(cell, _TAG_FIELD[rec["outcome"]]) + 1)
        cell.crashed += int(rec["crashed"])
    for cells in summary.cells.values():
        cells.sort(key=lambda c: (c.lr, c.wd))
    return summary


def _run_group(group: list[tuple[RunKey, RunConfig]], telemetry_dir: Optional[str]) -> list[dict]:
    t0 = time.perf_counter()
    results: list[RunResult] = train_stack([rc for _, rc in group])
    records = []
    for (key, _), res in zip(group, results):
        csv_name = f"{key.name}.csv"
        if telemetry_dir is not None:
            Path(telemetry_dir, csv_name).write_text(telemetry_csv(res.telemetry))
        last = res.telemetry[-1]
        records.append(
            {
                "name": key.name,
                "variant": key.variant,
                "lr": key.lr,
                "wd": key.wd,
                "w": key.w,
                "d": key.d,
                "outcome": res.outcome.tag,
                "crashed": res.crashed,
                "train_acc": res.outcome.train_acc,
                "test_acc": res.outcome.test_acc,
                "final_knorm_biased_ans": last.knorm_biased_ans,
                "final_knorm_unbiased_ans": last.knorm_unbiased_ans,
                "final_knorm_non_ans": last.knorm_non_ans,
                "steps": res.steps,
                "telemetry": f"telemetry/{csv_name}",
            }
        )
    key0 = group[0][0]
    log.info("finished %s lr=%g (%d runs) in %.1fs", key0.variant, key0.lr, len(group), time.perf_counter() - t0)
    return records


def run_sweep(cfg: SweepConfig, out_dir=None, parallel: int = 1) -> tuple[SweepSummary, list[dict]]:
    """Execute every run of the grid and aggregate success rates.

    With ``out_dir`` set, writes ``telemetry/<run>.csv`` per run, ``runs.json``
    (one record per run), ``summary.json`` and ``sweep_config.json``.
    """
    telemetry_dir = None
    if out_dir is not None:
        out = Path(out_dir)
        (out / "telemetry").mkdir(parents=True, exist_ok=True)
        telemetry_dir = str(out / "telemetry")
    todo = groups(cfg)
    if parallel <= 1:
        chunks = [_run_group(g, telemetry_dir) for g in todo]
    else:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            chunks = list(pool.map(_run_group, todo, [telemetry_dir] * len(todo)))
    records = [r for chunk in chunks for r in chunk]
    summary = summarize(records)
    if out_dir is not None:
        write_sweep_outputs(out_dir, cfg, summary, records)
    return summary, records


def write_sweep_outputs(out_dir, cfg: SweepConfig, summary: SweepSummary, records: list[dict]) -> None:
    out = Path(out_dir)
    (out / "sweep_config.json").write_text(json.dumps(cfg.to_json(), indent=1) + "\n")
    (out / "runs.json").write_text(json.dumps(records, indent=1) + "\n")
    (out / "summary.json").write_text(json.dumps(summary.to_json(), indent=1) + "\n")


def load_sweep(out_dir) -> tuple[SweepSummary, list[dict]]:
    out = Path(out_dir)
    records = json.loads((out / "runs.json").read_text())
    return summarize(records), records


def outcome_counts(records: list[dict], variant: str) -> Counter:
    return Counter(r["outcome"] for r in records if r["variant"] == variant)
