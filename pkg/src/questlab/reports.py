"""Static report artifacts: success-rate CSV, lr x wd heatmaps, norm trajectories.

SVGs are written by hand so each file is standalone (no fonts, scripts or
images pulled from elsewhere).
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from xml.sax.saxutils import escape

from questlab.sweep import CellStats, SweepSummary
from questlab.training import read_telemetry_csv

CSV_FIELDS = ("variant", "lr", "wd", "runs", "correct", "biased", "degenerate", "other", "crashed", "success_rate")


class ReportError(OSError):
    """Output location is unusable."""


def summary_csv(summary: SweepSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for variant, cells in summary.cells.items():
        for c in cells:
            w.writerow([variant, repr(c.lr), repr(c.wd), c.runs, c.correct, c.biased, c.degenerate, c.other, c.crashed, repr(c.success_rate)])
    return buf.getvalue()


def parse_summary_csv(text: str) -> SweepSummary:
    rows = list(csv.DictReader(io.StringIO(text)))
    summary = SweepSummary()
    for r in rows:
        cell = CellStats(
            lr=float(r["lr"]),
            wd=float(r["wd"]),
            **{k: int(r[k]) for k in ("runs", "correct", "biased", "degenerate", "other", "crashed")},
        )
        summary.cells.setdefault(r["variant"], []).append(cell)
    return summary


def _color(rate: float) -> str:
    # white -> dark blue
    t = min(max(rate, 0.0), 1.0)
    r = round(255 - t * (255 - 8))
    g = round(255 - t * (255 - 48))
    b = round(255 - t * (255 - 107))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(variant: str, cells: list[CellStats], cell_px: int = 56) -> str:
    """Success-rate grid: learning rates down the rows, weight decays across."""
    lrs = sorted({c.lr for c in cells})
    wds = sorted({c.wd for c in cells})
    left, top = 80, 50
    width = left + cell_px * len(wds) + 20
    height = top + cell_px * len(lrs) + 40
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{left}" y="20" font-family="sans-serif" font-size="14">{escape(variant)} success rate</text>',
    ]
    for j, wd in enumerate(wds):
        x = left + j * cell_px + cell_px / 2
        parts.append(f'<text x="{x}" y="{top - 6}" text-anchor="middle" font-family="sans-serif" font-size="10">wd={wd:g}</text>')
    for i, lr in enumerate(lrs):
        y = top + i * cell_px + cell_px / 2 + 4
        parts.append(f'<text x="{left - 6}" y="{y}" text-anchor="end" font-family="sans-serif" font-size="10">lr={lr:g}</text>')
    for c in cells:
        i, j = lrs.index(c.lr), wds.index(c.wd)
        x, y = left + j * cell_px, top + i * cell_px
        rate = c.success_rate
        ink = "#ffffff" if rate > 0.5 else "#000000"
        parts.append(
            f'<rect class="cell" x="{x}" y="{y}" width="{cell_px}" height="{cell_px}" '
            f'fill="{_color(rate)}" stroke="#888888"/>'
        )
        parts.append(
            f'<text x="{x + cell_px / 2}" y="{y + cell_px / 2 + 4}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12" fill="{ink}">{rate:.2f}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


_SERIES = (
    ("knorm_biased_ans", "biased answer", "#d62728"),
    ("knorm_unbiased_ans", "unbiased answer", "#1f77b4"),
    ("knorm_non_ans", "non-answer", "#7f7f7f"),
)


def trajectory_svg(title: str, records, width: int = 420, height: int = 260) -> str:
    """Mean key norm per token category against epoch."""
    epochs = [r.epoch for r in records]
    series = [(label, color, [getattr(r, attr) for r in records]) for attr, label, color in _SERIES]
    finite = [v for _, _, ys in series for v in ys if v == v]
    ymax = max(finite, default=1.0) * 1.05 or 1.0
    x0, x1, y0, y1 = 50, width - 130, height - 35, 30
    span = max(epochs[-1] - epochs[0], 1) if epochs else 1

    def px(e, v):
        return x0 + (e - epochs[0]) / span * (x1 - x0), y0 - v / ymax * (y0 - y1)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{x0}" y="18" font-family="sans-serif" font-size="12">{escape(title)}</text>',
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="#000000"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="#000000"/>',
        f'<text x="{(x0 + x1) / 2}" y="{height - 8}" text-anchor="middle" font-family="sans-serif" font-size="10">epoch</text>',
        f'<text x="{x0 - 6}" y="{y1 + 4}" text-anchor="end" font-family="sans-serif" font-size="10">{ymax:.3g}</text>',
        f'<text x="{x0 - 6}" y="{y0}" text-anchor="end" font-family="sans-serif" font-size="10">0</text>',
    ]
    for k, (label, color, ys) in enumerate(series):
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (px(e, v) for e, v in zip(epochs, ys) if v == v))
        if pts:
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = y1 + 14 * k
        parts.append(f'<line x1="{x1 + 10}" y1="{ly}" x2="{x1 + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{x1 + 32}" y="{ly + 4}" font-family="sans-serif" font-size="10">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_reports(summary: SweepSummary, telemetry_dir=None, out_dir="reports", selected=()) -> list[Path]:
    """Write the success table, one heatmap per variant, and trajectories for ``selected`` runs.

    ``selected`` names telemetry files (with or without ``.csv``) inside
    ``telemetry_dir``; an empty selection writes no trajectory plots.
    """
    if not summary.cells:
        raise ValueError("summary is empty")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "success_rates.csv"]
        written[0].write_text(summary_csv(summary))
        for variant, cells in summary.cells.items():
            p = out / f"heatmap_{variant}.svg"
            p.write_text(heatmap_svg(variant, cells))
            written.append(p)
        for name in selected:
            stem = name[:-4] if name.endswith(".csv") else name
            records = read_telemetry_csv(Path(telemetry_dir, stem + ".csv"))
            p = out / f"norms_{stem}.svg"
            p.write_text(trajectory_svg(stem, records))
            written.append(p)
    except OSError as exc:
        raise ReportError(f"cannot write reports to {out}: {exc}") from exc
    return written
