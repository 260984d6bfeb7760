"""Static SVG figures from report files."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .protocol import METRIC_KEYS, IntervalReport, summary_table  # noqa: E402

plt.rcParams["svg.hashsalt"] = "driftselect"
plt.rcParams["svg.fonttype"] = "path"


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def _seed_mean(reports, arm, t, metric):
    vals = [r.metrics[metric] for r in reports if r.arm == arm and r.t == t]
    return float(np.mean(vals)) if vals else None


def relative_curves(reports: list[IntervalReport], out_dir: Path) -> list[Path]:
    """One figure per metric; relative to ``none`` when that arm is present."""
    arms = sorted({r.arm for r in reports})
    ts = sorted({r.t for r in reports})
    has_base = "none" in arms
    paths = []
    for metric in METRIC_KEYS:
        fig, ax = plt.subplots(figsize=(6, 4))
        for arm in arms:
            ys = []
            for t in ts:
                v = _seed_mean(reports, arm, t, metric)
                if has_base and v is not None:
                    b = _seed_mean(reports, "none", t, metric)
                    v = 100.0 * (v / b - 1.0) if b else None
                ys.append(np.nan if v is None else v)
            ax.plot(ts, ys, marker="o", label=arm)
        ax.set_xlabel("interval")
        ax.set_ylabel(f"{metric} vs no retraining (%)" if has_base else metric)
        ax.set_xticks(ts)
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        paths.append(_save(fig, out_dir / f"relative_{metric.replace('@', '_at_')}.svg"))
    return paths


def flops_scatter(reports: list[IntervalReport], out_dir: Path, metric: str = "ndcg@50") -> Path:
    per_arm = defaultdict(lambda: [0.0, []])
    seeds = {r.seed for r in reports}
    for r in reports:
        if r.t == 0:
            continue
        per_arm[r.arm][0] += r.flops.get("total", 0.0) / len(seeds)
        per_arm[r.arm][1].append(r.metrics[metric])
    fig, ax = plt.subplots(figsize=(6, 4))
    for arm in sorted(per_arm):
        total, vals = per_arm[arm]
        ax.scatter([max(total, 1.0)], [np.mean(vals)], label=arm)
    ax.set_xscale("log")
    ax.set_xlabel("select + train FLOPs (multiply-adds)")
    ax.set_ylabel(f"mean {metric}")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, out_dir / "flops_vs_performance.svg")


def error_table(reports: list[IntervalReport], out_dir: Path, metric: str = "ndcg@50") -> Path | None:
    arms = {r.arm for r in reports}
    if "none" not in arms or "full" not in arms:
        return None
    table = summary_table(reports, metric)
    rows = [[a, f"{v['error_reduction'] * 100:.1f}%" if v["error_reduction"] is not None else "n/a"]
            for a, v in table.items()]
    fig, ax = plt.subplots(figsize=(5, 0.4 * len(rows) + 0.8))
    ax.axis("off")
    ax.table(cellText=rows, colLabels=["arm", f"{metric} error reduction"], loc="center")
    return _save(fig, out_dir / "error_reduction.svg")


def plot_all(reports: list[IntervalReport], out_dir: str | Path) -> tuple[list[Path], list[str]]:
    """Write every figure; returns the paths and any notices."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not reports:
        raise ValueError("no reports to plot")
    paths = relative_curves(reports, out_dir)
    paths.append(flops_scatter(reports, out_dir))
    notices = []
    tab = error_table(reports, out_dir)
    if tab is None:
        notices.append("error-reduction table omitted: needs both 'none' and 'full' arms")
    else:
        paths.append(tab)
    return paths, notices
