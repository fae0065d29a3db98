"""Benchmark report rendering: delimited tables plus latency figures.

Writes the per-sample and per-stage numbers as CSV and renders two PNG
figures next to them, so a bench run leaves both machine-readable and
eyeball-readable artifacts in one directory.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # file output only; no display in headless runs
import matplotlib.pyplot as plt

from .pipeline import BenchReport

_STAGE_COLORS = {
    "detect": "#4878cf",
    "classify": "#e8a33d",
    "mask": "#6aa84f",
    "total": "#555555",
}


def write_samples_csv(report: BenchReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "detect_ms", "classify_ms", "mask_ms", "total_ms"])
        for i in range(len(report.total_ms)):
            w.writerow(
                [
                    i,
                    f"{report.detect_ms[i]:.4f}",
                    f"{report.classify_ms[i]:.4f}",
                    f"{report.mask_ms[i]:.4f}",
                    f"{report.total_ms[i]:.4f}",
                ]
            )


def write_stats_csv(report: BenchReport, path: Path) -> None:
    stats = report.stats()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "mean_ms", "min_ms", "p95_ms"])
        for stage in report.STAGES:
            s = stats[stage]
            w.writerow(
                [stage, f"{s['mean']:.4f}", f"{s['min']:.4f}", f"{s['p95']:.4f}"]
            )


def _stage_latency_figure(report: BenchReport, path: Path) -> None:
    stats = report.stats()
    stages = list(report.STAGES)
    means = [stats[s]["mean"] for s in stages]
    p95s = [stats[s]["p95"] for s in stages]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    bars = ax.bar(
        stages, means, color=[_STAGE_COLORS[s] for s in stages], label="mean"
    )
    ax.scatter(stages, p95s, color="black", zorder=3, marker="_", s=400, label="p95")
    for bar, mean in zip(bars, means):
        ax.annotate(
            f"{mean:.1f}",
            (bar.get_x() + bar.get_width() / 2, mean),
            ha="center",
            va="bottom",
            fontsize=9,
        )
    ax.set_ylabel("latency (ms)")
    ax.set_title(f"Per-stage latency, {len(report.total_ms)} samples, {report.fps:.1f} fps")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _frame_times_figure(report: BenchReport, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7.2, 4.0))
    x = range(len(report.total_ms))
    ax.plot(x, report.total_ms, lw=0.9, color=_STAGE_COLORS["total"], label="total")
    ax.plot(x, report.detect_ms, lw=0.9, color=_STAGE_COLORS["detect"], label="detect")
    mean = float(report.total_ms.mean())
    ax.axhline(mean, color="crimson", lw=1.0, ls="--", label=f"mean {mean:.1f} ms")
    ax.set_xlabel("sample")
    ax.set_ylabel("latency (ms)")
    ax.set_title("Frame-by-frame latency")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_bench_report(report: BenchReport, out_dir) -> list[Path]:
    """Write bench.csv, stats.csv, and the two latency figures.

    Returns the written paths in a fixed order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [
        out_dir / "bench.csv",
        out_dir / "stats.csv",
        out_dir / "stage_latency.png",
        out_dir / "frame_times.png",
    ]
    write_samples_csv(report, paths[0])
    write_stats_csv(report, paths[1])
    _stage_latency_figure(report, paths[2])
    _frame_times_figure(report, paths[3])
    return paths
