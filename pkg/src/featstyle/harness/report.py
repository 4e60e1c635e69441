"""CSV tables, gnuplot ``.dat`` files and (optionally) matplotlib figures.

Floats are written with a fixed format so repeated runs give identical bytes.
Timing never enters the metric files; it goes to ``timing.csv``.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .runner import METRIC_COLUMNS, RunResult

log = logging.getLogger(__name__)

FLOAT_FMT = "{:.6f}"


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return FLOAT_FMT.format(value)
    return str(value)


def write_rows(path: Path, header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    text = buf.getvalue()
    Path(path).write_text(text)
    return text


def write_metrics(path: Path, results: list[RunResult]) -> str:
    rows = []
    for r in results:
        for rec in r.records:
            d = asdict(rec)
            rows.append([d[c] for c in METRIC_COLUMNS])
    return write_rows(path, list(METRIC_COLUMNS), rows)


def write_timing(path: Path, results: list[RunResult]) -> None:
    write_rows(path, ["seed", "target_domain", "wall_time_s"],
               [[r.seed, r.target_domain, round(r.wall_time, 3)] for r in results])


def protocol_rows(results: list[RunResult], names: list[str]) -> list[list]:
    """Per (seed, target) rows followed by one average row per seed."""
    rows = []
    for seed in sorted({r.seed for r in results}):
        mine = sorted((r for r in results if r.seed == seed), key=lambda r: r.target_domain)
        for r in mine:
            rows.append([seed, r.target_domain, names[r.target_domain], r.test_accuracy, r.val_accuracy, r.selected_epoch])
        rows.append([seed, "avg", "average", float(np.mean([r.test_accuracy for r in mine])),
                     float(np.mean([r.val_accuracy for r in mine])), ""])
    return rows


PROTOCOL_HEADER = ["seed", "target_domain", "domain", "test_accuracy", "val_accuracy", "selected_epoch"]


def seed_averages(results: list[RunResult]) -> np.ndarray:
    """LODO average accuracy of every seed, in seed order."""
    seeds = sorted({r.seed for r in results})
    return np.array([np.mean([r.test_accuracy for r in results if r.seed == s]) for s in seeds])


def summary_rows(results: list[RunResult], names: list[str]) -> list[list]:
    """Mean and std over seeds for every target and for the LODO average."""
    rows = []
    for t in sorted({r.target_domain for r in results}):
        acc = np.array([r.test_accuracy for r in results if r.target_domain == t])
        rows.append([t, names[t], float(acc.mean()), float(acc.std()), len(acc)])
    avg = seed_averages(results)
    rows.append(["avg", "average", float(avg.mean()), float(avg.std()), len(avg)])
    return rows


SUMMARY_HEADER = ["target_domain", "domain", "mean_accuracy", "std_accuracy", "seeds"]


def write_dat(path: Path, labels: list[str], means: list[float], stds: list[float]) -> None:
    lines = ["# index label mean std"]
    lines += [f"{i} {lab} {m:.6f} {s:.6f}" for i, (lab, m, s) in enumerate(zip(labels, means, stds))]
    Path(path).write_text("\n".join(lines) + "\n")


def plot_bars(path: Path, labels: list[str], means: list[float], stds: list[float], title: str, ylabel: str) -> bool:
    """Bar chart with error bars; returns False when matplotlib is unavailable."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.info("matplotlib not installed; skipping %s", path)
        return False
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(labels)), 3.2))
    ax.bar(range(len(labels)), np.asarray(means) * 100, yerr=np.asarray(stds) * 100, capsize=4, color="#4c72b0")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    lo = max(0.0, (min(means) - max(stds) - 0.05) * 100)
    ax.set_ylim(lo, min(100.0, (max(means) + max(stds) + 0.03) * 100))
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return True


def plot_curve(path: Path, xs: list[float], means: list[float], stds: list[float], title: str, xlabel: str) -> bool:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.info("matplotlib not installed; skipping %s", path)
        return False
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    m, s = np.asarray(means) * 100, np.asarray(stds) * 100
    ax.plot(xs, m, marker="o", color="#4c72b0")
    ax.fill_between(xs, m - s, m + s, alpha=0.2, color="#4c72b0")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("LODO average accuracy (%)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return True


def scale_verdict(scales: list[float], means: list[float]) -> dict:
    """Where the sweep peaks: an interior maximum, or a flagged monotone curve."""
    means = [float(m) for m in means]
    best = max(means)
    argmaxes = [s for s, m in zip(scales, means) if m == best]
    interior = [s for s in argmaxes if s not in (scales[0], scales[-1])]
    diffs = np.diff(means)
    if np.all(diffs >= 0):
        shape = "monotone_increasing"
    elif np.all(diffs <= 0):
        shape = "monotone_decreasing"
    else:
        shape = "non_monotone"
    return {
        "scales": list(scales),
        "mean_accuracy": [round(m, 6) for m in means],
        "best_scale": argmaxes,
        "interior_maximum": bool(interior),
        "shape": shape,
        "verdict": "inverted_u" if interior else f"flag_{shape}",
    }
