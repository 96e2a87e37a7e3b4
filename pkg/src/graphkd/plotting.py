"""Figures for benchmark and similarity reports, written next to the CSV output."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "graphkd",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_benchmark(res, path) -> Path:
    """Bar chart of mean test metric per method with one-std error bars."""
    from .bench import ablation_table, method_table

    with plt.rc_context(STYLE):
        if res.ablation is None:
            rows = [r for r in method_table(res) if r["n"]]
            labels = [r["method"] for r in rows]
            means = [100 * r["mean"] for r in rows]
            stds = [100 * r["std"] for r in rows]
        else:
            labels, means, stds = [], [], []
            for v in res.variants:
                m, s, n = res.summary(v.label)
                if n:
                    labels.append(v.label)
                    means.append(100 * m)
                    stds.append(100 * s)
        fig, ax = plt.subplots(figsize=(max(4.0, 0.55 * len(labels) + 1.5), 3.2))
        colors = ["0.35" if lab == "teacher" else "C0" for lab in labels]
        ax.bar(range(len(labels)), means, yerr=stds, color=colors, capsize=2)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45, ha="right")
        ax.set_ylabel(f"test {res.metric} (%)")
        finite = [m - s for m, s in zip(means, stds) if not math.isnan(m)]
        if finite:
            ax.set_ylim(max(0.0, min(finite) - 2.0), min(100.0, max(m + s for m, s in zip(means, stds)) + 1.0))
        title = {"gcrd": "contrastive ablation", "gsp": "GSP kernel x metric"}.get(res.ablation, "teacher / student benchmark")
        ax.set_title(title)
        return _save(fig, path)


def plot_similarity(rows, path) -> Path:
    """Grouped bars of CKA and the two Mantel correlations per student."""
    metrics = ("cka", "mantel_global", "mantel_local")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(rows) + 1.5), 3.0))
        width = 0.8 / len(metrics)
        for k, m in enumerate(metrics):
            xs = [i + (k - 1) * width for i in range(len(rows))]
            ax.bar(xs, [r[m] for r in rows], width=width, label=m)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels([r["student"] for r in rows], rotation=30, ha="right")
        ax.set_ylim(-1.0 if any(r[m] < 0 for r in rows for m in metrics) else 0.0, 1.05)
        ax.axhline(0.0, color="0.5", lw=0.5)
        ax.legend(frameon=False, fontsize=7)
        ax.set_title("similarity to teacher")
        return _save(fig, path)
