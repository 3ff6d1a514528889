"""Delimited tables and figure files for training, evaluation and ablation runs.

Figures are rendered off-screen (Agg) straight to PNG next to the CSV/JSON
they illustrate; nothing here opens a window.
"""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import fit_logistic  # noqa: E402

FUSION_ORDER = ("none", "bottleneck", "cosine", "mafe")
FUSION_LABELS = {"none": "baseline (no reference)", "bottleneck": "bottleneck", "cosine": "cosine", "mafe": "MAFE"}

plt.rcParams.update({
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
})


def ablation_rows(per_seed):
    """``per_seed`` maps fusion kind -> list of held-out SROCC values, one per split."""
    rows = []
    for kind in [k for k in FUSION_ORDER if k in per_seed]:
        vals = np.asarray(per_seed[kind], dtype=float)
        rows.append({"fusion": kind, "median_srocc": float(np.median(vals)),
                     "min_srocc": float(vals.min()), "max_srocc": float(vals.max()), "n": int(vals.size)})
    return rows


def ablation_csv(per_seed):
    n = max(len(v) for v in per_seed.values())
    buf = io.StringIO()
    buf.write("fusion,median_srocc," + ",".join(f"split_{i}" for i in range(n)) + "\n")
    for row in ablation_rows(per_seed):
        vals = [f"{v:.6f}" for v in per_seed[row["fusion"]]]
        buf.write(f"{row['fusion']},{row['median_srocc']:.6f}," + ",".join(vals) + "\n")
    return buf.getvalue()


def ablation_markdown(per_seed):
    """Markdown ablation table, one row per fusion module."""
    lines = ["| Fusion | median SROCC | range |", "|---|---|---|"]
    for row in ablation_rows(per_seed):
        lines.append(f"| {FUSION_LABELS[row['fusion']]} | {row['median_srocc']:.3f} | "
                     f"{row['min_srocc']:.3f} to {row['max_srocc']:.3f} |")
    return "\n".join(lines) + "\n"


def ablation_figure(per_seed, path):
    rows = ablation_rows(per_seed)
    fig, ax = plt.subplots()
    for i, row in enumerate(rows):
        vals = per_seed[row["fusion"]]
        ax.scatter(np.full(len(vals), i), vals, s=14, color="0.6", zorder=2)
        ax.hlines(row["median_srocc"], i - 0.25, i + 0.25, color="C0", lw=2, zorder=3)
    ax.set_xticks(range(len(rows)), [FUSION_LABELS[r["fusion"]] for r in rows])
    ax.set_ylabel("held-out SROCC")
    ax.set_title("Fusion ablation (bars: median over splits)")
    _save(fig, path)


def history_figure(history, path, metric_label="held-out metric"):
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots()
    ax.plot(epochs, [h["loss"] for h in history], color="C0", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss", color="C0")
    ax2 = ax.twinx()
    ax2.plot(epochs, [h["metric"] for h in history], color="C1", label=metric_label)
    ax2.set_ylabel(metric_label, color="C1")
    ax2.spines["right"].set_visible(True)
    _save(fig, path)


def scatter_figure(table, path):
    """Predicted score against pseudo-MOS with the fitted logistic curve."""
    rows = [r for r in table.rows() if r[3] > 0]
    y = np.array([r[4] for r in rows])
    q = np.array([r[5] for r in rows])
    kinds = sorted({r[2] for r in rows})
    fig, ax = plt.subplots()
    for i, kind in enumerate(kinds):
        sel = np.array([r[2] == kind for r in rows])
        ax.scatter(q[sel], y[sel], s=10, color=f"C{i}", label=kind)
    if len(q) >= 5 and np.std(q) > 0:
        params = fit_logistic(q, y)
        grid = np.linspace(q.min(), q.max(), 200)
        ax.plot(grid, params(grid), color="k", lw=1)
    ax.set_xlabel("predicted score")
    ax.set_ylabel("pseudo-MOS")
    ax.legend(fontsize=7, frameon=False)
    _save(fig, path)


def _save(fig, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
