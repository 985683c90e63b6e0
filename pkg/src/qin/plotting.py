"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5) - 1) / 2
STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    # keep files reproducible across runs
    "svg.hashsalt": "qin",
}


def _figure(width=5.0):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, width * GOLDEN))
    return fig, ax


def _save(fig, path):
    path = Path(path)
    with plt.rc_context(STYLE):
        fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_history(history, path):
    fig, ax = _figure()
    epochs = [r["epoch"] for r in history]
    ax.plot(epochs, [r["val_ndcg4"] for r in history], marker="o", ms=3, label="val NDCG@4")
    ax.plot(epochs, [r["val_hr4"] for r in history], marker="s", ms=3, label="val HR@4")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation metric")
    loss_ax = ax.twinx()
    loss_ax.plot(epochs, [r["train_loss"] for r in history], color="0.5", ls="--", label="train loss")
    loss_ax.set_ylabel("mean BCE per candidate")
    lines = ax.get_lines() + loss_ax.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], frameon=False, loc="center right")
    return _save(fig, path)


def plot_ablation(rows, path, metric="ndcg@4"):
    """Bars of the across-seed mean, seeds as dots."""
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    fig, ax = _figure(max(5.0, 0.7 * len(variants)))
    for x, v in enumerate(variants):
        vals = [float(r[metric]) for r in rows if r["variant"] == v]
        ax.bar(x, sum(vals) / len(vals), color="C0", alpha=0.6, width=0.6)
        ax.plot([x] * len(vals), vals, "k.", ms=4)
    ax.set_xticks(range(len(variants)), variants, rotation=30, ha="right")
    ax.set_ylabel(metric.upper())
    return _save(fig, path)


def plot_alpha_sweep(rows, path):
    fig, ax = _figure()
    alphas = [float(r["alpha"]) for r in rows]
    for metric, marker in (("ndcg@4", "o"), ("mrr@4", "s"), ("hr@4", "^")):
        mean = [float(r[metric]) for r in rows]
        std = [float(r.get(f"{metric}_std", 0.0)) for r in rows]
        ax.errorbar(alphas, mean, yerr=std, marker=marker, ms=4, capsize=2, label=metric.upper())
    ax.set_xlabel(r"$\alpha$ (weight on ID scores)")
    ax.set_ylabel("test metric")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_bench(results, path):
    fig, ax = _figure(4.0)
    names = [r.variant for r in results]
    means = [r.mean_ns / 1e6 for r in results]
    stds = [r.std_ns / 1e6 for r in results]
    ax.bar(range(len(names)), means, yerr=stds, capsize=3, color=["C0", "C1"][: len(names)])
    ax.set_xticks(range(len(names)), names)
    ax.set_ylabel("wall time per pass (ms)")
    if results:
        r = results[0]
        ax.set_title(f"N={r.N} M={r.M} K1={r.K1}; analytic ratio {r.analytic_ratio:.1f}")
    return _save(fig, path)
