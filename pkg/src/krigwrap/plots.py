"""Figures rendered from the CSV artifacts of a run directory (never from in-memory state)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import group_mae, read_offsets, read_results  # noqa: E402
from .training import read_history  # noqa: E402


def plot_loss_curves(history_csv, out_png):
    hist = read_history(history_csv)
    ep = [h["epoch"] for h in hist]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ep, [h["train_l1"] for h in hist], label="train L1")
    ax.plot(ep, [h["train_l2"] for h in hist], label="train L2 (auxiliary)")
    ax.plot(ep, [h["val_l1"] for h in hist], label="validation L1")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (normalized units)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_comparison(results_csv, out_png):
    rows = read_results(results_csv)
    stats = group_mae(rows, ("pattern", "variant"))
    patterns = sorted({k[0] for k in stats})
    variants = sorted({k[1] for k in stats}, key=lambda v: (v != "vanilla", v))
    width = 0.8 / len(variants)
    fig, ax = plt.subplots(figsize=(max(5, 1.6 * len(patterns) * len(variants) / 2), 4))
    x = np.arange(len(patterns))
    for i, v in enumerate(variants):
        means = [stats[(p, v)].mean if (p, v) in stats else np.nan for p in patterns]
        errs = [stats[(p, v)].std if (p, v) in stats else 0.0 for p in patterns]
        ax.bar(x + i * width, means, width, yerr=errs, capsize=3, label=v)
    ax.set_xticks(x + width * (len(variants) - 1) / 2)
    ax.set_xticklabels(patterns)
    ax.set_ylabel("MAE")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_robustness(results_csv, out_png, key: str = "rate"):
    rows = read_results(results_csv)
    stats = group_mae(rows, (key, "variant"))
    variants = sorted({k[1] for k in stats})
    fig, ax = plt.subplots(figsize=(6, 4))
    for v in variants:
        pts = sorted((k[0], s) for k, s in stats.items() if k[1] == v)
        xs = [p for p, _ in pts]
        ax.errorbar(xs, [s.mean for _, s in pts], yerr=[s.std for _, s in pts], marker="o", capsize=3, label=v)
    ax.set_xlabel("missing rate" if key == "rate" else "unobserved ratio")
    ax.set_ylabel("MAE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_offsets(offsets_csv, out_png):
    bins, counts = read_offsets(offsets_csv)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(bins, counts, width=1.0)
    ax.set_xlabel("time-of-day offset of retrieved window (steps)")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def render_run(run_dir, out_dir=None) -> list:
    """Render every figure whose source CSV exists in ``run_dir``; returns the written paths."""
    run = Path(run_dir)
    out = Path(out_dir) if out_dir else run / "plots"
    out.mkdir(parents=True, exist_ok=True)
    made = []
    for hist in sorted(run.rglob("history.csv")):
        rel = hist.parent.relative_to(run)
        name = "loss_curves.png" if rel == Path(".") else f"loss_curves_{'_'.join(rel.parts)}.png"
        plot_loss_curves(hist, out / name)
        made.append(out / name)
    res = run / "results.csv"
    if res.is_file():
        rows = read_results(res)
        if len({r.rate for r in rows}) > 1:
            plot_robustness(res, out / "robustness.png")
            made.append(out / "robustness.png")
        plot_comparison(res, out / "comparison.png")
        made.append(out / "comparison.png")
    ratio = run / "results_unobserved.csv"
    if ratio.is_file():
        plot_robustness(ratio, out / "robustness_unobserved.png", key="unobserved_ratio")
        made.append(out / "robustness_unobserved.png")
    for off in sorted(run.rglob("offsets.csv")):
        rel = off.parent.relative_to(run)
        name = "offsets.png" if rel == Path(".") else f"offsets_{'_'.join(rel.parts)}.png"
        plot_offsets(off, out / name)
        made.append(out / name)
    return made
