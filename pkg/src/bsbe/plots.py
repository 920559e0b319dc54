"""Figure rendering for the report paths.

Every figure is written to a file next to the delimited output it
illustrates; nothing is shown interactively.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_traceplots(chains, names, out_path, max_panels: int = 12) -> None:
    """Grid of per-chain trace panels for the named parameters."""
    names = list(names)[:max_panels]
    if not names:
        return
    ncol = min(3, len(names))
    nrow = math.ceil(len(names) / ncol)
    fig, axes = plt.subplots(nrow, ncol, figsize=(4 * ncol, 2.2 * nrow),
                             squeeze=False)
    for k, name in enumerate(names):
        ax = axes[k // ncol][k % ncol]
        per = chains.per_chain(name)
        for c in range(per.shape[0]):
            ax.plot(per[c], lw=0.4)
        ax.set_title(name, fontsize=8)
        ax.tick_params(labelsize=6)
    for k in range(len(names), nrow * ncol):
        axes[k // ncol][k % ncol].axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def render_study_report(rows, out_path) -> None:
    """Bar chart of median absolute errors by source, model and scope."""
    if not rows:
        return
    labels = [f"{r['source']}/{r['model']}\n{r['scope']}" for r in rows]
    maes = [r["MAE"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(rows)), 4))
    ax.bar(range(len(rows)), maes, color="#3b6ea5")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=6, rotation=45, ha="right")
    ax.set_ylabel("median absolute error")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def render_rr_intervals(rows, out_path, max_rows: int = 40) -> None:
    """Interval plot of relative-risk medians with 95% bounds per cell."""
    rows = rows[:max_rows]
    if not rows:
        return
    y = np.arange(len(rows))
    med = [r["rr_median"] for r in rows]
    lo = [r["rr_q2.5"] for r in rows]
    hi = [r["rr_q97.5"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, max(3, 0.22 * len(rows))))
    ax.hlines(y, lo, hi, color="#3b6ea5", lw=1.2)
    ax.plot(med, y, "o", color="#b33b3b", ms=3)
    ax.axvline(1.0, color="grey", lw=0.8, ls="--")
    ax.set_yticks(y)
    ax.set_yticklabels([f"{r['area_id']} {r['age_group']}" for r in rows], fontsize=6)
    ax.set_xlabel("relative risk")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def render_diagnostics(summary, out_path) -> None:
    """Histogram of split R-hat values across parameters."""
    vals = np.asarray(summary.rhat, dtype=float)
    vals = vals[np.isfinite(vals)]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if vals.size:
        ax.hist(vals, bins=30, color="#3b6ea5")
    ax.axvline(1.1, color="#b33b3b", lw=1.0, ls="--")
    ax.set_xlabel("split R-hat")
    ax.set_ylabel("parameters")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
