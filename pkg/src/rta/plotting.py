"""Per-n_seed metric figures rendered to image files next to the CSV reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PANELS = (
    ("precision", "Precision (%)"),
    ("recall", "Recall (%)"),
    ("r_precision", "R-Precision (%)"),
    ("ndcg", "NDCG (%)"),
    ("clicks", "Clicks"),
    ("popularity", "Popularity (%)"),
    ("coverage", "Coverage (%)"),
)

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def plot_series(reports, path, dpi: int = 120) -> Path:
    """One panel per metric, one line per model, shaded 95% intervals."""
    path = Path(path)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2, 4, figsize=(12, 5.5), sharex=True)
        axes = axes.ravel()
        for ax, (metric, label) in zip(axes, PANELS):
            for rep in reports:
                pts = sorted((n, s) for n, s in rep.buckets.items() if s is not None)
                if not pts:
                    continue
                xs = [n for n, _ in pts]
                ys = [s[metric] for _, s in pts]
                ci = [s.get(f"{metric}_ci", 0.0) for _, s in pts]
                line, = ax.plot(xs, ys, marker="o", ms=3, lw=1.2, label=rep.model)
                ax.fill_between(xs, [y - c for y, c in zip(ys, ci)], [y + c for y, c in zip(ys, ci)],
                                color=line.get_color(), alpha=0.15, lw=0)
            ax.set_title(label)
            ax.grid(alpha=0.3)
        for ax in axes[-4:]:
            ax.set_xlabel("n_seed")
        handles, labels = axes[0].get_legend_handles_labels()
        axes[-1].axis("off")
        if handles:
            axes[-1].legend(handles, labels, loc="center", frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=dpi)
        plt.close(fig)
    return path


def plot_latency(samples_ms: dict[str, list[float]], path, budget_ms: dict[str, float] | None = None) -> Path:
    """Latency histograms per benchmark mode with the p99 and budget marked."""
    import numpy as np

    path = Path(path)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for mode, xs in samples_ms.items():
            xs = np.asarray(xs)
            line = ax.hist(xs, bins=50, alpha=0.5, label=f"{mode} (p99 {np.percentile(xs, 99):.1f} ms)")[2][0]
            ax.axvline(np.percentile(xs, 99), color=line.get_facecolor(), ls="--", lw=1)
            if budget_ms and mode in budget_ms:
                ax.axvline(budget_ms[mode], color="k", ls=":", lw=1)
        ax.set_xlabel("latency per request (ms)")
        ax.set_ylabel("requests")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path
