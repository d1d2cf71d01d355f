"""Report figures: proximity-prior histogram and unseen-ratio sweep lines."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}
METHOD_STYLE = {"joint": dict(color="C0", marker="o"), "baseline": dict(color="C3", marker="s")}
# PNG metadata left empty so repeated renders are byte-identical
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata=_META, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_prior_histogram(prior, path, max_km: float | None = None) -> Path:
    """Raw bucket counts against distance (overflow bucket drawn at its lower edge)."""
    counts = np.asarray(prior.counts)
    w = prior.bucketing.bucket_width
    lefts = np.arange(len(counts)) * w
    if max_km is not None:
        keep = lefts < max_km
        lefts, counts = lefts[keep], counts[keep]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.bar(lefts, counts, width=w, align="edge", color="0.35", edgecolor="white", linewidth=0.3)
        ax.set_xlabel("distance between consecutive visits (km)")
        ax.set_ylabel("number of visit pairs")
        ax.set_xlim(0, lefts[-1] + w if len(lefts) else 1)
        return _save(fig, path)


def plot_sweep(sweep, path, k_values=None) -> Path:
    """Acc@k against realized unseen ratio, one panel per k, with fitted lines."""
    k_values = list(k_values or sweep.k_values)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(k_values), figsize=(2.4 * len(k_values), 2.6), sharey=True,
                                 squeeze=False)
        for ax, k in zip(axes[0], k_values):
            for m in sweep.methods:
                x, y = sweep.series(m, k)
                style = METHOD_STYLE.get(m, {})
                ax.plot(np.asarray(x) * 100, y, linestyle="-", label=m, **style)
                slope = sweep.slopes.get(m, {}).get(k)
                if slope is not None and len(x) >= 2:
                    xs = np.array([min(x), max(x)])
                    b = np.mean(y) - slope * np.mean(x)
                    ax.plot(xs * 100, b + slope * xs, linestyle=":", color=style.get("color"), linewidth=0.8)
            ax.set_title(f"Acc@{k}")
            ax.set_xlabel("unseen POIs (%)")
        axes[0][0].set_ylabel("accuracy")
        axes[0][0].legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
