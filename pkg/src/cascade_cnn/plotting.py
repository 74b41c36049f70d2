"""Matplotlib renderings of FROC curves and score histograms.

Figures are written as SVG with a fixed hash salt and no date stamp so that
reruns produce identical bytes.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FP_RANGE = (0.125, 8.0)
FP_TICKS = (0.125, 0.25, 0.5, 1, 2, 4, 8)

STYLE = {
    "svg.hashsalt": "cascade-cnn",
    "svg.fonttype": "none",
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)


def _step_xy(curve):
    x = np.array([p[0] for p in curve.points])
    y = np.array([p[1] for p in curve.points])
    # extend as a step function to the right edge of the axis
    if len(x) and x[-1] < FP_RANGE[1]:
        x = np.append(x, FP_RANGE[1])
        y = np.append(y, y[-1])
    return x, y


def plot_froc(curves, path, title="FROC"):
    """``curves``: list of {"label", "curve"} entries, e.g. ``compare_runs(...)["curves"]``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 4.2))
        for c in curves:
            x, y = _step_xy(c["curve"])
            # log axis cannot show fp=0; clip to the left edge
            ax.step(np.maximum(x, FP_RANGE[0]), y, where="post", label=c["label"], linewidth=1.4)
        ax.set_xscale("log", base=2)
        ax.set_xlim(*FP_RANGE)
        ax.set_xticks(FP_TICKS)
        ax.set_xticklabels([f"{t:g}" for t in FP_TICKS])
        ax.set_ylim(0, 1)
        ax.set_xlabel("Average number of false positives per scan")
        ax.set_ylabel("Sensitivity")
        ax.set_title(title)
        ax.legend(loc="lower right")
        _save(fig, path)


def plot_histograms(histograms, path, title=""):
    """Side-by-side nodule / non-nodule score histograms for one scoring pass."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
        for ax, cls, name in zip(axes, ("nodule", "non_nodule"), ("(a) nodules", "(b) non-nodules")):
            h = histograms[cls]
            edges = np.asarray(h["bin_edges"])
            ax.bar(edges[:-1], h["counts"], width=np.diff(edges), align="edge", edgecolor="black", linewidth=0.4)
            ax.set_xlim(0, 1)
            ax.set_xlabel("Nodule probability")
            ax.set_ylabel("Count")
            ax.set_title(f"{title} {name}".strip())
        fig.tight_layout()
        _save(fig, path)
