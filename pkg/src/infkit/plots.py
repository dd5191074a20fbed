"""Figures rendered straight to files (no display needed)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# Stable element ids so reruns give the same SVG text.
plt.rcParams["svg.hashsalt"] = "infkit"


def plot_sweep(result, path, orig=None, title: str = "Detection AUC vs compression size") -> None:
    """Mean AUC per method against r, with the min..max band over seeds shaded."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in result.aucs:
        st = result.stats(method)
        rs = [s["r"] for s in st]
        line, = ax.plot(rs, [s["mean"] for s in st], marker="o", label=method)
        ax.fill_between(rs, [s["min"] for s in st], [s["max"] for s in st], color=line.get_color(), alpha=0.2)
    if orig is not None:
        mean = sum(orig) / len(orig)
        ax.axhline(mean, color="black", linestyle="--", linewidth=1, label="orig (uncompressed)")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("r")
    ax.set_ylabel("AUC")
    ax.set_ylim(0.0, 1.02)
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
