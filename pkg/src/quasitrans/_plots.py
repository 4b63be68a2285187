"""Static SVG line plots."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def line_plot(path, series, xlabel, ylabel, title="", logx=False, logy=False):
    """``series`` is a list of (x, y, label, style) tuples."""
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    for x, y, label, style in series:
        ax.plot(x, y, style, label=label)
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if any(s[2] for s in series):
        ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
