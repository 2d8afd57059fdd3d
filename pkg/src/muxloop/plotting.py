"""Render the probability/rate sweeps to image files.

matplotlib is imported lazily so the rest of the package never needs it.
"""

from __future__ import annotations

import math
from pathlib import Path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _finite(xs, ys):
    pts = [(x, y) for x, y in zip(xs, ys) if y is not None and not math.isnan(y)]
    return [p[0] for p in pts], [p[1] for p in pts]


def render_sweep(rows, path, title, ylabel, width=5.0, config_json=""):
    """Plot model curve and simulated points of a fig2a/fig2b table.

    ``rows`` are dicts with ``m``, ``probability``, ``rate_hz``,
    ``model_probability`` and ``model_rate_hz``; the rate axis is on the right.
    """
    plt = _pyplot()
    golden_ratio = (math.sqrt(5) - 1.0) / 2.0
    fig, ax = plt.subplots(figsize=(width, width * golden_ratio), dpi=120)
    m = [r["m"] for r in rows]
    ax.plot(m, [r["model_probability"] for r in rows], "-", color="C0", label="model")
    xs, ys = _finite(m, [r["probability"] for r in rows])
    if xs:
        ax.plot(xs, ys, "o", color="C1", ms=4, label="simulation")
    ax.set_xlabel("number of time bins $m$")
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=10)
    ax.set_xlim(0.5, max(m) + 0.5)
    ax.set_ylim(bottom=0)
    ax.legend(frameon=False, fontsize=8)

    # rate axis is probability times the output clock
    rates = [r["model_rate_hz"] for r in rows]
    probs = [r["model_probability"] for r in rows]
    scale = rates[-1] / probs[-1] if probs[-1] else 0.0
    if scale:
        ax2 = ax.secondary_yaxis("right", functions=(lambda p: p * scale, lambda r: r / scale))
        ax2.set_ylabel("rate (Hz)")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, metadata={"Software": None, "Description": config_json or None})
    plt.close(fig)
    return path


def render_figure_pair(fig2a_rows, fig2b_rows, out_dir, config_json=""):
    out_dir = Path(out_dir)
    return [
        render_sweep(fig2a_rows, out_dir / "fig2a.png", "heralded output photon", "probability per cycle", config_json=config_json),
        render_sweep(fig2b_rows, out_dir / "fig2b.png", "herald detection", "probability per cycle", config_json=config_json),
    ]
