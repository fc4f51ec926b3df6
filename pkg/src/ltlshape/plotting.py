"""Learning-curve figures as self-contained SVG."""

from __future__ import annotations

import io
import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

LABELS = {"shaping": "Shaping", "shielding": "Shielding", "baseline": "Baseline"}
COLORS = {"shaping": "tab:blue", "shielding": "tab:orange", "baseline": "tab:green"}
ORDER = ("shaping", "shielding", "baseline")


def _limits(aggregate):
    steps = [r[1] for r in aggregate]
    lo = min(r[2] - r[3] for r in aggregate)
    hi = max(r[2] + r[3] for r in aggregate)
    pad = 0.05 * (hi - lo) if hi > lo else max(abs(hi) * 0.05, 0.5)
    x0, x1 = min(steps), max(steps)
    if x0 == x1:
        x0, x1 = x0 - 0.5, x1 + 0.5
    return (float(x0), float(x1)), (float(lo - pad), float(hi + pad))


def emit_plot(table, out, title: str | None = None):
    """One mean line and one +-1 stddev band per method.

    Elements carry ids ``mean-<method>`` and ``band-<method>``; the axes
    limits are stored in the SVG description so the data can be recovered.
    """
    aggregate = table.aggregate()
    if not aggregate:
        raise ValueError("cannot plot an empty table")
    methods = sorted(table.methods, key=lambda m: ORDER.index(m) if m in ORDER else len(ORDER))
    xlim, ylim = _limits(aggregate)
    with plt.rc_context({"svg.hashsalt": "ltlshape", "path.simplify": False, "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for m in methods:
            rows = [r for r in aggregate if r[0] == m]
            x = np.array([r[1] for r in rows], dtype=float)
            mu = np.array([r[2] for r in rows])
            sd = np.array([r[3] for r in rows])
            color = COLORS.get(m)
            band = ax.fill_between(x, mu - sd, mu + sd, color=color, alpha=0.2, linewidth=0)
            band.set_gid(f"band-{m}")
            (line,) = ax.plot(x, mu, color=color, label=LABELS.get(m, m), linewidth=1.5)
            line.set_gid(f"mean-{m}")
        ax.set_xlim(*xlim)
        ax.set_ylim(*ylim)
        ax.patch.set_gid("plot-area")
        ax.set_xlabel("Number of Steps")
        ax.set_ylabel("Average Reward")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right")
        fig.tight_layout()
        buf = io.StringIO()
        meta = {"Date": None, "Description": json.dumps({"xlim": xlim, "ylim": ylim}), "Title": title or "curves"}
        fig.savefig(buf, format="svg", metadata=meta)
        plt.close(fig)
    from .experiment import atomic_write

    atomic_write(out, buf.getvalue())
    return out
