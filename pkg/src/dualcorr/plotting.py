"""Report figures rendered next to the delimited outputs.

Every CLI report path that writes a CSV also drops a PNG beside it: the
initiator's training curve, the refinement loss log, the cumulative
geodesic-error curve, and the ablation bars. Figures carry no metadata
(``savefig(metadata={})``) so identical runs produce byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_DPI = 120


def _save(fig, path):
    fig.savefig(path, dpi=_DPI, metadata={})
    plt.close(fig)


def save_training_curve(history, path, title="initiator training loss"):
    """Loss-vs-epoch line plot for the initiator."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(range(len(history)), history, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("identity-map loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def save_refine_losses(rows, path):
    """Total loss over all inner steps, one colored span per iteration.

    ``rows`` are (iteration, step, total) triples in run order.
    """
    fig, ax = plt.subplots(figsize=(6.5, 3.6))
    iters = sorted({r[0] for r in rows})
    offset = 0
    for it in iters:
        totals = [r[2] for r in rows if r[0] == it]
        xs = range(offset, offset + len(totals))
        ax.plot(xs, totals, lw=1.0, label=f"iteration {it + 1}")
        offset += len(totals)
    ax.set_xlabel("inner step (all iterations)")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    if len(iters) <= 8:
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def save_error_curve(curve, path, mge=None):
    """Cumulative fraction of vertices under each error threshold."""
    fig, ax = plt.subplots(figsize=(5.2, 3.8))
    ts = [t for t, _ in curve]
    fr = [f for _, f in curve]
    ax.plot(ts, fr, lw=1.5)
    ax.set_xlabel("normalized geodesic error threshold")
    ax.set_ylabel("fraction of vertices")
    ax.set_ylim(0.0, 1.02)
    title = "cumulative geodesic error"
    if mge is not None:
        title += f"  (MGE {mge:.2f})"
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def save_ablation_bars(rows, path):
    """Median MGE per loss subset (log scale; spreads differ wildly)."""
    fig, ax = plt.subplots(figsize=(6.5, 3.8))
    labels = [r[0] for r in rows]
    medians = [r[3] for r in rows]
    ax.bar(range(len(rows)), medians, color="#4878a8")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("median MGE over seeds")
    positive = [m for m in medians if m > 0]
    if positive and max(positive) / min(positive) > 50:
        ax.set_yscale("log")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
