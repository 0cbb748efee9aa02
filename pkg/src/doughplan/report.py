"""Figure rendering for run and benchmark outputs.

Everything here draws to files through the Agg backend, so reports work on
headless machines. Figures are diagnostic companions to the text/JSON
artifacts: a transport-distance trail per plan trace, cloud overlays, and
a score bar chart for benchmark suites.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np

__all__ = [
    "save_trace_figure",
    "save_cloud_figure",
    "save_score_figure",
]


def save_trace_figure(trace, path) -> Path:
    """Plot the transport distance over one MPC run.

    Accepted horizons form the solid trail; rejected attempts (including
    the resets they trigger) are drawn as crosses at the step where they
    were tried.
    """
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 3.6))

    steps = [0]
    emds = [trace.emd_initial]
    for rec in trace.records:
        if rec.accepted:
            steps.append(rec.t + len(rec.actions))
            emds.append(rec.emd_after)
    ax.plot(steps, emds, "o-", color="tab:blue", label="accepted")

    rej_steps = [r.t for r in trace.records if not r.accepted]
    rej_emds = [r.emd_after for r in trace.records if not r.accepted]
    if rej_steps:
        finite = [(s, e) for s, e in zip(rej_steps, rej_emds) if np.isfinite(e)]
        if finite:
            ax.plot(*zip(*finite), "x", color="tab:red", label="rejected")

    ax.axhline(trace.threshold, color="gray", linestyle="--", linewidth=1,
               label="stop threshold")
    ax.set_xlabel("simulation step")
    ax.set_ylabel("transport distance")
    if min(emds) > 0:
        ax.set_yscale("log")
    ax.legend(loc="best", fontsize=8)
    ax.set_title(f"final {trace.emd_final:.2e}"
                 f"{' (reached)' if trace.reached_threshold else ''}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _scatter(ax, pts, **kw):
    ax.scatter(pts[:, 0], pts[:, 1], s=6, **kw)
    ax.set_aspect("equal")


def save_cloud_figure(points, target, path, title: str = "") -> Path:
    """Overlay a current cloud on its target (x-y view, plus x-z in 3-D)."""
    points = np.asarray(points, dtype=float)
    target = np.asarray(target, dtype=float)
    path = Path(path)

    views = [(0, 1, "x", "y")]
    if points.shape[1] == 3:
        views.append((0, 2, "x", "z"))
    fig, axes = plt.subplots(1, len(views), figsize=(4.5 * len(views), 4))
    axes = np.atleast_1d(axes)
    for ax, (i, j, xi, yj) in zip(axes, views):
        _scatter(ax, target[:, [i, j]], color="lightgray", label="target")
        _scatter(ax, points[:, [i, j]], color="tab:blue", label="current")
        ax.set_xlabel(xi)
        ax.set_ylabel(yj)
        ax.legend(loc="best", fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_score_figure(reports, path) -> Path:
    """Bar chart of mean scores with each task's threshold marked."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(1.6 * max(len(reports), 2) + 1, 3.6))
    xs = np.arange(len(reports))
    means = [r.mean_score for r in reports]
    ax.bar(xs, means, width=0.6, color="tab:blue", alpha=0.8)
    for x, rep in zip(xs, reports):
        ax.hlines(rep.threshold, x - 0.38, x + 0.38, color="black",
                  linewidth=1.4)
        ax.annotate(f"{100 * rep.success_rate:.0f}%", (x, max(rep.mean_score, 0)),
                    ha="center", va="bottom", fontsize=8)
    ax.set_xticks(xs)
    ax.set_xticklabels([r.task for r in reports], rotation=20, ha="right")
    ax.set_ylabel("mean score")
    ax.set_ylim(bottom=min(0.0, *means) - 0.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
