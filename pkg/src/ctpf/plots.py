"""Figure rendering for report and diagnostics outputs.

Each writer takes already-computed results and saves one PNG next to the
delimited output it illustrates. Rendering is headless (Agg) and optional
at the CLI (--no-figures).
"""

from __future__ import annotations

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .filtering import FilterResult
from .tasks import EvalReport

_STYLE = {
    "figure.figsize": (7.0, 4.2),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def save_weight_trajectories(pf: FilterResult, sis: FilterResult,
                             path: str | os.PathLike, title: str = "") -> None:
    """Per-particle log-weight trails over time, with and without resampling.

    Needs results produced with track_history=True. Resampling events show
    as dashed verticals on the filter panel.
    """
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(11, 4.0), sharey=True)
        for ax, result, label in ((axes[0], sis, "no resampling"),
                                  (axes[1], pf, "with resampling")):
            times = [s.t for s in result.steps]
            hist = result.weight_history
            for j in range(result.n_particles):
                ax.plot(times, hist[:, j], lw=0.5, alpha=0.35, color="tab:orange")
            med = np.median(hist, axis=1)
            ax.plot(times, med, lw=1.8, color="tab:blue", label="median")
            for s in result.steps:
                if s.resampled:
                    ax.axvline(s.t, color="purple", ls="--", lw=0.8, alpha=0.7)
            ax.set_title(label)
            ax.set_xlabel("t")
        axes[0].set_ylabel("log weight (post-update)")
        axes[0].legend(loc="lower left")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def save_ess_traces(pf: FilterResult, sis: FilterResult,
                    path: str | os.PathLike, title: str = "") -> None:
    """Effective-sample-size traces of paired filter/SIS runs."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot([s.t for s in sis.steps], sis.ess_trace, label="SIS",
                color="tab:gray")
        ax.plot([s.t for s in pf.steps], pf.ess_trace, label="particle filter",
                color="tab:blue")
        for s in pf.steps:
            if s.resampled:
                ax.axvline(s.t, color="purple", ls="--", lw=0.7, alpha=0.5)
        ax.set_xlabel("t")
        ax.set_ylabel("ESS")
        ax.set_ylim(0, pf.n_particles * 1.05)
        ax.legend()
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def save_report_figure(reports: list[EvalReport], path: str | os.PathLike,
                       title: str = "") -> None:
    """Per-sequence metrics of one or more reports, with aggregate bars."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for k, rep in enumerate(reports):
            xs = [e["sequence"] for e in rep.per_sequence if e["error"] is None]
            ys = [e["metric"] for e in rep.per_sequence if e["error"] is None]
            ax.scatter(xs, ys, s=14, alpha=0.7, label=rep.method)
            ax.axhline(rep.aggregate_mean, lw=1.2, ls=":",
                       color=f"C{k}", alpha=0.9)
        metric = "per-observation NLL" if reports[0].task == "nll" else "L2 error"
        ax.set_xlabel("sequence")
        ax.set_ylabel(metric)
        ax.legend()
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
