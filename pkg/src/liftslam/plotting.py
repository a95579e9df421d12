"""Matplotlib figures for trajectories and threshold traces, rendered to files."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.family": "sans-serif",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "lines.linewidth": 1.2,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def figure(width=4.5, height=None):
    """A styled figure; height defaults to width times the golden ratio."""
    height = height or width * (math.sqrt(5) - 1.0) / 2.0
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def plot_trajectory(est_xy, gt_xy, path, title=""):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        ax.plot(gt_xy[:, 0], gt_xy[:, 1], "--", color="0.35", label="ground truth")
        ax.plot(est_xy[:, 0], est_xy[:, 1], color="tab:blue", label="estimate")
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_thresholds(frames, th_low, th_high, path, inliers=None):
    """Threshold trace per frame, optionally with the inlier count on a twin axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.0))
        ax.step(frames, th_low, where="post", label="low threshold")
        ax.step(frames, th_high, where="post", label="high threshold")
        ax.set_xlabel("frame")
        ax.set_ylabel("descriptor distance")
        if inliers is not None:
            ax2 = ax.twinx()
            ax2.plot(frames, inliers, color="0.6", linewidth=0.8)
            ax2.set_ylabel("inliers", color="0.4")
            ax2.spines["top"].set_visible(False)
        ax.legend(loc="upper left")
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
