"""Figure rendering for the CLI report path (PNG files next to the CSVs)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .constraints import ObstacleConstraint


def _draw_obstacles(ax, scenario, margins=None):
    """Raw obstacle disks plus, when margins are given, the worst-case
    tightened boundary (dashed)."""
    for i, item in enumerate(scenario.constraints.items):
        if not isinstance(item, ObstacleConstraint):
            continue
        cx, cy = item.center[0], item.center[1]
        ax.add_patch(
            plt.Circle((cx, cy), item.radius, color="0.55", alpha=0.8, zorder=2)
        )
        if margins is not None and margins.size:
            m = float(np.max(margins[:, i]))
            if m > 0:
                ax.add_patch(
                    plt.Circle(
                        (cx, cy),
                        item.radius + m,
                        fill=False,
                        linestyle="--",
                        color="tab:red",
                        linewidth=1.0,
                        zorder=3,
                    )
                )


def plot_trajectory(path, scenario, xs, margins=None, executed=None, title=None):
    """Overhead view of a plan (and optionally the executed noisy path).

    Quadrotor scenarios get a second panel with the altitude profile.
    """
    xs = np.asarray(xs)
    idx = scenario.model.position_indices
    three_d = len(idx) >= 3
    fig, axes = plt.subplots(1, 2 if three_d else 1, figsize=(9 if three_d else 5.2, 4.4))
    ax = axes[0] if three_d else axes
    _draw_obstacles(ax, scenario, margins)
    ax.plot(xs[:, idx[0]], xs[:, idx[1]], "-", color="tab:orange", lw=1.6, label="plan")
    if executed is not None:
        executed = np.asarray(executed)
        ax.plot(
            executed[:, idx[0]], executed[:, idx[1]], "-", color="tab:green",
            lw=1.2, label="executed",
        )
    gx, gy = scenario.goal[idx[0]], scenario.goal[idx[1]]
    ax.plot([scenario.x0[idx[0]]], [scenario.x0[idx[1]]], "ks", ms=5, label="start")
    ax.add_patch(
        plt.Circle((gx, gy), scenario.goal_radius, fill=False, color="tab:blue", lw=1.0)
    )
    ax.plot([gx], [gy], "b*", ms=9, label="goal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(fontsize=8, loc="best")
    if title:
        ax.set_title(title, fontsize=10)
    if three_d:
        az = axes[1]
        az.plot(np.arange(xs.shape[0]), xs[:, idx[2]], color="tab:orange", lw=1.6)
        if executed is not None:
            az.plot(np.arange(executed.shape[0]), executed[:, idx[2]],
                    color="tab:green", lw=1.2)
        az.axhline(scenario.goal[idx[2]], color="tab:blue", ls=":", lw=1.0)
        az.set_xlabel("step")
        az.set_ylabel("z [m]")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def plot_metrics(path, rows):
    """Violated-episode counts per satisfaction probability with the mean
    violation count overlaid."""
    betas = [f"{r.beta:g}" for r in rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.bar(betas, [r.num_violated_episodes for r in rows], color="tab:red", alpha=0.75)
    ax.set_xlabel("satisfaction probability")
    ax.set_ylabel("violated episodes", color="tab:red")
    ax2 = ax.twinx()
    ax2.plot(betas, [r.total_avg for r in rows], "ko-", ms=4, lw=1.2)
    ax2.set_ylabel("mean violations per episode")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
