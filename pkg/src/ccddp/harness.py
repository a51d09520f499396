"""Monte Carlo experiment driver and violation statistics.

Episodes for each satisfaction probability run with seeds base_seed + i, the
same seed list across probabilities, so comparisons between columns see
paired noise streams. Aggregation is ordered by episode index regardless of
how many worker processes computed them, keeping the output bit-identical
for any --threads value.

A "collision" is one time step spent violating a raw constraint; contiguous
violating steps each count.
"""

from __future__ import annotations

import csv
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .mpc import EpisodeResult, Scenario, initialize, run_episode

DEFAULT_BETAS = (0.5, 0.90, 0.95, 0.99)


@dataclass(frozen=True)
class MetricsRow:
    """Violation statistics over one batch of episodes."""

    beta: float
    episodes: int
    num_violated_episodes: int
    avg_in_violated: float
    total_avg: float


def compute_metrics(results: list[EpisodeResult], beta=None) -> MetricsRow:
    """Aggregate per-episode violation counts into the three batch statistics."""
    if not results:
        raise ValueError("compute_metrics requires at least one episode")
    counts = np.array([r.violations for r in results], dtype=float)
    violated = int(np.sum(counts > 0))
    total = float(np.sum(counts))
    return MetricsRow(
        beta=float(results[0].beta if beta is None else beta),
        episodes=len(results),
        num_violated_episodes=violated,
        avg_in_violated=total / violated if violated else 0.0,
        total_avg=total / len(results),
    )


def _episode_task(args):
    scenario, beta, seed, init = args
    return run_episode(scenario, beta=beta, seed=seed, init=init)


def run_monte_carlo(
    scenario: Scenario,
    betas=DEFAULT_BETAS,
    episodes: int = 100,
    base_seed: int = 0,
    threads: int = 1,
    keep_episodes: bool = False,
    progress=None,
):
    """Run `episodes` seeded episodes per beta; returns (rows, episode lists).

    Episode lists are populated only when keep_episodes is set (the caller may
    want to write per-episode trajectory files).
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    betas = [float(b) for b in betas]
    init = initialize(scenario)
    tasks = [
        (scenario, beta, base_seed + i, init) for beta in betas for i in range(episodes)
    ]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_episode_task, tasks, chunksize=4))
    else:
        results = []
        for t in tasks:
            results.append(_episode_task(t))
            if progress:
                progress(len(results), len(tasks))
    rows = []
    per_beta = {}
    for j, beta in enumerate(betas):
        batch = results[j * episodes : (j + 1) * episodes]
        rows.append(compute_metrics(batch, beta=beta))
        if keep_episodes:
            per_beta[beta] = batch
    return rows, per_beta


# -- persistence -----------------------------------------------------------------


def atomic_write_text(path, text: str):
    """Write-temp-rename so interrupted runs never leave partial files."""
    d = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows):
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def write_metrics_csv(path, rows: list[MetricsRow]):
    atomic_write_text(
        path,
        _csv_text(
            ["beta", "episodes", "violated_episodes", "avg_in_violated", "total_avg"],
            [
                [
                    f"{r.beta:g}",
                    r.episodes,
                    r.num_violated_episodes,
                    f"{r.avg_in_violated:.10g}",
                    f"{r.total_avg:.10g}",
                ]
                for r in rows
            ],
        ),
    )


def write_episode_csv(path, result: EpisodeResult):
    """Per-step record: step, post-step true state, applied control, max raw g."""
    n = result.states.shape[1]
    m = result.controls.shape[1]
    header = (
        ["step"]
        + [f"s{i}" for i in range(n)]
        + [f"u{i}" for i in range(m)]
        + ["max_g"]
    )
    gmax = result.g_max
    rows = []
    for k in range(result.controls.shape[0]):
        rows.append(
            [k]
            + [f"{v:.17g}" for v in result.states[k + 1]]
            + [f"{v:.17g}" for v in result.controls[k]]
            + [f"{gmax[k]:.17g}" if np.isfinite(gmax[k]) else ""]
        )
    atomic_write_text(path, _csv_text(header, rows))


def write_trajectory_csv(path, xs, us, g_max=None):
    """Planned trajectory: step, state, control (blank on the terminal row)."""
    xs = np.asarray(xs)
    us = np.asarray(us)
    n = xs.shape[1]
    m = us.shape[1]
    header = ["step"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)] + ["max_g"]
    rows = []
    for k in range(xs.shape[0]):
        u = [f"{v:.17g}" for v in us[k]] if k < us.shape[0] else [""] * m
        g = "" if g_max is None else f"{g_max[k]:.17g}"
        rows.append([k] + [f"{v:.17g}" for v in xs[k]] + u + [g])
    atomic_write_text(path, _csv_text(header, rows))


def write_margins_csv(path, margins):
    margins = np.asarray(margins)
    header = ["step"] + [f"m{i}" for i in range(margins.shape[1])]
    rows = [[k] + [f"{v:.17g}" for v in margins[k]] for k in range(margins.shape[0])]
    atomic_write_text(path, _csv_text(header, rows))
