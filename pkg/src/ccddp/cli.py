"""Command-line interface: single solves, episodes, Monte Carlo, benchmarks.

Exit codes: 0 success, 2 configuration problem, 3 solver failure, 4 I/O
failure. Diagnostics stream to stderr as line-delimited JSON with --verbose.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .chance import retighten
from .ddp import backward_pass, build_nominal_cache, forward_pass, solve
from .errors import ConfigurationError, SolverError
from .harness import (
    DEFAULT_BETAS,
    run_monte_carlo,
    write_episode_csv,
    write_margins_csv,
    write_metrics_csv,
    write_trajectory_csv,
)
from .mpc import initialize, run_episode
from .scenarios import load_scenario


def _eprint(*args):
    print(*args, file=sys.stderr)


def _parse_betas(text, default):
    if text is None:
        return list(default)
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"--beta: expected numbers, got {text!r}") from exc


def _raw_gmax(scenario, xs, us):
    cons = scenario.constraints
    if not cons.n_constraints:
        return None
    out = np.empty(len(xs))
    for k, x in enumerate(xs):
        u = us[k] if k < len(us) else None
        out[k] = float(np.max(cons.evaluate(x, u)))
    return out


def _mode_solve(scenario, args, out):
    beta = _parse_betas(args.beta, [scenario.beta])[0]
    init = initialize(scenario)
    diag = (lambda rec: _eprint(json.dumps(rec))) if args.verbose else None
    res = solve(
        init, scenario.model, scenario.cost, scenario.constraints,
        scenario.options, beta=beta, diag=diag,
    )
    traj = res.trajectory
    write_trajectory_csv(
        os.path.join(out, "trajectory.csv"), traj.xs, traj.us,
        _raw_gmax(scenario, traj.xs, traj.us),
    )
    write_margins_csv(os.path.join(out, "margins.csv"), res.tightened.margins)
    if args.plot:
        from .plots import plot_trajectory

        plot_trajectory(
            os.path.join(out, "trajectory.png"), scenario, traj.xs,
            margins=res.tightened.margins,
            title=f"{scenario.name}  beta={beta:g}  cost={traj.cost:.2f}",
        )
    _eprint(
        f"solve: cost={traj.cost:.6g} iterations={res.iterations} "
        f"max_tightened={res.tightened.max_violation(traj.xs, traj.us):.3e} "
        f"stalls={res.stalls}"
    )
    return 3 if res.failed else 0


def _mode_episode(scenario, args, out):
    beta = _parse_betas(args.beta, [scenario.beta])[0]
    seed = scenario.seed if args.seed is None else args.seed
    cb = (lambda rec: _eprint(json.dumps(rec))) if args.verbose else None
    ep = run_episode(scenario, beta=beta, seed=seed, step_cb=cb)
    write_episode_csv(os.path.join(out, "episode.csv"), ep)
    if args.plot:
        from .plots import plot_trajectory

        plot_trajectory(
            os.path.join(out, "episode.png"), scenario, ep.states,
            title=f"{scenario.name} beta={beta:g} seed={seed} "
            f"violations={ep.violations}",
        )
    _eprint(
        f"episode: steps={len(ep.controls)} reached_goal={ep.reached_goal} "
        f"violations={ep.violations} solve_failures={ep.solve_failures} "
        f"mean_step_ms={1e3 * float(np.mean(ep.step_times)) if len(ep.step_times) else 0.0:.1f}"
    )
    if ep.aborted:
        return 3
    return 0


def _mode_montecarlo(scenario, args, out):
    betas = _parse_betas(args.beta, DEFAULT_BETAS)
    seed = scenario.seed if args.seed is None else args.seed
    rows, per_beta = run_monte_carlo(
        scenario, betas=betas, episodes=args.episodes, base_seed=seed,
        threads=args.threads, keep_episodes=True,
        progress=(lambda done, total: _eprint(f"episode {done}/{total}"))
        if args.verbose
        else None,
    )
    write_metrics_csv(os.path.join(out, "metrics.csv"), rows)
    for beta, eps in per_beta.items():
        d = os.path.join(out, "episodes", f"beta_{beta:g}")
        for i, ep in enumerate(eps):
            write_episode_csv(os.path.join(d, f"episode_{i:03d}.csv"), ep)
    if args.plot:
        from .plots import plot_metrics

        plot_metrics(os.path.join(out, "metrics.png"), rows)
    for r in rows:
        _eprint(
            f"beta={r.beta:g}: violated={r.num_violated_episodes}/{r.episodes} "
            f"avg_in_violated={r.avg_in_violated:.3g} total_avg={r.total_avg:.3g}"
        )
    return 0


def _mode_bench(scenario, args, out):
    """Wall-clock statistics of single backward+forward iterations."""
    beta = _parse_betas(args.beta, [scenario.beta])[0]
    reps = max(5, args.episodes if args.episodes != 100 else 30)
    init = initialize(scenario)
    tightened = retighten(
        init, scenario.model, scenario.constraints,
        scenario.options.sigma0_matrix(scenario.model.n),
        beta=beta, n_steps=init.horizon + 1,
    )
    cons = scenario.constraints
    rows = []
    traj = init
    for i in range(reps):
        t0 = time.perf_counter()
        cache = build_nominal_cache(
            traj, scenario.model, scenario.cost, tightened, scenario.options
        )
        bwd = backward_pass(
            traj, scenario.model, scenario.cost, tightened, 0.0,
            scenario.options, cache=cache,
        )
        t1 = time.perf_counter()
        new_traj, ok, _ = forward_pass(
            traj, scenario.model, scenario.cost, tightened, bwd,
            cons.u_min, cons.u_max,
        )
        t2 = time.perf_counter()
        rows.append([i, (t1 - t0) * 1e3, (t2 - t1) * 1e3, (t2 - t0) * 1e3])
        if ok:
            traj = new_traj
    arr = np.array([r[3] for r in rows])
    from .harness import _csv_text, atomic_write_text

    atomic_write_text(
        os.path.join(out, "bench.csv"),
        _csv_text(
            ["iteration", "backward_ms", "forward_ms", "total_ms"],
            [[r[0], f"{r[1]:.3f}", f"{r[2]:.3f}", f"{r[3]:.3f}"] for r in rows],
        ),
    )
    _eprint(
        f"bench: n={reps} horizon={scenario.horizon} mean={arr.mean():.1f}ms "
        f"p95={np.percentile(arr, 95):.1f}ms worst={arr.max():.1f}ms"
    )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ccddp",
        description="Chance-constrained DDP trajectory optimization and MPC simulation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--mode", required=True, choices=("solve", "episode", "montecarlo", "bench"),
        help="solve: one noiseless optimization; episode: one closed-loop run; "
        "montecarlo: repeated episodes per beta; bench: per-iteration timing",
    )
    parser.add_argument(
        "--scenario", required=True,
        help="built-in name (point2d, car2d, quadrotor3d, diffdrive) or YAML path",
    )
    parser.add_argument("--beta", default=None,
                        help="satisfaction probability; comma-separated list for montecarlo")
    parser.add_argument("--episodes", type=int, default=100,
                        help="episodes per beta (montecarlo) / repetitions (bench)")
    parser.add_argument("--seed", type=int, default=None, help="base noise seed")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker processes for montecarlo episodes")
    parser.add_argument("--verbose", action="store_true",
                        help="stream per-step/per-iteration JSON diagnostics to stderr")
    parser.add_argument("--no-plot", dest="plot", action="store_false",
                        help="skip PNG figure rendering")
    args = parser.parse_args(argv)

    try:
        scenario = load_scenario(args.scenario)
        os.makedirs(args.out, exist_ok=True)
        handler = {
            "solve": _mode_solve,
            "episode": _mode_episode,
            "montecarlo": _mode_montecarlo,
            "bench": _mode_bench,
        }[args.mode]
        return handler(scenario, args, args.out)
    except ConfigurationError as exc:
        _eprint(f"configuration error: {exc}")
        return 2
    except SolverError as exc:
        _eprint(f"solver failure: {exc}")
        return 3
    except OSError as exc:
        _eprint(f"i/o failure: {exc}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
