"""Receding-horizon execution: initialization, the MPC step, and episodes.

The loop follows the decreasing-horizon pattern: optimize the current plan,
apply its first control to the (noisy) plant, re-measure, shift the plan by
one step, shrink the horizon, repeat until the robot enters the goal region
or the horizon is exhausted. Initialization runs an unconstrained DDP toward
a deliberately easy temporary goal and must land on a trajectory that already
satisfies the raw constraints -- the optimizer is not infeasible-start.

Safety bookkeeping is always done on the *raw* constraints at the true noisy
states; tightened margins exist only inside the optimizer.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .constraints import ConstraintSet, untightened
from .cost import CostModel
from .ddp import (
    DdpOptions,
    Trajectory,
    _NotPositiveDefinite,
    backward_pass,
    initial_trajectory,
    solve,
)
from .dynamics import DynamicsModel, hover_controls
from .errors import ConfigurationError, SolverError


@dataclass
class Scenario:
    """A complete task definition: model, constraints, goals, cost, options."""

    name: str
    model: DynamicsModel
    constraints: ConstraintSet
    x0: np.ndarray
    goal: np.ndarray
    temp_goal: np.ndarray
    horizon: int
    cost: CostModel
    goal_radius: float = 0.1
    beta: float = 0.5
    options: DdpOptions = field(default_factory=DdpOptions)
    seed: int = 0
    receding: str = "decreasing"  # or "fixed"
    max_steps: int | None = None
    raw: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        self.temp_goal = np.asarray(self.temp_goal, dtype=float)
        if self.goal_radius <= 0:
            raise ConfigurationError("goal radius must be positive")
        if self.horizon < 2:
            raise ConfigurationError("horizon must be at least 2")
        for vec, nm in ((self.x0, "x0"), (self.goal, "goal"), (self.temp_goal, "temp_goal")):
            if vec.shape != (self.model.n,):
                raise ConfigurationError(f"{nm} length must equal state dimension {self.model.n}")
        if not 0.5 <= self.beta < 1.0:
            raise ConfigurationError("beta must lie in [0.5, 1)")
        if self.receding not in ("decreasing", "fixed"):
            raise ConfigurationError("receding mode must be 'decreasing' or 'fixed'")

    def at_goal(self, x):
        d = self.model.position(x) - self.model.position(self.goal)
        return float(np.linalg.norm(d)) <= self.goal_radius


@dataclass
class EpisodeResult:
    """Closed-loop record of one noisy run."""

    states: np.ndarray  # (T+1, n) true states, x0 first
    controls: np.ndarray  # (T, m) applied controls
    g_values: np.ndarray  # (T, c) raw constraint values at each post-step state
    reached_goal: bool
    aborted: bool
    solve_failures: int
    step_times: np.ndarray  # (T,) wall-clock seconds per MPC step
    beta: float = 0.5
    seed: int = 0

    @property
    def g_max(self):
        if self.g_values.shape[1] == 0:
            return np.full(self.g_values.shape[0], -np.inf)
        return self.g_values.max(axis=1)

    @property
    def violations(self) -> int:
        """Steps whose true state violates any raw constraint."""
        return int(np.sum(self.g_max > 0.0))

    def core_data(self):
        """Everything that must be bit-identical across reruns (timing excluded)."""
        return (
            self.states.tobytes(),
            self.controls.tobytes(),
            self.g_values.tobytes(),
            self.reached_goal,
            self.aborted,
            self.solve_failures,
        )


def _clamped_rollout(model, cost, traj, bwd, u_min, u_max, alpha):
    xs = np.empty_like(traj.xs)
    us = np.empty_like(traj.us)
    xs[0] = traj.xs[0]
    x = xs[0]
    run = 0.0
    for k in range(traj.horizon):
        du = alpha * bwd.ds[k] + bwd.Ks[k] @ (x - traj.xs[k])
        u = np.clip(traj.us[k] + du, u_min, u_max)
        us[k] = u
        run += cost.running(x, u)
        x = model.step(x, u)
        xs[k + 1] = x
    out = Trajectory(xs, us, bwd.Ks.copy(), bwd.ds.copy())
    out.cost = run + cost.final(xs[-1])
    return out


def unconstrained_ddp(
    model, cost, x0, us0, u_min, u_max, iterations=150, tol=1e-10
) -> Trajectory:
    """Classical DDP with clamped rollout and backtracking on the affine term."""
    us0 = np.clip(np.asarray(us0, dtype=float), u_min, u_max)
    traj = initial_trajectory(model, cost, x0, us0)
    empty = ConstraintSet(items=[], u_min=u_min, u_max=u_max)
    tight = untightened(empty, traj.horizon + 1)
    opts = DdpOptions()
    reg = 0.0
    for _ in range(iterations):
        try:
            bwd = backward_pass(traj, model, cost, tight, reg, opts)
        except _NotPositiveDefinite:
            reg = min(max(reg * 10.0, 1e-6), 1e8)
            continue
        improved = None
        alpha = 1.0
        for _ in range(12):
            cand = _clamped_rollout(model, cost, traj, bwd, u_min, u_max, alpha)
            if cand.cost < traj.cost - 1e-14:
                improved = cand
                break
            alpha *= 0.5
        if improved is None:
            reg = min(max(reg * 10.0, 1e-6), 1e8)
            if reg >= 1e8:
                break
            continue
        gain = traj.cost - improved.cost
        traj = improved
        reg = reg * 0.5 if reg * 0.5 >= 1e-9 else 0.0
        if gain <= tol * max(1.0, abs(traj.cost)):
            break
    return traj


def initialize(scenario: Scenario) -> Trajectory:
    """Warm-start plan: unconstrained DDP toward the temporary goal.

    Raises a configuration error naming the first step whose raw constraints
    are violated; the temporary goal must be chosen so this cannot happen.
    """
    model, cons = scenario.model, scenario.constraints
    init_cost = scenario.cost.with_reference(scenario.temp_goal)
    us0 = np.tile(hover_controls(model), (scenario.horizon, 1))
    traj = unconstrained_ddp(
        model, init_cost, scenario.x0, us0, cons.u_min, cons.u_max
    )
    if cons.n_constraints:
        for k in range(traj.horizon + 1):
            u = traj.us[k] if k < traj.horizon else None
            g = cons.evaluate(traj.xs[k], u)
            if np.max(g) > 1e-9:
                j = int(np.argmax(g))
                raise ConfigurationError(
                    f"initialization violates constraint {j} at step {k} "
                    f"(g={g[j]:.4g}); adjust the temporary goal"
                )
    traj.cost = scenario.cost.trajectory_cost(traj.xs, traj.us)
    return traj


def shift_trajectory(traj: Trajectory, mode: str = "decreasing") -> Trajectory:
    """Drop the consumed step. Fixed-horizon mode duplicates the tail pair."""
    if mode == "decreasing":
        return Trajectory(
            traj.xs[1:].copy(), traj.us[1:].copy(), traj.Ks[1:].copy(), traj.ds[1:].copy()
        )
    xs = np.vstack([traj.xs[1:], traj.xs[-1:]])
    us = np.vstack([traj.us[1:], traj.us[-1:]])
    Ks = np.concatenate([traj.Ks[1:], traj.Ks[-1:]])
    ds = np.vstack([traj.ds[1:], traj.ds[-1:]])
    return Trajectory(xs, us, Ks, ds)


def mpc_step(x_measured, traj: Trajectory, scenario: Scenario, beta=None):
    """One receding-horizon step from the measured state.

    Returns (u0, shifted trajectory, solve_failed). On solver failure the
    previous plan's next control is applied unchanged.
    """
    if traj.horizon < 2:
        raise ValueError("mpc_step requires a horizon of at least 2")
    cons = scenario.constraints
    plan = traj.copy()
    plan.xs[0] = np.asarray(x_measured, dtype=float)
    plan.cost = scenario.cost.trajectory_cost(plan.xs, plan.us)
    failed = False
    # A plan carrying gains from a previous backward pass can be tightened
    # immediately; the deterministic bootstrap exists only for gainless starts.
    warm = bool(np.any(plan.Ks))
    try:
        res = solve(
            plan, scenario.model, scenario.cost, cons, scenario.options,
            beta=beta, bootstrap=not warm,
        )
        new_plan = res.trajectory
        failed = res.failed
    except SolverError:
        new_plan = plan
        failed = True
    u0 = np.clip(new_plan.us[0], cons.u_min, cons.u_max)
    return u0, shift_trajectory(new_plan, scenario.receding), failed


def _noise_transform(sigma):
    d = np.diag(sigma).copy()
    if np.allclose(sigma, np.diag(d)):
        return ("diag", np.sqrt(np.maximum(d, 0.0)))
    w, V = np.linalg.eigh(0.5 * (sigma + sigma.T))
    return ("full", V * np.sqrt(np.maximum(w, 0.0)))


def episode_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox 4x64) keyed by the episode seed."""
    return np.random.Generator(np.random.Philox(key=int(seed)))


def run_episode(
    scenario: Scenario,
    beta=None,
    seed: int | None = None,
    init: Trajectory | None = None,
    step_cb=None,
) -> EpisodeResult:
    """Execute one closed-loop episode on the noisy plant.

    Noise is drawn per step from N(0, sigma_w) using a Philox generator keyed
    by `seed`, so identical (scenario, beta, seed) inputs reproduce the
    episode bit for bit. Violations are counted on raw constraints at the
    true post-step states.
    """
    beta = scenario.beta if beta is None else float(beta)
    seed = scenario.seed if seed is None else int(seed)
    rng = episode_rng(seed)
    kind, T = _noise_transform(scenario.model.sigma_w)
    traj = (init or initialize(scenario)).copy()
    max_steps = scenario.max_steps
    if max_steps is None:
        max_steps = scenario.horizon if scenario.receding == "decreasing" else 4 * scenario.horizon

    model, cons = scenario.model, scenario.constraints
    x = scenario.x0.copy()
    states = [x.copy()]
    controls = []
    gvals = []
    times = []
    reached = False
    aborted = False
    failures = 0
    consecutive = 0
    while True:
        if scenario.at_goal(x):
            reached = True
            break
        if traj.horizon < 2 or len(controls) >= max_steps:
            break
        t0 = time.perf_counter()
        u0, traj, failed = mpc_step(x, traj, scenario, beta=beta)
        times.append(time.perf_counter() - t0)
        if failed:
            failures += 1
            consecutive += 1
        else:
            consecutive = 0
        w = rng.standard_normal(model.n)
        noise = T * w if kind == "diag" else T @ w
        x = model.step(x, u0) + noise
        states.append(x.copy())
        controls.append(u0)
        g = cons.evaluate(x, u0) if cons.n_constraints else np.zeros(0)
        gvals.append(g)
        if step_cb:
            step_cb(
                {
                    "step": len(controls) - 1,
                    "horizon": traj.horizon,
                    "state": x.tolist(),
                    "control": u0.tolist(),
                    "max_g": float(np.max(g)) if g.size else None,
                    "failed": failed,
                    "wall_ms": times[-1] * 1e3,
                }
            )
        if consecutive >= 2:
            aborted = True
            break
    c = cons.n_constraints
    return EpisodeResult(
        states=np.array(states),
        controls=np.array(controls).reshape(len(controls), model.m),
        g_values=np.array(gvals).reshape(len(controls), c),
        reached_goal=reached,
        aborted=aborted,
        solve_failures=failures,
        step_times=np.array(times),
        beta=beta,
        seed=seed,
    )
