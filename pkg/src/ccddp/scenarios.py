"""Scenario configuration: YAML schema, validation, built-in tasks.

Schema (all vectors are plain YAML lists; lengths are checked against the
model's state/control dimensions):

    name: point2d                  # free-form label
    model:
      name: point2d                # point2d | car2d | quadrotor3d | diffdrive
      dt: 0.05                     # optional dt override
      params: {sigma_pos: 0.005}   # optional model parameter overrides
    horizon: 100                   # prediction horizon N (>= 2)
    x0: [0, 0, 0, 0]
    goal: [3, 3, 0, 0]
    temp_goal: [0, 3, 0, 0]        # optional; defaults to goal
    goal_radius: 0.1               # optional; success region radius
    beta: 0.99                     # optional; default satisfaction probability
    robot_radius: 0.0              # optional; added to every obstacle radius
    u_min: [-10, -10]
    u_max: [10, 10]
    obstacles:                     # optional
      - {type: circle, center: [1, 1], radius: 0.5}
      - {type: cylinder, center: [2.6, 2.6], radius: 0.5, axis: z}
    constraints:                   # optional affine rows a'x + b'u + c <= 0
      - {a: [1, 0, 0, 0], c: -5.0}
    cost:
      state: [0.5, 0.5, 0.05, 0.05]   # running state weights (diagonal or scalar)
      control: 0.01                   # running control weights
      final: [200, 200, 20, 20]       # terminal weights
      control_ref: [0, 0]             # optional control reference
    options: {n1: 10, n2: 5, sigma0: 0.0}   # optional solver knobs
    seed: 0                        # optional default noise seed
    receding: decreasing           # optional; decreasing | fixed
    max_steps: 200                 # optional episode cap (fixed mode)

Validation failures raise ConfigurationError naming the offending field.
"""

from __future__ import annotations

import importlib.resources as resources
import os

import numpy as np
import yaml

from .constraints import AffineConstraint, ConstraintSet, ObstacleConstraint
from .cost import CostModel
from .ddp import DdpOptions
from .dynamics import make_model
from .errors import ConfigurationError
from .mpc import Scenario, initialize

BUILTIN_NAMES = ("point2d", "car2d", "quadrotor3d", "diffdrive")

_OPTION_KEYS = {
    "n1": int,
    "n2": int,
    "sigma0": float,
    "early_stop": bool,
    "early_stop_tol": float,
    "trust_fraction": float,
    "reg_init": float,
    "max_retries": int,
    "second_order": str,
    "cost_increase_tol": float,
}


def builtin_path(name: str) -> str:
    if name not in BUILTIN_NAMES:
        raise ConfigurationError(
            f"unknown built-in scenario '{name}'; choices: {BUILTIN_NAMES}"
        )
    return str(resources.files("ccddp").joinpath(f"scenarios/{name}.yaml"))


def _need(cfg, key, path):
    if key not in cfg:
        raise ConfigurationError(f"{path}: missing required field '{key}'")
    return cfg[key]


def _vector(value, length, path):
    arr = np.asarray(value, dtype=float)
    if arr.shape != (length,):
        raise ConfigurationError(f"{path}: expected {length} numbers, got {value!r}")
    return arr


def _weights(value, length, path):
    if np.isscalar(value):
        return np.full(length, float(value))
    return _vector(value, length, path)


def _cylinder_indices(axis, pos_idx):
    if len(pos_idx) < 3:
        raise ConfigurationError("cylinder obstacles need a 3D position state")
    drop = {"x": 0, "y": 1, "z": 2}.get(axis)
    if drop is None:
        raise ConfigurationError(f"obstacles[].axis: must be x, y or z, got {axis!r}")
    return tuple(pos_idx[i] for i in range(3) if i != drop)


def scenario_from_dict(cfg: dict, validate_init: bool = False) -> Scenario:
    """Build and validate a Scenario from a parsed configuration tree."""
    if not isinstance(cfg, dict):
        raise ConfigurationError("scenario file must contain a mapping")
    mcfg = _need(cfg, "model", "scenario")
    if isinstance(mcfg, str):
        mcfg = {"name": mcfg}
    overrides = dict(mcfg.get("params") or {})
    if "dt" in mcfg:
        overrides["dt"] = mcfg["dt"]
    model = make_model(_need(mcfg, "name", "model"), overrides)
    n, m = model.n, model.m

    horizon = int(_need(cfg, "horizon", "scenario"))
    x0 = _vector(_need(cfg, "x0", "scenario"), n, "x0")
    goal = _vector(_need(cfg, "goal", "scenario"), n, "goal")
    temp_goal = _vector(cfg.get("temp_goal", goal), n, "temp_goal")
    u_min = _vector(_need(cfg, "u_min", "scenario"), m, "u_min")
    u_max = _vector(_need(cfg, "u_max", "scenario"), m, "u_max")
    if np.any(u_min > u_max):
        raise ConfigurationError("u_min: entries must not exceed u_max")

    robot_radius = float(cfg.get("robot_radius", 0.0))
    if robot_radius < 0:
        raise ConfigurationError("robot_radius: must be nonnegative")
    items = []
    for i, ob in enumerate(cfg.get("obstacles") or []):
        where = f"obstacles[{i}]"
        kind = ob.get("type", "circle")
        radius = float(_need(ob, "radius", where))
        if radius <= 0:
            raise ConfigurationError(f"{where}.radius: must be positive, got {radius}")
        if kind == "circle":
            idx = tuple(ob.get("indices", model.position_indices[:2]))
        elif kind == "cylinder":
            idx = _cylinder_indices(ob.get("axis", "z"), model.position_indices)
        else:
            raise ConfigurationError(f"{where}.type: unknown obstacle type {kind!r}")
        center = _vector(_need(ob, "center", where), len(idx), f"{where}.center")
        items.append(
            ObstacleConstraint(center=center, radius=radius + robot_radius, indices=idx, kind=kind)
        )
    for i, row in enumerate(cfg.get("constraints") or []):
        where = f"constraints[{i}]"
        a = _vector(_need(row, "a", where), n, f"{where}.a")
        b = _vector(row["b"], m, f"{where}.b") if "b" in row else np.zeros(m)
        items.append(AffineConstraint(a=a, b=b, c=float(_need(row, "c", where))))

    beta = float(cfg.get("beta", 0.5))
    if not 0.5 <= beta < 1.0:
        raise ConfigurationError(f"beta: must lie in [0.5, 1), got {beta}")
    constraints = ConstraintSet(items=items, u_min=u_min, u_max=u_max, beta=beta)

    ccfg = _need(cfg, "cost", "scenario")
    cost = CostModel.quadratic(
        state_w=_weights(_need(ccfg, "state", "cost"), n, "cost.state"),
        control_w=_weights(_need(ccfg, "control", "cost"), m, "cost.control"),
        final_w=_weights(_need(ccfg, "final", "cost"), n, "cost.final"),
        x_ref=goal,
        u_ref=_vector(ccfg["control_ref"], m, "cost.control_ref")
        if "control_ref" in ccfg
        else None,
    )

    opts = DdpOptions()
    for key, val in (cfg.get("options") or {}).items():
        if key not in _OPTION_KEYS:
            raise ConfigurationError(f"options.{key}: unknown solver option")
        setattr(opts, key, _OPTION_KEYS[key](val))

    scenario = Scenario(
        name=str(cfg.get("name", mcfg["name"])),
        model=model,
        constraints=constraints,
        x0=x0,
        goal=goal,
        temp_goal=temp_goal,
        horizon=horizon,
        cost=cost,
        goal_radius=float(cfg.get("goal_radius", 0.1)),
        beta=beta,
        options=opts,
        seed=int(cfg.get("seed", 0)),
        receding=str(cfg.get("receding", "decreasing")),
        max_steps=int(cfg["max_steps"]) if "max_steps" in cfg else None,
        raw=_normalized_dict(cfg),
    )
    if validate_init:
        initialize(scenario)  # raises with the violating step on a bad temp goal
    return scenario


def _normalized_dict(cfg: dict) -> dict:
    """Plain-python copy of the configuration for round-trip persistence."""

    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        return v

    return conv(cfg)


def load_scenario(path_or_name: str, validate_init: bool = False) -> Scenario:
    """Load a scenario from a YAML path or a built-in name."""
    path = path_or_name
    if not os.path.exists(path):
        if path_or_name in BUILTIN_NAMES:
            path = builtin_path(path_or_name)
        else:
            raise ConfigurationError(f"scenario '{path_or_name}' not found")
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML ({exc})") from exc
    return scenario_from_dict(cfg, validate_init=validate_init)


def save_scenario(path: str, scenario: Scenario):
    """Write the normalized configuration back out (round-trip stable)."""
    from .harness import atomic_write_text

    atomic_write_text(path, yaml.safe_dump(scenario.raw, sort_keys=False))
