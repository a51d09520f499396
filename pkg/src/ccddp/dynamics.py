"""Discrete-time robot dynamics models with analytic Jacobians.

Each model implements x_{k+1} = f(x_k, u_k) for the deterministic part of a
noisy transition x_{k+1} = f(x_k, u_k) + w_k, w_k ~ N(0, sigma_w). Noise is
never injected here; the simulation harness owns that.

Models:

  point2d     double integrator, state (px, py, vx, vy), control (ax, ay),
              discretized exactly (zero-order hold): p' = p + dt v + dt^2/2 u
  car2d       planar car, state (x, y, theta, v), control (accel, steer),
              semi-implicit cascade: v' = v + dt a, theta' = theta +
              dt v' u_theta / wheelbase, x' = x + dt v' cos(theta'); a smooth
              kinematic-bicycle-style stand-in with bounded steering input
  quadrotor3d 12-state rigid body: positions, Euler angles (roll, pitch,
              yaw), linear velocities (world frame), body rates; controls
              are the four motor thrusts (plus configuration). Rates and
              velocities update first and feed the position/angle updates.
  diffdrive   differential drive with midpoint heading:
              x' = x + dt*uv*cos(theta + 0.5*dt*uw), same for y,
              theta' = theta + dt*uw

The integration schemes are deliberately control-affine in the position rows
(the control reaches every constrained coordinate within a single step), so
one-step linearizations of position constraints are controllable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class DynamicsModel:
    """Immutable discrete-time model: transition, Jacobians, noise covariance."""

    name: str
    n: int
    m: int
    dt: float
    params: dict
    sigma_w: np.ndarray
    position_indices: tuple[int, ...]
    _step: Callable = field(repr=False)
    _jac: Callable = field(repr=False)

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive")
        s = self.sigma_w
        if s.shape != (self.n, self.n) or np.max(np.abs(s - s.T)) > 1e-12:
            raise ConfigurationError("sigma_w must be symmetric n x n")
        if np.any(np.linalg.eigvalsh(s) < -1e-12):
            raise ConfigurationError("sigma_w must be positive semidefinite")

    def step(self, x, u):
        """Deterministic transition f(x, u)."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape != (self.n,) or u.shape != (self.m,):
            raise ValueError(
                f"{self.name}: expected shapes ({self.n},), ({self.m},), "
                f"got {x.shape}, {u.shape}"
            )
        return self._step(x, u, self.dt, self.params)

    def jacobians(self, x, u):
        """Analytic (f_x, f_u) of step at (x, u)."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape != (self.n,) or u.shape != (self.m,):
            raise ValueError(
                f"{self.name}: expected shapes ({self.n},), ({self.m},), "
                f"got {x.shape}, {u.shape}"
            )
        return self._jac(x, u, self.dt, self.params)

    def position(self, x):
        """Planar/spatial position slice used for goals and obstacles."""
        return np.asarray(x, dtype=float)[list(self.position_indices)]


# -- point robot (double integrator) ------------------------------------------


def _point_step(x, u, dt, p):
    out = x.copy()
    out[0] += dt * x[2] + 0.5 * dt * dt * u[0]
    out[1] += dt * x[3] + 0.5 * dt * dt * u[1]
    out[2] += dt * u[0]
    out[3] += dt * u[1]
    return out


def _point_jac(x, u, dt, p):
    fx = np.eye(4)
    fx[0, 2] = dt
    fx[1, 3] = dt
    fu = np.zeros((4, 2))
    fu[0, 0] = 0.5 * dt * dt
    fu[1, 1] = 0.5 * dt * dt
    fu[2, 0] = dt
    fu[3, 1] = dt
    return fx, fu


# -- car-like robot ------------------------------------------------------------


def _car_step(x, u, dt, p):
    L = p["wheelbase"]
    v1 = x[3] + dt * u[0]
    th1 = x[2] + dt * v1 * u[1] / L
    out = x.copy()
    out[0] += dt * v1 * np.cos(th1)
    out[1] += dt * v1 * np.sin(th1)
    out[2] = th1
    out[3] = v1
    return out


def _car_jac(x, u, dt, p):
    L = p["wheelbase"]
    v1 = x[3] + dt * u[0]
    th1 = x[2] + dt * v1 * u[1] / L
    ct, st = np.cos(th1), np.sin(th1)
    # partials of the intermediates
    dv1_dv, dv1_da = 1.0, dt
    dth_dth = 1.0
    dth_dv = dt * u[1] / L * dv1_dv
    dth_da = dt * u[1] / L * dv1_da
    dth_dsteer = dt * v1 / L
    fx = np.eye(4)
    fx[0, 2] = -dt * v1 * st * dth_dth
    fx[0, 3] = dt * ct * dv1_dv - dt * v1 * st * dth_dv
    fx[1, 2] = dt * v1 * ct * dth_dth
    fx[1, 3] = dt * st * dv1_dv + dt * v1 * ct * dth_dv
    fx[2, 3] = dth_dv
    fu = np.zeros((4, 2))
    fu[0, 0] = dt * ct * dv1_da - dt * v1 * st * dth_da
    fu[0, 1] = -dt * v1 * st * dth_dsteer
    fu[1, 0] = dt * st * dv1_da + dt * v1 * ct * dth_da
    fu[1, 1] = dt * v1 * ct * dth_dsteer
    fu[2, 0] = dth_da
    fu[2, 1] = dth_dsteer
    fu[3, 0] = dv1_da
    return fx, fu


# -- quadrotor -----------------------------------------------------------------
#
# State: [x y z, phi theta psi, vx vy vz, p q r]; controls f1..f4 >= 0.
# Plus configuration: motors 1/3 on the body x arm, 2/4 on the y arm:
#   total thrust F = f1+f2+f3+f4
#   roll torque   = arm * (f2 - f4)
#   pitch torque  = arm * (f3 - f1)
#   yaw torque    = km  * (f1 - f2 + f3 - f4)


def _quad_frames(x, u, p):
    Jx, Jy, Jz = p["inertia"]
    arm, km = p["arm"], p["km"]
    phi, th, psi = x[3], x[4], x[5]
    w = x[9:12]
    cph, sph = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(th), np.sin(th)
    cps, sps = np.cos(psi), np.sin(psi)
    F = u.sum()
    tau = np.array(
        [arm * (u[1] - u[3]), arm * (u[2] - u[0]), km * (u[0] - u[1] + u[2] - u[3])]
    )
    # Body z axis in world frame (R = Rz Ry Rx, third column).
    bz = np.array([cps * sth * cph + sps * sph, sps * sth * cph - cps * sph, cth * cph])
    tth = sth / cth
    E = np.array(
        [[1.0, sph * tth, cph * tth], [0.0, cph, -sph], [0.0, sph / cth, cph / cth]]
    )
    wdot = np.array(
        [
            (tau[0] - (Jz - Jy) * w[1] * w[2]) / Jx,
            (tau[1] - (Jx - Jz) * w[2] * w[0]) / Jy,
            (tau[2] - (Jy - Jx) * w[0] * w[1]) / Jz,
        ]
    )
    return F, bz, E, wdot, (cph, sph, cth, sth, cps, sps)


def _quad_step(x, u, dt, p):
    m, g = p["mass"], p["gravity"]
    F, bz, E, wdot, _ = _quad_frames(x, u, p)
    w1 = x[9:12] + dt * wdot
    ang1 = x[3:6] + dt * (E @ w1)
    v1 = x[6:9] + dt * ((F / m) * bz - np.array([0.0, 0.0, g]))
    p1 = x[0:3] + dt * v1
    return np.concatenate([p1, ang1, v1, w1])


def _quad_jac(x, u, dt, p):
    m = p["mass"]
    Jx, Jy, Jz = p["inertia"]
    arm, km = p["arm"], p["km"]
    w = x[9:12]
    F, bz, E, wdot, (cph, sph, cth, sth, cps, sps) = _quad_frames(x, u, p)
    w1 = w + dt * wdot

    # rate update partials
    dw_dw = np.eye(3)
    dw_dw[0, 1] = -dt * (Jz - Jy) * w[2] / Jx
    dw_dw[0, 2] = -dt * (Jz - Jy) * w[1] / Jx
    dw_dw[1, 0] = -dt * (Jx - Jz) * w[2] / Jy
    dw_dw[1, 2] = -dt * (Jx - Jz) * w[0] / Jy
    dw_dw[2, 0] = -dt * (Jy - Jx) * w[1] / Jz
    dw_dw[2, 1] = -dt * (Jy - Jx) * w[0] / Jz
    dw_du = np.array(
        [
            dt * arm * np.array([0.0, 1.0, 0.0, -1.0]) / Jx,
            dt * arm * np.array([-1.0, 0.0, 1.0, 0.0]) / Jy,
            dt * km * np.array([1.0, -1.0, 1.0, -1.0]) / Jz,
        ]
    )

    # Euler kinematics partials at the current angles, applied to w1
    tth = sth / cth
    sec2 = 1.0 / (cth * cth)
    dE_dphi = np.array(
        [
            [0.0, cph * tth, -sph * tth],
            [0.0, -sph, -cph],
            [0.0, cph / cth, -sph / cth],
        ]
    )
    dE_dth = np.array(
        [
            [0.0, sph * sec2, cph * sec2],
            [0.0, 0.0, 0.0],
            [0.0, sph * sth * sec2, cph * sth * sec2],
        ]
    )
    dang_dang = np.eye(3)
    dang_dang[:, 0] += dt * (dE_dphi @ w1)
    dang_dang[:, 1] += dt * (dE_dth @ w1)
    dang_dw = dt * (E @ dw_dw)
    dang_du = dt * (E @ dw_du)

    # thrust-direction partials
    dbz_dphi = np.array(
        [-cps * sth * sph + sps * cph, -sps * sth * sph - cps * cph, -cth * sph]
    )
    dbz_dth = np.array([cps * cth * cph, sps * cth * cph, -sth * cph])
    dbz_dpsi = np.array([-sps * sth * cph + cps * sph, cps * sth * cph + sps * sph, 0.0])
    dv_dang = dt * (F / m) * np.column_stack([dbz_dphi, dbz_dth, dbz_dpsi])
    dv_du = (dt / m) * np.outer(bz, np.ones(4))

    fx = np.eye(12)
    fx[0:3, 3:6] = dt * dv_dang
    fx[0:3, 6:9] = dt * np.eye(3)
    fx[3:6, 3:6] = dang_dang
    fx[3:6, 9:12] = dang_dw
    fx[6:9, 3:6] = dv_dang
    fx[9:12, 9:12] = dw_dw

    fu = np.zeros((12, 4))
    fu[0:3, :] = dt * dv_du
    fu[3:6, :] = dang_du
    fu[6:9, :] = dv_du
    fu[9:12, :] = dw_du
    return fx, fu


# -- differential drive --------------------------------------------------------


def _diffdrive_step(x, u, dt, p):
    mid = x[2] + 0.5 * dt * u[1]
    out = x.copy()
    out[0] += dt * u[0] * np.cos(mid)
    out[1] += dt * u[0] * np.sin(mid)
    out[2] += dt * u[1]
    return out


def _diffdrive_jac(x, u, dt, p):
    mid = x[2] + 0.5 * dt * u[1]
    cm, sm = np.cos(mid), np.sin(mid)
    fx = np.eye(3)
    fx[0, 2] = -dt * u[0] * sm
    fx[1, 2] = dt * u[0] * cm
    fu = np.array(
        [
            [dt * cm, -0.5 * dt * dt * u[0] * sm],
            [dt * sm, 0.5 * dt * dt * u[0] * cm],
            [0.0, dt],
        ]
    )
    return fx, fu


def _diag_sigma(groups):
    """Diagonal covariance from (std, count) groups; stds are per-state-group."""
    stds = np.concatenate([np.full(cnt, s) for s, cnt in groups])
    return np.diag(stds**2)


_REGISTRY = {
    "point2d": dict(
        n=4,
        m=2,
        dt=0.05,
        position_indices=(0, 1),
        defaults={"sigma_pos": 0.005, "sigma_vel": 0.01},
        step=_point_step,
        jac=_point_jac,
        sigma=lambda d: _diag_sigma([(d["sigma_pos"], 2), (d["sigma_vel"], 2)]),
    ),
    "car2d": dict(
        n=4,
        m=2,
        dt=0.02,
        position_indices=(0, 1),
        defaults={
            "sigma_pos": 0.001,
            "sigma_theta": 0.02,
            "sigma_v": 0.02,
            "wheelbase": 1.0,
        },
        step=_car_step,
        jac=_car_jac,
        sigma=lambda d: _diag_sigma(
            [(d["sigma_pos"], 2), (d["sigma_theta"], 1), (d["sigma_v"], 1)]
        ),
    ),
    "quadrotor3d": dict(
        n=12,
        m=4,
        dt=0.02,
        position_indices=(0, 1, 2),
        defaults={
            "sigma_pose": 0.001,
            "sigma_vel": 0.1,
            "mass": 1.0,
            "gravity": 9.81,
            "inertia": (0.01, 0.01, 0.02),
            "arm": 0.2,
            "km": 0.02,
        },
        step=_quad_step,
        jac=_quad_jac,
        sigma=lambda d: _diag_sigma([(d["sigma_pose"], 6), (d["sigma_vel"], 6)]),
    ),
    "diffdrive": dict(
        n=3,
        m=2,
        dt=0.1,
        position_indices=(0, 1),
        defaults={"sigma_pos": 0.001, "sigma_theta": 0.001},
        step=_diffdrive_step,
        jac=_diffdrive_jac,
        sigma=lambda d: _diag_sigma([(d["sigma_pos"], 2), (d["sigma_theta"], 1)]),
    ),
}

MODEL_NAMES = tuple(_REGISTRY)


def make_model(name: str, overrides: dict | None = None) -> DynamicsModel:
    """Build a named model with default parameters, applying overrides.

    Recognized override keys are the model's parameter names plus "dt".
    Unknown keys are rejected so typos in scenario files fail loudly.
    """
    if name not in _REGISTRY:
        raise ConfigurationError(f"unknown model '{name}'; choices: {MODEL_NAMES}")
    spec = _REGISTRY[name]
    params = dict(spec["defaults"])
    dt = spec["dt"]
    for key, val in (overrides or {}).items():
        if key == "dt":
            dt = float(val)
        elif key in params:
            params[key] = tuple(val) if isinstance(val, (list, tuple)) else float(val)
        else:
            raise ConfigurationError(f"model '{name}' has no parameter '{key}'")
    return DynamicsModel(
        name=name,
        n=spec["n"],
        m=spec["m"],
        dt=dt,
        params=params,
        sigma_w=spec["sigma"](params),
        position_indices=spec["position_indices"],
        _step=spec["step"],
        _jac=spec["jac"],
    )


def hover_controls(model: DynamicsModel) -> np.ndarray:
    """Steady-state control: hover thrusts for the quadrotor, zeros otherwise."""
    if model.name == "quadrotor3d":
        f = model.params["mass"] * model.params["gravity"] / 4.0
        return np.full(4, f)
    return np.zeros(model.m)


def finite_difference_jacobians(model: DynamicsModel, x, u, h=1e-5):
    """Central finite-difference (f_x, f_u); test oracle for the analytic pair."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    fx = np.zeros((model.n, model.n))
    fu = np.zeros((model.n, model.m))
    for i in range(model.n):
        e = np.zeros(model.n)
        e[i] = h
        fx[:, i] = (model.step(x + e, u) - model.step(x - e, u)) / (2 * h)
    for i in range(model.m):
        e = np.zeros(model.m)
        e[i] = h
        fu[:, i] = (model.step(x, u + e) - model.step(x, u - e)) / (2 * h)
    return fx, fu
