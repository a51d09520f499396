"""Quadratic trajectory objective: running and final cost with derivatives."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


def _as_weight(w, dim, name, positive=False):
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = np.diag(w)
    if w.shape != (dim, dim):
        raise ValueError(f"{name} must be {dim}x{dim} (or a {dim}-vector diagonal)")
    w = 0.5 * (w + w.T)
    eigs = np.linalg.eigvalsh(w)
    if positive and np.min(eigs) <= 0:
        raise ValueError(f"{name} must be positive definite")
    if np.min(eigs) < -1e-12:
        raise ValueError(f"{name} must be positive semidefinite")
    return w


@dataclass(frozen=True)
class CostModel:
    """0.5 (x-x_ref)'Wx(x-x_ref) + 0.5 (u-u_ref)'Wu(u-u_ref) per step,
    plus 0.5 (x-x_final_ref)'Wf(x-x_final_ref) at the horizon end."""

    Wx: np.ndarray
    Wu: np.ndarray
    Wf: np.ndarray
    x_ref: np.ndarray
    u_ref: np.ndarray

    @classmethod
    def quadratic(cls, state_w, control_w, final_w, x_ref, u_ref=None):
        x_ref = np.asarray(x_ref, dtype=float)
        n = x_ref.size
        Wx = _as_weight(state_w, n, "state weight")
        Wf = _as_weight(final_w, n, "final weight")
        Wu = np.asarray(control_w, dtype=float)
        m = Wu.shape[0] if Wu.ndim else 1
        if Wu.ndim == 1:
            m = Wu.size
        Wu = _as_weight(control_w, m, "control weight", positive=True)
        u_ref = np.zeros(m) if u_ref is None else np.asarray(u_ref, dtype=float)
        return cls(Wx=Wx, Wu=Wu, Wf=Wf, x_ref=x_ref, u_ref=u_ref)

    def with_reference(self, x_ref):
        return replace(self, x_ref=np.asarray(x_ref, dtype=float))

    def running(self, x, u):
        dx = x - self.x_ref
        du = u - self.u_ref
        return 0.5 * float(dx @ self.Wx @ dx) + 0.5 * float(du @ self.Wu @ du)

    def final(self, x):
        dx = x - self.x_ref
        return 0.5 * float(dx @ self.Wf @ dx)

    def trajectory_cost(self, xs, us):
        total = self.final(xs[-1])
        for k in range(len(us)):
            total += self.running(xs[k], us[k])
        return total

    def running_derivatives(self, x, u):
        """(lx, lu, lxx, luu, lxu)."""
        dx = x - self.x_ref
        du = u - self.u_ref
        return (
            self.Wx @ dx,
            self.Wu @ du,
            self.Wx,
            self.Wu,
            np.zeros((self.Wx.shape[0], self.Wu.shape[0])),
        )

    def final_derivatives(self, x):
        """(lx_f, lxx_f)."""
        return self.Wf @ (x - self.x_ref), self.Wf
