"""Closed-loop covariance propagation and the chance-to-deterministic bridge.

Predicted state covariances are propagated along the nominal trajectory under
the affine feedback law du = K dx + d:

    Sigma_{k+1} = (f_x + f_u K_k)' Sigma_k (f_x + f_u K_k) + Sigma_w

Open-loop propagation sets K = 0 and is strictly more pessimistic on
stabilizable systems, which is the entire point of reusing the backward-pass
gains. Each step is symmetrized and eigenvalue-clamped (negatives to zero) so
downstream square roots stay real.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constraints import ConstraintSet, TightenedConstraintSet, tighten
from .dynamics import DynamicsModel


@dataclass
class CovarianceSequence:
    sigmas: np.ndarray  # (N+1, n, n)
    mode: str

    def __len__(self):
        return self.sigmas.shape[0]

    def __getitem__(self, k):
        return self.sigmas[k]

    def traces(self):
        return np.trace(self.sigmas, axis1=1, axis2=2)


_SIGMA_CAP = 1e10  # keeps runaway feedback products finite; margins saturate


def _psd_clamp(S):
    S = 0.5 * (S + S.T)
    if not np.all(np.isfinite(S)):
        S = np.nan_to_num(S, nan=_SIGMA_CAP, posinf=_SIGMA_CAP, neginf=-_SIGMA_CAP)
        S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w[0] >= 0.0 and w[-1] <= _SIGMA_CAP:
        return S
    w = np.clip(w, 0.0, _SIGMA_CAP)
    return (V * w) @ V.T


def propagate(
    model: DynamicsModel,
    xs,
    us,
    Ks,
    sigma0,
    mode: str = "closed_loop",
    jacs=None,
) -> CovarianceSequence:
    """Covariance recursion along the nominal (xs, us) with gains Ks.

    mode "open_loop" ignores the gains (K = 0). sigma0 must be symmetric PSD.
    """
    if mode not in ("closed_loop", "open_loop"):
        raise ValueError(f"unknown propagation mode '{mode}'")
    n = model.n
    sigma0 = np.asarray(sigma0, dtype=float)
    if sigma0.shape != (n, n) or np.max(np.abs(sigma0 - sigma0.T)) > 1e-10:
        raise ValueError("sigma0 must be symmetric n x n")
    if np.min(np.linalg.eigvalsh(sigma0)) < -1e-10:
        raise ValueError("sigma0 must be positive semidefinite")
    N = len(us)
    sigmas = np.empty((N + 1, n, n))
    sigmas[0] = _psd_clamp(sigma0)
    W = model.sigma_w
    for k in range(N):
        fx, fu = jacs[k] if jacs is not None else model.jacobians(xs[k], us[k])
        A = fx + fu @ Ks[k] if mode == "closed_loop" else fx
        sigmas[k + 1] = _psd_clamp(A.T @ sigmas[k] @ A + W)
    return CovarianceSequence(sigmas=sigmas, mode=mode)


def retighten(
    traj,
    model: DynamicsModel,
    constraint_set: ConstraintSet,
    sigma0,
    beta=None,
    mode: str = "closed_loop",
    n_steps: int | None = None,
) -> TightenedConstraintSet:
    """Propagate closed-loop covariances under the trajectory's gains and
    convert the chance constraints into margin-tightened deterministic ones.

    beta = 0.5 everywhere is an exact no-op (zero quantile), so propagation is
    skipped entirely in that case.
    """
    from .constraints import untightened

    betas = (
        np.full(constraint_set.n_constraints, float(beta))
        if beta is not None
        else constraint_set.beta
    )
    horizon = len(traj.us)
    if constraint_set.n_constraints == 0 or np.all(betas == 0.5):
        tight = untightened(constraint_set, horizon + 1)
    else:
        cov = propagate(model, traj.xs, traj.us, traj.Ks, sigma0, mode=mode)
        tight = tighten(constraint_set, traj.xs, cov.sigmas, beta=beta)
    if n_steps is not None and tight.n_steps != n_steps:
        raise ValueError("trajectory length inconsistent with requested steps")
    return tight
