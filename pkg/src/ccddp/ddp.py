"""Constrained differential dynamic programming with a QP forward pass.

Backward pass: local quadratic models of the action-value function are built
along the nominal trajectory; on steps where tightened constraints are on
their boundary, the feedback law is the solution of the equality-constrained
KKT system over the active rows, so the gains respect the constraint manifold
to first order. Value derivatives are then propagated one step back.

Forward pass: a fresh rollout from the initial state where each control
deviation solves a small dense QP (local quadratic objective, linearized
tightened constraints, control box bounds, optional trust-region box).

State-only constraints cannot be influenced by the control at the same step,
so their rows are composed through the dynamics: a constraint on x_{k+1}
becomes a row on du_k with gradient g_x(x_{k+1}) f_u(x_k, u_k), and rows up
to `preview_horizon` steps ahead enter the same QP through products of the
nominal state Jacobians, so braking starts before a boundary is one step
away. Rows of u-dependent constraints are taken at the current step.

Sign conventions follow the quadratic expansion

    Q(x+dx, u+du) ~= Q + Qx'dx + Qu'du + 0.5 dx'Qxx dx + 0.5 du'Quu du + dx'Qxu du

with constraint linearization g0 + C du - D dx (C = g_u, D = -g_x), and the
KKT-consistent constrained gains

    K = -Quu^-1 Qux + Quu^-1 C'(C Quu^-1 C')^-1 (D + C Quu^-1 Qux)
    d = -Quu^-1 (Qu - C'(C Quu^-1 C')^-1 C Quu^-1 Qu)

(the sign of the D term is fixed by C(K dx + d) = D dx; see tests for the
direct KKT-system cross-check). The value-gradient recursion uses K'Qu --
the transpose is required for dimensional consistency:

    Vx  = Qx + K'Qu + K'Quu d + Qxu d
    Vxx = Qxx + K'Quu K + K'Qux + Qux'K   (symmetrized)

Regularization is additive on Quu before any inversion, escalated by 10x on a
failed forward pass and relaxed by 0.5x on success. The trust region is a
shrinking box on du in the forward-pass QP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constraints import (
    ConstraintSet,
    TightenedConstraintSet,
    untightened,
)
from .cost import CostModel
from .dynamics import DynamicsModel
from .errors import NumericalError, SolverError
from .qp import solve_qp_raw

ACTIVE_TOL = 1e-6
RANK_TOL = 1e-9
OFFSET_CAP = 10.0  # largest per-step boundary pull-back fed into the gains


@dataclass
class Trajectory:
    """Nominal plan plus the affine feedback law from the last backward pass."""

    xs: np.ndarray  # (N+1, n)
    us: np.ndarray  # (N, m)
    Ks: np.ndarray  # (N, m, n)
    ds: np.ndarray  # (N, m)
    cost: float = math.nan

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=float)
        self.us = np.asarray(self.us, dtype=float)
        N = self.us.shape[0]
        if self.xs.shape[0] != N + 1:
            raise ValueError("xs must have one more entry than us")
        if self.Ks is None:
            self.Ks = np.zeros((N, self.us.shape[1], self.xs.shape[1]))
        if self.ds is None:
            self.ds = np.zeros((N, self.us.shape[1]))
        self.Ks = np.asarray(self.Ks, dtype=float)
        self.ds = np.asarray(self.ds, dtype=float)

    @property
    def horizon(self):
        return self.us.shape[0]

    def copy(self):
        return Trajectory(
            self.xs.copy(), self.us.copy(), self.Ks.copy(), self.ds.copy(), self.cost
        )


def rollout(model: DynamicsModel, x0, us):
    """Noiseless rollout; returns the (N+1, n) state array."""
    us = np.asarray(us, dtype=float)
    xs = np.empty((len(us) + 1, model.n))
    xs[0] = x0
    for k, u in enumerate(us):
        xs[k + 1] = model.step(xs[k], u)
    return xs


def initial_trajectory(model, cost, x0, us):
    xs = rollout(model, x0, us)
    traj = Trajectory(xs, np.asarray(us, dtype=float), None, None)
    traj.cost = cost.trajectory_cost(traj.xs, traj.us)
    return traj


@dataclass
class QModel:
    Qx: np.ndarray
    Qu: np.ndarray
    Qxx: np.ndarray
    Quu: np.ndarray
    Qxu: np.ndarray

    @property
    def Qux(self):
        return self.Qxu.T


@dataclass
class ValueModel:
    Vx: np.ndarray
    Vxx: np.ndarray


@dataclass
class DdpOptions:
    """Solver knobs; defaults follow the receding-horizon configuration."""

    n1: int = 10  # optimization iterations per solve
    n2: int = 5  # retighten every n2 iterations (first block stays deterministic)
    reg_init: float = 0.0
    reg_floor: float = 1e-6  # first nonzero regularization on escalation
    reg_max: float = 1e8
    max_retries: int = 8
    activation_tol: float = ACTIVE_TOL
    removal_hysteresis: float = 2.0
    trust_fraction: float = 0.25  # initial half-width = fraction * max box range
    cost_increase_tol: float = 1e-8
    qp_feas_tol: float = 1e-8
    early_stop: bool = True
    early_stop_tol: float = 1e-7
    second_order: str = "gauss_newton"  # or "full" (finite-difference tensors)
    fd_step: float = 1e-5
    sigma0: np.ndarray | float | None = None  # initial state covariance for tightening
    # Forward-pass constraint preview: rows of tightened constraints up to
    # this many steps ahead, composed through the nominal dynamics, enter each
    # step QP so braking starts before a boundary is one step away.
    preview_horizon: int = 6
    preview_value_window: float = 0.5  # ignore preview rows deeper than this
    # Gains stored on the trajectory feed covariance propagation. Constraint
    # rows that are weakly controllable in one step demand corrections far
    # beyond anything the box-bounded QP realizes; when the constrained gain
    # exceeds this multiple of the unconstrained one, the stored gain falls
    # back to the unconstrained feedback.
    constraint_gain_cap: float = 10.0

    def initial_trust(self, u_min, u_max):
        span = u_max - u_min
        finite = span[np.isfinite(span)]
        if finite.size == 0:
            return math.inf
        return self.trust_fraction * float(np.max(finite))

    def sigma0_matrix(self, n):
        if self.sigma0 is None:
            return np.zeros((n, n))
        if np.isscalar(self.sigma0):
            return float(self.sigma0) * np.eye(n)
        s = np.asarray(self.sigma0, dtype=float)
        if s.shape != (n, n):
            raise ValueError("sigma0 must be scalar or n x n")
        return s


# -- backward-pass pieces --------------------------------------------------------


def _q_derivs_raw(Vx, Vxx, fx, fu, lx, lu, lxx, luu, lxu):
    Qx = lx + fx.T @ Vx
    Qu = lu + fu.T @ Vx
    VF = Vxx @ fx
    Qxx = lxx + fx.T @ VF
    Vfu = Vxx @ fu
    Qxu = lxu + fx.T @ Vfu
    Quu = luu + fu.T @ Vfu
    return Qx, Qu, Qxx, Quu, Qxu


def q_derivatives(
    value_next: ValueModel,
    fx,
    fu,
    lx,
    lu,
    lxx,
    luu,
    lxu,
    mode="gauss_newton",
    tensor_terms=None,
) -> QModel:
    """Quadratic Q-model from the next-step value model and local derivatives.

    gauss_newton drops the second-order dynamics tensors; "full" adds the
    contraction of Vx' with (f_xx, f_uu, f_xu), supplied via `tensor_terms`
    as precomputed (n,n), (m,m), (n,m) matrices.
    """
    Vx, Vxx = value_next.Vx, value_next.Vxx
    if not (np.all(np.isfinite(Vx)) and np.all(np.isfinite(Vxx))):
        raise NumericalError("value model is not finite")
    Qx, Qu, Qxx, Quu, Qxu = _q_derivs_raw(Vx, Vxx, fx, fu, lx, lu, lxx, luu, lxu)
    if mode == "full" and tensor_terms is not None:
        txx, tuu, txu = tensor_terms
        Qxx = Qxx + txx
        Quu = Quu + tuu
        Qxu = Qxu + txu
    Qxx = 0.5 * (Qxx + Qxx.T)
    Quu = 0.5 * (Quu + Quu.T)
    return QModel(Qx=Qx, Qu=Qu, Qxx=Qxx, Quu=Quu, Qxu=Qxu)


def dynamics_tensor_terms(model, x, u, Vx, h=1e-5):
    """Finite-difference Vx' . (f_xx, f_uu, f_xu) contractions for "full" mode."""
    n, m = model.n, model.m
    txx = np.zeros((n, n))
    tuu = np.zeros((m, m))
    txu = np.zeros((n, m))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        fxp, fup = model.jacobians(x + e, u)
        fxm, fum = model.jacobians(x - e, u)
        txx[:, j] = ((fxp - fxm) / (2 * h)).T @ Vx
        txu[j, :] = Vx @ ((fup - fum) / (2 * h))
    for j in range(m):
        e = np.zeros(m)
        e[j] = h
        _, fup = model.jacobians(x, u + e)
        _, fum = model.jacobians(x, u - e)
        tuu[:, j] = ((fup - fum) / (2 * h)).T @ Vx
    txx = 0.5 * (txx + txx.T)
    tuu = 0.5 * (tuu + tuu.T)
    return txx, tuu, txu


def unconstrained_gains(quu_inv, Qux, Qu):
    """K = -Quu^-1 Qux, d = -Quu^-1 Qu (quu_inv is the regularized inverse)."""
    return -(quu_inv @ Qux), -(quu_inv @ Qu)


def constrained_gains(quu_inv, Qux, Qu, C, D, offset=None):
    """KKT-consistent gains for the active rows C du = D dx - offset.

    With offset omitted (rows exactly on their boundary) this is the
    closed-form three-term K / two-term d. A positive offset entry is the
    current tightened value of a *violated* row; keeping it in the equality
    makes the affine term step back onto the boundary, which is what restores
    feasibility after a margin update.

    Returns (K, d, lam0) where lam0 are the multipliers of the affine part
    (the dx = 0 KKT solve), whose signs drive active-set pruning.
    """
    if C.shape[0] == 0:
        K, d = unconstrained_gains(quu_inv, Qux, Qu)
        return K, d, np.zeros(0)
    Ku = quu_inv @ Qux
    du = quu_inv @ Qu
    QiC = quu_inv @ C.T
    S = C @ QiC
    S = 0.5 * (S + S.T)
    if np.linalg.eigvalsh(S)[0] <= RANK_TOL * max(1.0, float(np.max(np.abs(S)))):
        raise NumericalError("active rows not independent after pruning")
    rhs = C @ du if offset is None else C @ du - offset
    sol = np.linalg.solve(S, np.column_stack([D + C @ Ku, rhs]))
    K = -Ku + QiC @ sol[:, :-1]
    d = -du + QiC @ sol[:, -1]
    lam0 = -sol[:, -1]
    return K, d, lam0


def select_active_rows(values, C, D, degenerate, quu_inv, Qu, Qux, prev_active, tol):
    """Active-set selection and pruning for one step.

    `values` are tightened constraint values for the candidate rows; a row is
    a candidate when its value is within `tol` of zero (or 2x tol if it was
    active on the previous pass -- removal hysteresis). Degenerate-gradient
    rows and rows that vanish after composition are skipped. Candidates are
    reduced to a linearly independent set, capped at the control dimension
    (keeping the most violated), then rows with negative affine multipliers
    are removed one at a time until all multipliers are nonnegative.

    Returns (C_act, D_act, offsets, ids, lam0); offsets are the clipped
    positive row values fed back into the gain equality for restoration.
    """
    m = C.shape[1]
    cand = []
    for i in range(len(values)):
        if degenerate[i]:
            continue
        cnorm = float(np.linalg.norm(C[i]))
        if cnorm <= RANK_TOL:
            continue  # uncontrollable at this step
        thresh = -(2.0 * tol) if i in prev_active else -tol
        if values[i] >= thresh:
            cand.append(i)
    if not cand:
        return C[:0], D[:0], np.zeros(0), (), np.zeros(0)

    # Independence filter: greedy orthogonalization in candidate order.
    kept = []
    basis = []
    for i in cand:
        r = C[i].astype(float)
        nrm0 = np.linalg.norm(r)
        for bvec in basis:
            r = r - (r @ bvec) * bvec
        if np.linalg.norm(r) > RANK_TOL * max(1.0, nrm0):
            basis.append(r / np.linalg.norm(r))
            kept.append(i)
    # Cap at m rows, keeping the most violated.
    if len(kept) > m:
        kept = sorted(sorted(kept, key=lambda i: -values[i])[:m])

    active = list(kept)
    while active:
        Ca = C[active]
        Da = D[active]
        try:
            _, _, lam0 = constrained_gains(quu_inv, Qux, Qu, Ca, Da)
        except NumericalError:
            active.pop()  # drop the lowest-priority row and retry
            continue
        if lam0.size == 0 or np.min(lam0) >= -1e-12:
            off = np.minimum(np.maximum(values[active], 0.0), OFFSET_CAP)
            return Ca, Da, off, tuple(active), lam0
        worst = int(np.argmin(lam0))
        active.pop(worst)
    return C[:0], D[:0], np.zeros(0), (), np.zeros(0)


@dataclass
class NominalCache:
    """Data fixed by (nominal trajectory, tightened set): reused across retries."""

    fx: np.ndarray
    fu: np.ndarray
    lx: np.ndarray
    lu: np.ndarray
    lxx: np.ndarray
    luu: np.ndarray
    lxu: np.ndarray
    rows: list  # per step: (values, C, D, degenerate, ids) in du_k coordinates
    preview: list  # per step: stacked (A, v_nom, S) multi-step rows or None
    vals_state_max: np.ndarray  # (N+1,) max tightened state-row value at nominal
    window_max: np.ndarray  # (N,) max of vals_state_max over the preview window
    lipschitz: float  # bound on constraint value change per unit state change
    row_vals_max: np.ndarray | None = None  # (N,) max one-step row value per step


def build_nominal_cache(
    traj: Trajectory,
    model: DynamicsModel,
    cost: CostModel,
    tightened: TightenedConstraintSet,
    options: DdpOptions,
) -> NominalCache:
    N = traj.horizon
    n, m = model.n, model.m
    base = tightened.base
    fx = np.empty((N, n, n))
    fu = np.empty((N, n, m))
    lx = np.empty((N, n))
    lu = np.empty((N, m))
    for k in range(N):
        fx[k], fu[k] = model.jacobians(traj.xs[k], traj.us[k])
        lx[k], lu[k], lxx, luu, lxu = cost.running_derivatives(traj.xs[k], traj.us[k])
    if N == 0:
        lxx, luu, lxu = cost.Wx, cost.Wu, np.zeros((n, m))

    c = base.n_constraints
    rows = [None] * N
    preview = [None] * N
    vals_state_max = np.full(N + 1, -np.inf)
    row_vals_max = np.full(N, -np.inf)
    lip = 1.0
    if c:
        state = [(i, it) for i, it in enumerate(base.items) if not it.depends_on_u]
        u_items = [(i, it) for i, it in enumerate(base.items) if it.depends_on_u]
        for it in base.items:
            if it.kind == "affine":
                lip = max(lip, float(np.linalg.norm(it.a)))
        S = len(state)
        # state gradients and tightened values at every nominal state
        G = np.zeros((N + 1, S, n))
        Gbad = np.zeros((N + 1, S), dtype=bool)
        vals = np.full((N + 1, S), -np.inf)
        for j, (i, it) in enumerate(state):
            vals[:, j] = it.value_batch(traj.xs) + tightened.margins[:, i]
            G[:, j, :], Gbad[:, j] = it.grad_x_batch(traj.xs, n)
        if S:
            vals_state_max = vals.max(axis=1)
        # one-step rows for the backward-pass active set (vectorized over k)
        ids = [("s", i) for i, _ in state] + [("u", i) for i, _ in u_items]
        C_all = np.einsum("ksn,knm->ksm", G[1:], fu) if S else np.zeros((N, 0, m))
        D_all = -np.einsum("ksn,knj->ksj", G[1:], fx) if S else np.zeros((N, 0, n))
        for k in range(N):
            r_vals = vals[k + 1]
            r_C = C_all[k]
            r_D = D_all[k]
            r_deg = Gbad[k + 1]
            if u_items:
                ev, eC, eD, ed = [], [], [], []
                for i, it in u_items:
                    ev.append(it.value(traj.xs[k], traj.us[k]) + tightened.margins[k, i])
                    gx, bad = it.grad_x(traj.xs[k], n)
                    eC.append(it.grad_u(traj.xs[k], traj.us[k], m))
                    eD.append(-gx)
                    ed.append(bad)
                r_vals = np.concatenate([r_vals, ev])
                r_C = np.vstack([r_C, eC])
                r_D = np.vstack([r_D, eD])
                r_deg = np.concatenate([r_deg, ed])
            rows[k] = (r_vals, r_C, r_D, r_deg, ids)
            row_vals_max[k] = float(np.max(r_vals, initial=-np.inf))
        # multi-step preview rows (j >= 2): g_x(x_t) fx(t-1)...fx(k+1) fu(k)
        H = max(1, options.preview_horizon)
        if S:
            buckets = [[] for _ in range(N)]
            for t in range(2, N + 1):
                ok = np.where(~Gbad[t])[0]
                if ok.size == 0:
                    continue
                B = G[t][ok]
                v = vals[t][ok]
                lo_k = max(0, t - H)
                for k in range(t - 2, lo_k - 1, -1):
                    B = B @ fx[k + 1]
                    buckets[k].append((B @ fu[k], v, B @ fx[k], ok))
            for k in range(N):
                if buckets[k]:
                    preview[k] = (
                        np.vstack([b[0] for b in buckets[k]]),
                        np.concatenate([b[1] for b in buckets[k]]),
                        np.vstack([b[2] for b in buckets[k]]),
                        np.concatenate([b[3] for b in buckets[k]]),
                    )
    window_max = np.full(N, -np.inf)
    H = max(1, options.preview_horizon)
    for k in range(N):
        hi = min(N, k + H)
        window_max[k] = float(np.max(vals_state_max[k + 1 : hi + 1], initial=-np.inf))
    return NominalCache(
        fx=fx, fu=fu, lx=lx, lu=lu, lxx=lxx, luu=luu, lxu=lxu,
        rows=rows, preview=preview, vals_state_max=vals_state_max,
        window_max=window_max, lipschitz=lip, row_vals_max=row_vals_max,
    )


@dataclass
class BackwardData:
    """Per-step products the forward pass and covariance propagation consume."""

    Ks: np.ndarray
    ds: np.ndarray
    Qu: np.ndarray
    Qux: np.ndarray
    Quu: np.ndarray  # regularized
    Quu_inv: np.ndarray
    active_ids: list = field(default_factory=list)
    cache: NominalCache | None = None


class _NotPositiveDefinite(Exception):
    pass


def backward_pass(
    traj: Trajectory,
    model: DynamicsModel,
    cost: CostModel,
    tightened: TightenedConstraintSet,
    reg: float,
    options: DdpOptions,
    active_memory: list | None = None,
    cache: NominalCache | None = None,
) -> BackwardData:
    """Run the constrained backward recursion along the nominal trajectory.

    Raises _NotPositiveDefinite when Quu + reg*I fails its Cholesky; the solve
    loop owns the escalation schedule.
    """
    N = traj.horizon
    n, m = model.n, model.m
    base = tightened.base
    if cache is None:
        cache = build_nominal_cache(traj, model, cost, tightened, options)
    out = BackwardData(
        Ks=np.zeros((N, m, n)),
        ds=np.zeros((N, m)),
        Qu=np.zeros((N, m)),
        Qux=np.zeros((N, m, n)),
        Quu=np.zeros((N, m, m)),
        Quu_inv=np.zeros((N, m, m)),
        active_ids=[()] * N,
        cache=cache,
    )
    Vx, Vxx = cost.final_derivatives(traj.xs[N])
    reg_eye = reg * np.eye(m)
    memory = active_memory if active_memory is not None else [set()] * N
    has_items = base.n_constraints > 0
    full_mode = options.second_order == "full"
    for k in range(N - 1, -1, -1):
        if not np.all(np.isfinite(Vx)):
            raise _NotPositiveDefinite(k)  # value recursion collapsed; re-regularize
        fx, fu = cache.fx[k], cache.fu[k]
        Qx, Qu, Qxx, Quu, Qxu = _q_derivs_raw(
            Vx, Vxx, fx, fu, cache.lx[k], cache.lu[k], cache.lxx, cache.luu, cache.lxu
        )
        if full_mode:
            txx, tuu, txu = dynamics_tensor_terms(
                model, traj.xs[k], traj.us[k], Vx, options.fd_step
            )
            Qxx = Qxx + txx
            Quu = Quu + tuu
            Qxu = Qxu + txu
        Quu = 0.5 * (Quu + Quu.T) + reg_eye
        try:
            np.linalg.cholesky(Quu)
            quu_inv = np.linalg.inv(Quu)
        except np.linalg.LinAlgError:
            raise _NotPositiveDefinite(k)
        quu_inv = 0.5 * (quu_inv + quu_inv.T)
        Qux = Qxu.T

        if has_items and cache.row_vals_max[k] >= -2.0 * options.activation_tol:
            vals, C, D, degen, ids = cache.rows[k]
            Ca, Da, _, act, _ = select_active_rows(
                vals, C, D, degen, quu_inv, Qu, Qux, memory[k], options.activation_tol
            )
            act_ids = tuple(ids[i] for i in act)
            K, d, _ = constrained_gains(quu_inv, Qux, Qu, Ca, Da)
            if act:
                # A weakly controllable row demands corrections the bounded
                # QP never realizes; gains that inflated far beyond the
                # unconstrained ones would blow up both the value recursion
                # and covariance propagation. Leave such rows to the QP.
                K_unc, d_unc = unconstrained_gains(quu_inv, Qux, Qu)
                bound = options.constraint_gain_cap * max(
                    1.0, float(np.max(np.abs(K_unc)))
                )
                if float(np.max(np.abs(K))) > bound:
                    K, d = K_unc, d_unc
                    act_ids = ()
        else:
            act_ids = ()
            K, d = unconstrained_gains(quu_inv, Qux, Qu)

        Vx = Qx + K.T @ Qu + K.T @ (Quu @ d) + Qxu @ d
        Vxx = Qxx + K.T @ Quu @ K + K.T @ Qux + Qux.T @ K
        Vxx = 0.5 * (Vxx + Vxx.T)

        out.Ks[k] = K
        out.ds[k] = d
        out.Qu[k] = Qu
        out.Qux[k] = Qux
        out.Quu[k] = Quu
        out.Quu_inv[k] = quu_inv
        out.active_ids[k] = act_ids
    if active_memory is not None:
        for k in range(N):
            active_memory[k] = set(out.active_ids[k])
    return out


# -- forward pass ----------------------------------------------------------------


def forward_pass(
    traj: Trajectory,
    model: DynamicsModel,
    cost: CostModel,
    tightened: TightenedConstraintSet,
    bwd: BackwardData,
    u_min,
    u_max,
    trust_radius=math.inf,
    qp_feas_tol=1e-8,
    preview_window=0.5,
):
    """QP-driven rollout from x0. Returns (new Trajectory | None, feasible, relaxed).

    Each step minimizes Qu'du + 0.5 du'Quu du + dx'Qxu du subject to the
    linearized tightened rows (current step plus the preview window) and the
    box u_min <= u + du <= u_max intersected with the trust region.

    A step whose rows conflict with the box (noise offsets and fresh margins
    can both sit beyond one-step control authority) applies the least
    violating control from the feasibility sub-solve and the pass continues;
    `relaxed` counts such steps beyond the activation tolerance, and the
    caller's acceptance filter decides what to do with the resulting
    trajectory. Only a hard solver breakdown aborts (feasible=False).
    """
    N = traj.horizon
    base = tightened.base
    items = base.items
    n, m = model.n, model.m
    cache = bwd.cache
    xs = np.empty_like(traj.xs)
    us = np.empty_like(traj.us)
    xs[0] = traj.xs[0]
    x = xs[0]
    run_cost = 0.0
    relaxed = 0
    u_rows = [(i, it) for i, it in enumerate(items) if it.depends_on_u]
    for k in range(N):
        u_nom = traj.us[k]
        dx = x - traj.xs[k]
        qlin = bwd.Qu[k] + bwd.Qux[k] @ dx
        box_lo = u_min - u_nom
        box_hi = u_max - u_nom
        if math.isinf(trust_radius):
            lo, hi = box_lo, box_hi
        else:
            # Center the trust box on the feedback correction so a shrinking
            # radius degrades toward the stabilizing closed-loop rollout, not
            # toward an open-loop replay (fatal on unstable plants).
            du_fb = np.clip(bwd.Ks[k] @ dx, box_lo, box_hi)
            lo = np.maximum(box_lo, du_fb - trust_radius)
            hi = np.minimum(box_hi, du_fb + trust_radius)

        A = None
        bvec = None
        if items:
            dust = 10.0 * qp_feas_tol
            drift = float(np.linalg.norm(dx))
            near = (
                cache.window_max[k] + 2.0 * cache.lipschitz * drift > -preview_window
            )
            blocks_A = []
            blocks_v = []
            if near:
                x_pred = model.step(x, u_nom)
                _, fu_here = model.jacobians(x, u_nom)
                for i, item in enumerate(items):
                    if item.depends_on_u:
                        continue
                    v = item.value(x_pred) + tightened.margins[k + 1, i]
                    gx, bad = item.grad_x(x_pred, n)
                    if bad:
                        continue  # gradient undefined: momentarily inactive
                    a = gx @ fu_here
                    if np.max(np.abs(a)) <= RANK_TOL:
                        continue  # row not controllable from this step
                    blocks_A.append(a)
                    blocks_v.append(v)
                pv = cache.preview[k]
                if pv is not None:
                    pA, pv_nom, pS, pitem = pv
                    v = pv_nom + pS @ dx
                    # Rows of one obstacle at adjacent steps are nearly
                    # parallel; keep only the most binding one per item to
                    # avoid degenerate (cycling) step QPs.
                    for item_idx in np.unique(pitem):
                        sel = np.where(pitem == item_idx)[0]
                        r = sel[np.argmax(v[sel])]
                        if v[r] >= -preview_window and np.max(np.abs(pA[r])) > RANK_TOL:
                            blocks_A.append(pA[r])
                            blocks_v.append(v[r])
            for i, item in u_rows:
                blocks_A.append(item.grad_u(x, u_nom, m))
                blocks_v.append(item.value(x, u_nom) + tightened.margins[k, i])
            if blocks_A:
                A = np.asarray(blocks_A)
                v_arr = np.asarray(blocks_v)
                # Tiny positive values are boundary-riding dust; allow holding
                # position there instead of forcing an infeasible pull-back.
                bvec = -v_arr + np.minimum(np.maximum(v_arr, 0.0), dust)

        du = -(bwd.Quu_inv[k] @ qlin)
        ok_fast = bool(np.all(du >= lo - 1e-12) and np.all(du <= hi + 1e-12))
        if ok_fast and A is not None:
            ok_fast = bool(np.all(A @ du <= bvec + qp_feas_tol))
        if not ok_fast:
            du, _, _, status, _ = solve_qp_raw(
                bwd.Quu[k], qlin, A, bvec, lo, hi, feas_tol=qp_feas_tol
            )
            if status == "infeasible":
                worst = float(np.max(A @ du - bvec)) if A is not None else 0.0
                if worst > ACTIVE_TOL:
                    relaxed += 1  # du is the least-violating point from phase 1
                # else: boundary-riding overshoot below the activation
                # tolerance; holding the least-violating control is fine.
            elif status != "optimal":
                return None, False, relaxed
        u = np.clip(u_nom + du, u_min, u_max)
        us[k] = u
        run_cost += cost.running(x, u)
        x = model.step(x, u)
        xs[k + 1] = x
    new = Trajectory(xs, us, bwd.Ks.copy(), bwd.ds.copy())
    new.cost = run_cost + cost.final(xs[N])
    return new, True, relaxed


# -- full solve -------------------------------------------------------------------


@dataclass
class SolveResult:
    trajectory: Trajectory
    tightened: TightenedConstraintSet
    iterations: int
    diagnostics: list
    converged: bool
    failed: bool  # no forward pass was ever accepted (plan returned unchanged)
    stalls: int = 0  # iterations that exhausted their retries


def solve(
    initial: Trajectory,
    model: DynamicsModel,
    cost: CostModel,
    constraint_set: ConstraintSet,
    options: DdpOptions | None = None,
    beta=None,
    diag=None,
    bootstrap: bool = True,
) -> SolveResult:
    """Iterate backward/forward passes with periodic chance retightening.

    With bootstrap=True the first n2 iterations run against the raw
    (deterministic) constraints -- tightening needs feedback gains, which do
    not exist before the first backward pass. At the start of every later
    iteration with index divisible by n2, margins are recomputed from
    closed-loop covariance propagation under the latest gains. A receding-
    horizon caller whose incoming plan already carries gains can pass
    bootstrap=False to tighten from the first iteration.

    Failed forward passes escalate regularization; rejected ones shrink the
    trust region, up to `max_retries` attempts per iteration.
    """
    from .chance import retighten  # local import to avoid a cycle

    options = options or DdpOptions()
    traj = initial.copy()
    if math.isnan(traj.cost):
        traj.cost = cost.trajectory_cost(traj.xs, traj.us)
    N = traj.horizon
    u_min, u_max = constraint_set.u_min, constraint_set.u_max
    trust0 = options.initial_trust(u_min, u_max)
    tightened = untightened(constraint_set, N + 1)
    sigma0 = options.sigma0_matrix(model.n)
    reg = options.reg_init
    active_memory = [set() for _ in range(N)]
    diagnostics = []
    stalls = 0
    accepted_any = False
    # The incoming nominal may mix a fresh measurement with stale plan states
    # (MPC shift), so its summed cost is not a meaningful bar: the first
    # accepted pass establishes the cost baseline. Its constraint values are
    # meaningful, and gate the first pass against diving through a boundary.
    cost_baseline = math.inf
    viol_baseline = tightened.max_violation(traj.xs, traj.us)
    prev_cost = traj.cost
    it = 0
    min_tight_iter = options.n2 if bootstrap else 0
    skip_to = -1
    for it in range(options.n1):
        if it < skip_to:
            continue  # stalled ladder would repeat identically until retighten
        if (it > 0 or not bootstrap) and it % options.n2 == 0:
            tightened = retighten(
                traj, model, constraint_set, sigma0, beta=beta, n_steps=N + 1
            )
            # New constraint system: rebase the acceptance filter on the
            # current trajectory as seen by the new margins.
            cost_baseline = traj.cost if it > 0 else math.inf
            viol_baseline = tightened.max_violation(traj.xs, traj.us)
        cache = build_nominal_cache(traj, model, cost, tightened, options)
        trust = trust0
        accepted = False
        degraded = False
        restoring = viol_baseline > options.activation_tol
        best = None
        best_key = (math.inf, math.inf)
        bwd = None
        bwd_reg = None
        for _ in range(options.max_retries + 1):
            if bwd is None or bwd_reg != reg:
                try:
                    bwd = backward_pass(
                        traj, model, cost, tightened, reg, options, active_memory,
                        cache=cache,
                    )
                    bwd_reg = reg
                except _NotPositiveDefinite:
                    bwd = None
                    reg = min(max(reg * 10.0, options.reg_floor), options.reg_max)
                    continue
            new_traj, feasible, relaxed = forward_pass(
                traj, model, cost, tightened, bwd, u_min, u_max,
                trust_radius=trust, qp_feas_tol=options.qp_feas_tol,
                preview_window=options.preview_value_window,
            )
            if feasible:
                viol_new = tightened.max_violation(new_traj.xs, new_traj.us)
                if restoring:
                    # Restoration phase: a freshly tightened margin left the
                    # nominal infeasible; drive violation down, cost is free.
                    ok = viol_new <= viol_baseline + 1e-9
                else:
                    ok = (
                        viol_new <= options.activation_tol
                        and new_traj.cost <= cost_baseline + options.cost_increase_tol
                    )
                if ok:
                    traj = new_traj
                    cost_baseline = new_traj.cost
                    viol_baseline = viol_new
                    accepted = True
                    accepted_any = True
                    reg = reg * 0.5 if reg * 0.5 >= options.reg_floor else 0.0
                    break
                key = (max(viol_new - options.activation_tol, 0.0), new_traj.cost)
                if key < best_key:
                    best = (new_traj, viol_new)
                    best_key = key
                # Rejected pass: a smaller step usually cures the overshoot.
                trust *= 0.5
            else:
                # Hard failure inside the pass: regularize and shrink.
                reg = min(max(reg * 10.0, options.reg_floor), options.reg_max)
                trust *= 0.5
        if not accepted and best is not None:
            # No pass met the filter (margins or the measured state may sit
            # beyond what the bounded controls can satisfy). Keep the least
            # violating complete pass rather than dead-ending; flagged so the
            # monotone-improvement property only covers clean acceptances.
            traj, viol_baseline = best
            cost_baseline = traj.cost
            accepted = True
            accepted_any = True
            degraded = True
        if not accepted:
            # Retries exhausted: keep the current trajectory and move on; a
            # later iteration (or the next retightening) may unblock it.
            stalls += 1
            viol_now = tightened.max_violation(traj.xs, traj.us)
            record = {
                "iter": it,
                "cost": traj.cost,
                "max_violation": viol_now,
                "reg": reg,
                "trust": trust,
                "accepted": False,
            }
            diagnostics.append(record)
            if diag:
                diag(record)
            if (
                accepted_any
                and viol_now <= options.activation_tol
                and (it >= min_tight_iter or constraint_set.n_constraints == 0)
            ):
                # Feasible, margins in effect, and no pass improves on it:
                # the plan is as converged as the tolerances allow.
                break
            nxt = (it // options.n2 + 1) * options.n2
            if nxt >= options.n1:
                break  # no retightening left; nothing can change
            skip_to = nxt
            continue
        max_viol = tightened.max_violation(traj.xs, traj.us)
        record = {
            "iter": it,
            "cost": traj.cost,
            "max_violation": max_viol,
            "reg": reg,
            "trust": trust,
            "accepted": True,
            "degraded": degraded,
        }
        diagnostics.append(record)
        if diag:
            diag(record)
        tightened_active = it >= min_tight_iter or constraint_set.n_constraints == 0
        if (
            options.early_stop
            and tightened_active
            and it >= min_tight_iter + 1
            and abs(prev_cost - traj.cost) <= options.early_stop_tol * max(1.0, abs(traj.cost))
            and max_viol <= options.activation_tol
        ):
            prev_cost = traj.cost
            break
        prev_cost = traj.cost

    if reg > options.reg_floor and accepted_any:
        # High regularization detunes the stored feedback gains, and the next
        # retightening would inherit inflated covariances from them. Refresh
        # the gains on the final trajectory at the lowest workable reg.
        cache = build_nominal_cache(traj, model, cost, tightened, options)
        for r in (0.0, options.reg_floor, reg):
            try:
                bwd = backward_pass(
                    traj, model, cost, tightened, r, options, active_memory,
                    cache=cache,
                )
                traj.Ks = bwd.Ks
                traj.ds = bwd.ds
                break
            except _NotPositiveDefinite:
                continue

    failed = not accepted_any
    if failed:
        viol = tightened.max_violation(initial.xs, initial.us)
        if viol > options.activation_tol:
            raise SolverError(
                f"no feasible forward pass; initial violation {viol:.3e}"
            )
    return SolveResult(
        trajectory=traj,
        tightened=tightened,
        iterations=it + 1,
        diagnostics=diagnostics,
        converged=stalls == 0,
        failed=failed,
        stalls=stalls,
    )
