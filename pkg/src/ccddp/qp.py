"""Dense convex QP solver (primal active set) for small control-sized problems.

Solves

    min_z  0.5 z'Hz + q'z
    s.t.   A z <= b,   lower <= z <= upper

with H positive definite. Bounds are folded into the constraint system as
rows -e_i'z <= -lower_i and e_i'z <= upper_i; the reported row numbering is

    0 .. c-1          general rows (A, b)
    c .. c+m-1        lower bounds
    c+m .. c+2m-1     upper bounds

The working set starts empty at a feasible point and grows one blocking row
at a time, so its rows stay linearly independent by construction. Equality
subproblems are solved through a Cholesky factorization of H and a Schur
complement on the working-set rows, refactored on every working-set change.
Ties in the blocking-row selection are broken toward the lowest row index so
repeated runs are identical.

Infeasible problems are certified by a phase-1 slack minimization
(min 0.5 t^2 over A z - t <= b, z in bounds, t >= 0), driven to the true
minimum slack by proximal re-anchoring, which avoids an ill-conditioned
Hessian while keeping the certificate sharp.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_FEAS_TOL = 1e-8
DEFAULT_STAT_TOL = 1e-7


@dataclass
class QpProblem:
    """Quadratic program data. H is symmetrized on construction."""

    H: np.ndarray
    q: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.q = np.asarray(self.q, dtype=float).ravel()
        m = self.q.size
        if self.H.shape != (m, m):
            raise ValueError(f"H shape {self.H.shape} does not match q size {m}")
        asym = np.max(np.abs(self.H - self.H.T)) if m else 0.0
        if asym > 1e-10:
            raise ValueError(f"H asymmetry {asym:.3e} exceeds 1e-10")
        self.H = 0.5 * (self.H + self.H.T)
        if self.A is None:
            self.A = np.zeros((0, m))
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if self.A.size == 0:
            self.A = self.A.reshape(0, m)
        if self.b is None:
            self.b = np.zeros(self.A.shape[0])
        self.b = np.asarray(self.b, dtype=float).ravel()
        if self.A.shape != (self.b.size, m):
            raise ValueError(
                f"A shape {self.A.shape} inconsistent with b size {self.b.size}, m={m}"
            )
        self.lower = (
            np.full(m, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float).ravel()
        )
        self.upper = (
            np.full(m, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float).ravel()
        )
        if self.lower.size != m or self.upper.size != m:
            raise ValueError("bound vectors must match variable count")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def n_vars(self) -> int:
        return self.q.size

    @property
    def n_rows(self) -> int:
        return self.b.size


@dataclass
class QpSolution:
    """Solver output. `active_indices` / `multipliers` use the extended row numbering."""

    z_star: np.ndarray
    active_indices: tuple[int, ...]
    multipliers: np.ndarray
    status: str  # "optimal" | "infeasible" | "max_iterations"
    iterations: int = 0
    phase1_slack: float = 0.0

    def multiplier_for(self, row: int) -> float:
        """Multiplier of an extended row index, zero when inactive."""
        try:
            return float(self.multipliers[self.active_indices.index(row)])
        except ValueError:
            return 0.0


@dataclass
class _Work:
    """Extended constraint system: rows `ext_A z <= ext_b`, labeled by reported index."""

    ext_A: np.ndarray
    ext_b: np.ndarray
    labels: np.ndarray = field(default=None)


def _extend(A, b, lower, upper):
    m = lower.size
    c = b.size
    rows = [A]
    rhs = [b]
    labels = [np.arange(c)]
    lo_idx = np.where(np.isfinite(lower))[0]
    if lo_idx.size:
        E = np.zeros((lo_idx.size, m))
        E[np.arange(lo_idx.size), lo_idx] = -1.0
        rows.append(E)
        rhs.append(-lower[lo_idx])
        labels.append(c + lo_idx)
    up_idx = np.where(np.isfinite(upper))[0]
    if up_idx.size:
        E = np.zeros((up_idx.size, m))
        E[np.arange(up_idx.size), up_idx] = 1.0
        rows.append(E)
        rhs.append(upper[up_idx])
        labels.append(c + m + up_idx)
    return _Work(np.vstack(rows), np.concatenate(rhs), np.concatenate(labels))


def _active_set_core(H, q, work: _Work, z0, max_iter, feas_tol):
    """Primal active-set loop from a feasible z0 with an empty working set.

    Returns (z, working (list of ext row positions), lam, n_iter, converged).
    """
    Hinv = np.linalg.inv(H)

    z = z0.copy()
    h_unc = -(Hinv @ q)
    working: list[int] = []
    banned: set[int] = set()
    lam = np.zeros(0)
    EA, eb, labels = work.ext_A, work.ext_b, work.labels
    n_rows = eb.size
    zero_steps = 0
    for it in range(1, max_iter + 1):
        if zero_steps > 4 * (z.size + len(working) + 1):
            break  # degenerate cycling; give up rather than spin
        if working:
            Aw = EA[working]
            Y = Hinv @ Aw.T
            S = Aw @ Y
            try:
                lam = np.linalg.solve(S, Aw @ h_unc - eb[working])
            except np.linalg.LinAlgError:
                # Numerically dependent row slipped in; back the latest one out.
                banned.add(working.pop())
                continue
            z_eq = h_unc - Y @ lam
        else:
            lam = np.zeros(0)
            z_eq = h_unc
        p = z_eq - z
        scale = max(1.0, float(np.max(np.abs(z_eq))))
        if np.max(np.abs(p), initial=0.0) <= 1e-13 * scale:
            if lam.size == 0 or np.min(lam) >= -1e-11:
                return z_eq, working, lam, it, True
            # Drop the most negative multiplier; lowest reported index wins ties.
            worst = np.min(lam)
            cands = [working[i] for i in range(lam.size) if lam[i] <= worst + 1e-15]
            drop = min(cands, key=lambda pos: labels[pos])
            working.remove(drop)
            banned.discard(drop)
            continue
        # Ratio test over rows outside the working set.
        pscale = max(1.0, float(np.max(np.abs(p))))
        advance = EA @ p
        live = advance > 1e-13 * pscale
        for pos in working:
            live[pos] = False
        for pos in banned:
            live[pos] = False
        alpha = 1.0
        block = -1
        if np.any(live):
            slack = np.maximum(eb - EA @ z, 0.0)
            ratios = np.full(n_rows, np.inf)
            ratios[live] = slack[live] / advance[live]
            amin = float(np.min(ratios))
            if amin < alpha + 1e-14:
                alpha = min(alpha, amin)
                tied = np.where(ratios <= alpha + 1e-14)[0]
                block = int(tied[np.argmin(labels[tied])])
        z = z + alpha * p
        zero_steps = zero_steps + 1 if alpha <= 1e-14 else 0
        if block >= 0:
            working.append(block)
        # alpha == 1 with no block: z now sits at the EQP solution; next loop checks lam.
    return z, working, lam, max_iter, False


def _phase1(work: _Work, lower, upper, z0, max_iter, feas_tol, prox_iters=20):
    """Minimum-slack feasibility solve. Returns (z_feasible_or_best, slack, iters)."""
    m = z0.size
    n_rows = work.ext_b.size
    eps = 1e-6
    Hp = np.diag(np.concatenate([np.full(m, eps), [1.0]]))
    # Rows A z - t <= b plus t >= 0, in (z, t) coordinates.
    EA = np.hstack([work.ext_A, -np.ones((n_rows, 1))])
    EA = np.vstack([EA, np.concatenate([np.zeros(m), [-1.0]])])
    eb = np.concatenate([work.ext_b, [0.0]])
    labels = np.concatenate([work.labels, [work.labels.max(initial=0) + 1]])
    p1 = _Work(EA, eb, labels)
    anchor = z0.copy()
    total_it = 0
    t_val = float(np.max(work.ext_A @ z0 - work.ext_b, initial=0.0))
    z = z0.copy()
    for _ in range(prox_iters):
        qp1 = np.concatenate([-eps * anchor, [0.0]])
        zt0 = np.concatenate([anchor, [max(t_val, 0.0) * (1 + 1e-12) + 1e-15]])
        zt, _, _, it, _ = _active_set_core(Hp, qp1, p1, zt0, max_iter, feas_tol)
        total_it += it
        z = zt[:m]
        t_new = float(np.max(work.ext_A @ z - work.ext_b, initial=0.0))
        if t_new <= feas_tol:
            return z, t_new, total_it
        if abs(t_val - t_new) <= 1e-12 * max(1.0, t_val) and np.allclose(anchor, z):
            break
        anchor = z
        t_val = t_new
    return z, t_val, total_it


def solve_qp_raw(
    H,
    q,
    A=None,
    b=None,
    lower=None,
    upper=None,
    feas_tol=DEFAULT_FEAS_TOL,
    max_iter=None,
    phase1_iters=20,
):
    """Low-level entry used by the forward pass; skips QpProblem validation.

    Returns (z, labels, multipliers, status, iterations).
    """
    q = np.asarray(q, dtype=float).ravel()
    m = q.size
    H = np.asarray(H, dtype=float)
    if A is None or (hasattr(A, "shape") and A.shape[0] == 0):
        A = np.zeros((0, m))
        b = np.zeros(0)
    else:
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.asarray(b, dtype=float).ravel()
    if lower is None:
        lower = np.full(m, -np.inf)
    if upper is None:
        upper = np.full(m, np.inf)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if max_iter is None:
        max_iter = 100 * (m + b.size)

    h_unc = np.linalg.solve(H, -q)
    if b.size == 0 and not (np.any(np.isfinite(lower)) or np.any(np.isfinite(upper))):
        return h_unc, (), np.zeros(0), "optimal", 1

    work = _extend(A, b, lower, upper)
    z0 = np.clip(h_unc, lower, upper)
    slack0 = float(np.max(work.ext_A @ z0 - work.ext_b, initial=0.0))
    phase1_slack = 0.0
    total_it = 0
    if slack0 > feas_tol:
        z0, phase1_slack, it1 = _phase1(
            work, lower, upper, z0, max_iter, feas_tol, prox_iters=phase1_iters
        )
        total_it += it1
        if phase1_slack > feas_tol:
            return z0, (), np.zeros(0), "infeasible", total_it

    z, working, lam, it, ok = _active_set_core(H, q, work, z0, max_iter, feas_tol)
    total_it += it
    if not ok:
        # Iteration cap: z is feasible but multipliers may be stale.
        return z, (), np.zeros(0), "max_iterations", total_it
    # Active bound components are exact equalities; write the bound value back
    # instead of the reconstructed float (keeps clamp-equivalence bitwise).
    c = b.size
    for pos in working:
        label = int(work.labels[pos])
        if c <= label < c + m:
            z[label - c] = lower[label - c]
        elif label >= c + m:
            z[label - c - m] = upper[label - c - m]
    order = np.argsort([work.labels[pos] for pos in working]) if working else []
    labels = tuple(int(work.labels[working[i]]) for i in order)
    mults = np.array([lam[i] for i in order]) if len(working) else np.zeros(0)
    mults = np.maximum(mults, 0.0)  # clip -1e-11-grade float dust
    return z, labels, mults, "optimal", total_it


def solve_qp(problem: QpProblem, feas_tol=DEFAULT_FEAS_TOL, max_iter=None) -> QpSolution:
    """Solve a validated QpProblem; see module docstring for conventions."""
    z, labels, mults, status, iters = solve_qp_raw(
        problem.H,
        problem.q,
        problem.A,
        problem.b,
        problem.lower,
        problem.upper,
        feas_tol=feas_tol,
        max_iter=max_iter,
    )
    return QpSolution(
        z_star=z,
        active_indices=labels,
        multipliers=mults,
        status=status,
        iterations=iters,
    )


def kkt_residual(problem: QpProblem, sol: QpSolution) -> float:
    """Infinity norm of the stationarity residual H z* + q + sum(lam_i a_i)."""
    r = problem.H @ sol.z_star + problem.q
    c = problem.n_rows
    m = problem.n_vars
    for idx, lam in zip(sol.active_indices, sol.multipliers):
        if idx < c:
            r = r + lam * problem.A[idx]
        elif idx < c + m:
            r[idx - c] -= lam
        else:
            r[idx - c - m] += lam
    return float(np.max(np.abs(r), initial=0.0))
