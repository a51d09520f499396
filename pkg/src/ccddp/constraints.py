"""Inequality constraints g(x, u) <= 0, linearization, and chance tightening.

Obstacles use the signed-distance form g = r - ||p - c|| so the gradient has
unit norm away from the center and the tightening margin reads directly as a
distance. Squared-distance forms would scale the margin with range.

Tightening replaces a probabilistic requirement Pr[g <= 0] > beta with the
deterministic surrogate

    g(x, u) + quantile(beta) * sqrt(g_x' Sigma_x g_x) <= 0

evaluated with per-step state covariances Sigma_x along a nominal trajectory.
The standard normal quantile is computed here by bisection on an internally
implemented normal CDF (erf by series / continued fraction), so results do
not depend on any external math library.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import NumericalError

_SQRT_PI = math.sqrt(math.pi)
_SQRT_2 = math.sqrt(2.0)

GRAD_EPS = 1e-9  # below this gradient norm an obstacle row is degenerate


# -- constraint items ----------------------------------------------------------


@dataclass(frozen=True)
class ObstacleConstraint:
    """Circular (or cylindrical) keep-out region over selected position coords.

    g(x) = radius - ||x[indices] - center||. A cylinder along an axis is the
    same constraint over the two transverse coordinates.
    """

    center: np.ndarray
    radius: float
    indices: tuple[int, ...] = (0, 1)
    kind: str = "circle"

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.radius <= 0:
            raise ValueError("obstacle radius must be positive")
        if self.center.shape != (len(self.indices),):
            raise ValueError("obstacle center does not match its position indices")

    depends_on_u = False

    def value(self, x, u=None):
        d = np.asarray(x, dtype=float)[list(self.indices)] - self.center
        return self.radius - float(np.sqrt(d @ d))

    def grad_x(self, x, n):
        g = np.zeros(n)
        d = np.asarray(x, dtype=float)[list(self.indices)] - self.center
        norm = float(np.sqrt(d @ d))
        if norm < GRAD_EPS:
            return g, True  # at the center: gradient undefined, flagged
        g[list(self.indices)] = -d / norm
        return g, False

    def grad_u(self, x, u, m):
        return np.zeros(m)

    def value_batch(self, xs):
        d = np.asarray(xs, dtype=float)[:, list(self.indices)] - self.center
        return self.radius - np.sqrt(np.einsum("ij,ij->i", d, d))

    def grad_x_batch(self, xs, n):
        xs = np.asarray(xs, dtype=float)
        G = np.zeros((xs.shape[0], n))
        d = xs[:, list(self.indices)] - self.center
        norm = np.sqrt(np.einsum("ij,ij->i", d, d))
        bad = norm < GRAD_EPS
        safe = np.where(bad, 1.0, norm)
        G[:, list(self.indices)] = -d / safe[:, None]
        G[bad] = 0.0
        return G, bad


@dataclass(frozen=True)
class AffineConstraint:
    """g(x, u) = a'x + b'u + c <= 0."""

    a: np.ndarray
    b: np.ndarray
    c: float
    kind: str = "affine"

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))

    @property
    def depends_on_u(self):
        return bool(np.any(self.b != 0.0))

    def value(self, x, u=None):
        out = float(self.a @ np.asarray(x, dtype=float)) + self.c
        if u is not None and self.b.size:
            out += float(self.b @ np.asarray(u, dtype=float))
        return out

    def grad_x(self, x, n):
        if self.a.shape != (n,):
            raise ValueError("affine state coefficient length mismatch")
        return self.a.copy(), False

    def grad_u(self, x, u, m):
        if self.b.size == 0:
            return np.zeros(m)
        if self.b.shape != (m,):
            raise ValueError("affine control coefficient length mismatch")
        return self.b.copy()

    def value_batch(self, xs):
        return np.asarray(xs, dtype=float) @ self.a + self.c

    def grad_x_batch(self, xs, n):
        T = np.asarray(xs).shape[0]
        return np.tile(self.a, (T, 1)), np.zeros(T, dtype=bool)


@dataclass(frozen=True)
class Linearization:
    """First-order model of g about a nominal point.

    g(x+dx, u+du) ~= g0 + C du - D dx, with C = g_u and D = -g_x. Rows whose
    state gradient is numerically undefined are flagged in `degenerate` and
    are treated as momentarily inactive by callers.
    """

    g0: np.ndarray
    C: np.ndarray
    D: np.ndarray
    degenerate: np.ndarray


@dataclass
class ConstraintSet:
    """The scenario's inequality constraints plus control box bounds."""

    items: list
    u_min: np.ndarray
    u_max: np.ndarray
    beta: np.ndarray = field(default=None)

    def __post_init__(self):
        self.u_min = np.asarray(self.u_min, dtype=float)
        self.u_max = np.asarray(self.u_max, dtype=float)
        if self.u_min.shape != self.u_max.shape:
            raise ValueError("u_min/u_max shape mismatch")
        if np.any(self.u_min > self.u_max):
            raise ValueError("u_min exceeds u_max")
        c = len(self.items)
        if self.beta is None:
            self.beta = np.full(c, 0.5)
        elif np.isscalar(self.beta):
            self.beta = np.full(c, float(self.beta))
        else:
            self.beta = np.asarray(self.beta, dtype=float)
            if self.beta.shape != (c,):
                raise ValueError("beta length must match constraint count")
        if c and (np.any(self.beta < 0.5) or np.any(self.beta >= 1.0)):
            raise ValueError("beta entries must lie in [0.5, 1)")

    @property
    def n_constraints(self):
        return len(self.items)

    def with_beta(self, beta):
        return ConstraintSet(self.items, self.u_min, self.u_max, beta)

    def evaluate(self, x, u=None):
        """Stacked g(x, u); entries <= 0 are satisfied."""
        return np.array([it.value(x, u) for it in self.items])

    def linearize(self, x, u, n=None, m=None) -> Linearization:
        n = len(x) if n is None else n
        m = len(u) if m is None else m
        c = len(self.items)
        g0 = np.empty(c)
        C = np.zeros((c, m))
        D = np.zeros((c, n))
        degen = np.zeros(c, dtype=bool)
        for i, it in enumerate(self.items):
            g0[i] = it.value(x, u)
            gx, bad = it.grad_x(x, n)
            D[i] = -gx
            degen[i] = bad
            if it.depends_on_u:
                C[i] = it.grad_u(x, u, m)
        return Linearization(g0=g0, C=C, D=D, degenerate=degen)

    def state_gradients(self, x, n):
        """g_x rows at x (zeros for degenerate rows), for margin computation."""
        G = np.zeros((len(self.items), n))
        for i, it in enumerate(self.items):
            gx, bad = it.grad_x(x, n)
            if not bad:
                G[i] = gx
        return G


class TightenedConstraintSet:
    """A ConstraintSet plus cached per-step margins along a nominal trajectory.

    Margins stay fixed until the next tightening call, so repeated backward
    and forward passes between tightenings see a stable constraint system.
    """

    def __init__(self, base: ConstraintSet, margins: np.ndarray):
        margins = np.asarray(margins, dtype=float)
        if margins.ndim != 2 or margins.shape[1] != base.n_constraints:
            raise ValueError("margins must be (steps, n_constraints)")
        if np.any(margins < 0):
            raise ValueError("margins must be nonnegative")
        self.base = base
        self.margins = margins

    @property
    def n_steps(self):
        return self.margins.shape[0]

    def evaluate_step(self, k, x, u=None):
        """Tightened values g(x,u) + margin_k at horizon step k."""
        return self.base.evaluate(x, u) + self.margins[k]

    def max_violation(self, xs, us=None):
        """Largest tightened value along a trajectory (<= 0 means feasible)."""
        worst = -np.inf
        if self.base.n_constraints == 0:
            return worst
        for k in range(min(len(xs), self.n_steps)):
            u = us[k] if us is not None and k < len(us) else None
            worst = max(worst, float(np.max(self.evaluate_step(k, xs[k], u))))
        return worst


def untightened(base: ConstraintSet, n_steps: int) -> TightenedConstraintSet:
    """Zero-margin wrapper: the deterministic bootstrap view of a ConstraintSet."""
    return TightenedConstraintSet(base, np.zeros((n_steps, base.n_constraints)))


def tighten(
    base: ConstraintSet,
    xs,
    sigmas,
    beta=None,
) -> TightenedConstraintSet:
    """Chance margins from per-step covariances along the nominal states `xs`.

    margin[k, i] = quantile(beta_i) * sqrt(g_x' Sigma_k g_x) with g_x taken on
    the nominal trajectory. Inner values in [-1e-12, 0] are clamped to zero;
    anything more negative means a broken covariance and raises.
    """
    xs = np.asarray(xs, dtype=float)
    if len(sigmas) != len(xs):
        raise ValueError("need one covariance per trajectory state")
    c = base.n_constraints
    betas = base.beta if beta is None else np.full(c, float(beta))
    quants = np.array([inv_normal_cdf(b) for b in betas]) if c else np.zeros(0)
    n = xs.shape[1] if xs.ndim == 2 else 0
    margins = np.zeros((len(xs), c))
    for k, x in enumerate(xs):
        sigma = sigmas[k]
        if c == 0 or not np.any(sigma):
            continue
        G = base.state_gradients(x, n)
        inner = np.einsum("ij,jk,ik->i", G, sigma, G)
        bad = inner < -1e-12
        if np.any(bad):
            raise NumericalError(f"negative variance {inner.min():.3e} at step {k}")
        inner = np.maximum(inner, 0.0)
        margins[k] = quants * np.sqrt(inner)
    return TightenedConstraintSet(base, margins)


# -- standard normal quantile ---------------------------------------------------


def _erf_series(x):
    # erf(x) = 2/sqrt(pi) * exp(-x^2) * sum_{n>=0} x^(2n+1) 2^n / (1*3*...*(2n+1));
    # all terms positive, so no cancellation.
    t = x
    s = t
    for nn in range(1, 200):
        t *= 2.0 * x * x / (2.0 * nn + 1.0)
        s += t
        if t < 1e-18 * s:
            break
    return 2.0 / _SQRT_PI * math.exp(-x * x) * s


def _erfc_cf(x):
    # Legendre continued fraction, x > 0:
    # erfc(x) = exp(-x^2)/sqrt(pi) / (x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    tiny = 1e-300
    f = x if x != 0 else tiny
    c_ = f
    d = 0.0
    for i in range(1, 300):
        a = 0.5 * i
        d = x + a * d
        d = tiny if d == 0 else d
        c_ = x + a / c_
        c_ = tiny if c_ == 0 else c_
        d = 1.0 / d
        delta = c_ * d
        f *= delta
        if abs(delta - 1.0) < 1e-17:
            break
    return math.exp(-x * x) / _SQRT_PI / f


def erf(x: float) -> float:
    """Error function via positive-term series (|x|<=3) or continued fraction."""
    ax = abs(x)
    if ax <= 3.0:
        val = _erf_series(ax)
    else:
        val = 1.0 - _erfc_cf(ax)
    return val if x >= 0 else -val


def normal_cdf(t: float) -> float:
    """Standard normal CDF, accurate in both tails."""
    a = abs(t) / _SQRT_2
    if a <= 3.0:
        half = 0.5 * _erf_series(a)
        return 0.5 + half if t >= 0 else 0.5 - half
    tail = 0.5 * _erfc_cf(a)
    return 1.0 - tail if t >= 0 else tail


@lru_cache(maxsize=256)
def inv_normal_cdf(beta: float) -> float:
    """Standard normal quantile by bisection, absolute error below 1e-12."""
    beta = float(beta)
    if not 0.0 < beta < 1.0:
        raise ValueError(f"quantile argument must be in (0, 1), got {beta}")
    if beta == 0.5:
        return 0.0
    lo, hi = -12.0, 12.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        v = normal_cdf(mid)
        if v == beta:
            return mid
        if v < beta:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13:
            break
    return 0.5 * (lo + hi)
