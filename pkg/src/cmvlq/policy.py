"""Quadratic value functions on measures and the optimal affine feedback.

The value of the LQ problem is a quadratic functional of the measure,
parametrized by the backward-system solution.  Its measure derivatives are
available in closed form, which is what the verification layer exploits:
no derivative here is ever approximated numerically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import riccati as _riccati
from .errors import NonPositiveGain
from .lqmodel import PD_THRESHOLD, gains, lifted_terminal_cost
from .measure import EmpiricalMeasure, mean, variance_form


@dataclass(frozen=True)
class QuadraticFunctional:
    """phi(mu) = Var(mu)(L) + mubar'G mubar + g'mubar + c.

    Measure derivatives:
      d_mu  phi(mu)(x)      = 2 L (x - mubar) + 2 G mubar + g
      dx_dmu phi(mu)(x)     = 2 L
      d2_mu  phi(mu)(x, x') = 2 (G - L)
    """

    L: np.ndarray
    G: np.ndarray
    g: np.ndarray
    c: float

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.L, dtype=np.float64))
        G = np.atleast_2d(np.asarray(self.G, dtype=np.float64))
        g = np.asarray(self.g, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "c", float(self.c))

    @property
    def dim(self):
        return self.L.shape[0]

    def __call__(self, mu: EmpiricalMeasure):
        mbar = mean(mu)
        return (variance_form(mu, self.L) + float(mbar @ self.G @ mbar)
                + float(self.g @ mbar) + self.c)

    def d_mu(self, mu, x):
        mbar = mean(mu)
        x = np.asarray(x, dtype=np.float64)
        return 2.0 * (x - mbar) @ self.L.T + 2.0 * mbar @ self.G.T + self.g

    def dx_dmu(self):
        return 2.0 * self.L

    def d2_mu(self):
        return 2.0 * (self.G - self.L)


@dataclass(frozen=True)
class QuadraticValue:
    """The value function defined by a backward-system solution."""

    sol: _riccati.RiccatiSolution
    dyn: object
    cost: object

    @property
    def T(self):
        return self.sol.T

    def at(self, t):
        Lam, Gam, gam, chi = self.sol.eval(t)
        return QuadraticFunctional(Lam, Gam, gam, chi)


def value(qv: QuadraticValue, t, mu):
    """Value at (t, mu); at t = T this equals the lifted terminal cost."""
    return qv.at(t)(mu)


def value_derivatives(qv: QuadraticValue, t, mu, x, xp=None):
    """(d_t, d_mu at x, dx_dmu, d2_mu) of the value at (t, mu).

    d_t comes from the exact ODE right-hand sides evaluated at the
    interpolated coefficients, not from differencing the interpolant, so
    dynamic-programming residuals are exact up to solver error.
    """
    t = float(t)
    if not 0.0 <= t <= qv.T * (1.0 + 1e-12):
        raise ValueError(f"t={t} outside [0, {qv.T}]")
    Lam, Gam, gam, chi = qv.sol.eval(t)
    phi = QuadraticFunctional(Lam, Gam, gam, chi)
    dLam, dGam, dgam, dchi = _riccati.ode_rhs(Lam, Gam, gam, qv.dyn, qv.cost, t)
    mbar = mean(mu)
    d_t = (variance_form(mu, dLam) + float(mbar @ dGam @ mbar)
           + float(dgam @ mbar) + dchi)
    return d_t, phi.d_mu(mu, x), phi.dx_dmu(), phi.d2_mu()


@dataclass(frozen=True)
class FeedbackGains:
    """Feedback triple at one time: a(x, mubar) = K1 (x - mubar) + K2 mubar + k."""

    t: float
    K1: np.ndarray
    K2: np.ndarray
    k: np.ndarray

    def control(self, x, mubar):
        """Control at one point x (d,) or a particle block (N, d).

        A 1-d x of length d is one state; for scalar models (d = 1) a 1-d x
        of any other length is a batch of scalar states.
        """
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        mubar = np.asarray(mubar, dtype=np.float64).reshape(-1)
        d = self.K1.shape[1]
        if x.ndim == 1 and x.shape[0] != d:
            if d != 1:
                raise ValueError(f"state has length {x.shape[0]}, expected {d}")
            x = x[:, None]
        if x.ndim == 1:
            return self.K1 @ (x - mubar) + self.K2 @ mubar + self.k
        return (x - mubar) @ self.K1.T + mubar @ self.K2.T + self.k


def optimal_feedback(qv: QuadraticValue, t) -> FeedbackGains:
    """Minimizing feedback at time t: K1 = -U^{-1} S', K2 = -V^{-1} Z', k = -V^{-1} Y / 2.

    Linear systems are solved through Cholesky factors of U and V; a factor
    failure (or an eigenvalue at or below the threshold) raises
    NonPositiveGain.
    """
    Lam, Gam, gam, _ = qv.sol.eval(t)
    g = gains(t, Lam, Gam, gam, qv.dyn, qv.cost)
    if not g.pd_ok:
        which = "U" if g.min_eig_u <= PD_THRESHOLD else "V"
        raise NonPositiveGain(t, min(g.min_eig_u, g.min_eig_v), which)
    K1 = -_riccati._solve_pd(g.U, g.S.T, t, "U")
    K2 = -_riccati._solve_pd(g.V, g.Z.T, t, "V")
    k = -0.5 * _riccati._solve_pd(g.V, g.Y, t, "V")
    return FeedbackGains(t=float(t), K1=K1, K2=K2, k=k)


class FeedbackPolicy:
    """Time-indexed optimal feedback a(t, x, mu) = K1(t)(x - mubar) + K2(t) mubar + k(t).

    Affine in (x, mubar) with Lipschitz constant ||K1(t)|| in x.  Gains on a
    uniform time grid are cached so repeated simulations do not re-solve
    the same linear systems.
    """

    def __init__(self, qv: QuadraticValue):
        self.qv = qv
        self._grid_cache = {}

    def gains_at(self, t) -> FeedbackGains:
        return optimal_feedback(self.qv, t)

    def __call__(self, t, x, mubar):
        return self.gains_at(t).control(x, mubar)

    def grid_gains(self, t0, dt, n_steps, offset=0):
        """(K1, K2, k) stacked over the nodes t0 + (offset + k) dt.

        Node times are always computed from the base origin t0 and an
        integer step index, so a continuation started mid-grid sees
        bit-identical gains to the original run.
        """
        key = (float(t0), float(dt), int(n_steps), int(offset))
        if key not in self._grid_cache:
            d, m = self.qv.dyn.d, self.qv.dyn.m
            K1 = np.empty((n_steps, m, d))
            K2 = np.empty((n_steps, m, d))
            kk = np.empty((n_steps, m))
            for j in range(n_steps):
                fb = self.gains_at(t0 + (offset + j) * dt)
                K1[j], K2[j], kk[j] = fb.K1, fb.K2, fb.k
            self._grid_cache[key] = (K1, K2, kk)
        return self._grid_cache[key]


def recover_original(feedback, p: _riccati.SystemicRiskParams, t, x, mubar):
    """Borrowing/lending control of the interbank model.

    The model is solved in the shifted variable a_tilde = a - q(mubar - x);
    inverting the shift gives a = a_tilde - q(x - mubar), i.e.
    -(2 Lam(t) + q)(x - mubar) - 2 Gam(t) mubar - gam(t).  x may be a scalar
    state or a vector of particle states; the result matches its shape.
    """
    fb = feedback.gains_at(t) if isinstance(feedback, FeedbackPolicy) else feedback
    x = np.asarray(x, dtype=np.float64)
    scalar_in = x.ndim == 0
    xs = x.reshape(-1, 1)
    mubar = np.asarray(mubar, dtype=np.float64).reshape(-1)
    orig = fb.control(xs, mubar)[:, 0] - p.q * (xs[:, 0] - mubar[0])
    return float(orig[0]) if scalar_in else orig


def feedback_affine_map(fb: FeedbackGains, mubar):
    """The feedback at a fixed mean, as a plain affine map of x."""
    from .measure import AffineMap

    mubar = np.asarray(mubar, dtype=np.float64).reshape(-1)
    return AffineMap(fb.K1, (fb.K2 - fb.K1) @ mubar + fb.k)


def save_policy_csv(qv: QuadraticValue, path):
    """Feedback gains on the solver grid: t, K1 entries, K2 entries, k."""
    d, m = qv.dyn.d, qv.dyn.m
    cols = ["t"]
    cols += [f"K1_{i}{j}" for i in range(m) for j in range(d)]
    cols += [f"K2_{i}{j}" for i in range(m) for j in range(d)]
    cols += [f"k_{i}" for i in range(m)]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for t in qv.sol.grid:
            fb = optimal_feedback(qv, float(t))
            row = [float(t)]
            row += list(fb.K1.reshape(-1))
            row += list(fb.K2.reshape(-1))
            row += list(fb.k.reshape(-1))
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def terminal_consistency_gap(qv: QuadraticValue, mu):
    """|value(T, mu) - lifted terminal cost(mu)|, zero up to rounding."""
    return abs(value(qv, qv.T, mu) - lifted_terminal_cost(mu, qv.cost))
