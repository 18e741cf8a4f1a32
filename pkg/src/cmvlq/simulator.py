"""Interacting-particle approximation of controlled conditional
McKean-Vlasov dynamics.

One scenario is a cloud of N particles driven by per-particle idiosyncratic
Brownian increments plus one common-noise path shared by the whole cloud.
The conditional law entering the coefficients and the control at step k is
the empirical cloud at step k (explicit Euler coupling), so a step is a
deterministic function of the previous state and the stored increments and
any suffix can be replayed bitwise.

Randomness is counter-based: the normal draws of (path, step) come from a
Philox generator keyed by (seed, path_index) with the step index in the
counter block, so paths are independent streams and a step's noise can be
regenerated without replaying the stream.  Scalar LQ models with affine
controls run on a compiled kernel when available; the pure-numpy fallback
performs the identical sequence of floating-point operations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox

from . import backends
from .errors import NumericalBlowup
from .lqmodel import LqCost, LqDynamics
from .measure import AffineMap, EmpiricalMeasure, load_csv, mean, tree_mean, tree_sum

BLOWUP_LIMIT = 1e12
GRID_TOL = 1e-9
_INIT_PATH_TAG = 2**64 - 1


# ---------------------------------------------------------------------------
# counter-based noise

def _philox(seed, path_index, step):
    key = np.array([np.uint64(seed), np.uint64(path_index)], dtype=np.uint64)
    return Generator(Philox(key=key, counter=int(step) << 128))


def step_normals(seed, path_index, step, n_particles, n_idio, m0):
    """Standard normals for one step: common block first, then idiosyncratic."""
    gen = _philox(seed, path_index, step)
    z0 = gen.standard_normal(m0)
    zb = gen.standard_normal((n_particles, n_idio))
    return z0, zb


def _gen_noise(seed, path_index, step_offset, n_steps, n_particles, n_idio, m0, sqrt_dt):
    """Increments (already scaled by sqrt(dt)) for steps offset..offset+K-1.

    Re-keys a single Philox per step by resetting its counter block, which
    draws exactly what a fresh generator keyed at that step would.
    """
    key = np.array([np.uint64(seed), np.uint64(path_index)], dtype=np.uint64)
    bg = Philox(key=key)
    gen = Generator(bg)
    dw0 = np.empty((n_steps, m0))
    db = np.empty((n_steps, n_particles, n_idio))
    for j in range(n_steps):
        st = bg.state
        st["state"]["counter"] = np.array([0, 0, step_offset + j, 0], dtype=np.uint64)
        st["state"]["key"] = key
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        st["uinteger"] = 0
        bg.state = st
        dw0[j] = gen.standard_normal(m0) * sqrt_dt
        db[j] = gen.standard_normal((n_particles, n_idio)) * sqrt_dt
    return dw0, db


# ---------------------------------------------------------------------------
# model and control specifications

@dataclass(frozen=True)
class DynamicsSpec:
    """Coefficient interface of a controlled mean-field model.

    b(x, mu, a) -> (N, d); sigma(x, mu, a) -> (N, d, n);
    sigma0(x, mu, a) -> (N, d, m0); f(x, mu, a) -> (N,); g(x, mu) -> (N,).
    x is the particle block (N, d), mu the current empirical cloud, a the
    control values (N, m).  lq carries the affine/quadratic data when the
    model is linear-quadratic, which unlocks the fast scalar path.
    """

    d: int
    n: int
    m0: int
    m: int
    T: float
    b: object
    sigma: object
    sigma0: object
    f: object
    g: object
    lq: tuple = None


def lq_dynamics_spec(dyn: LqDynamics, cost: LqCost, T) -> DynamicsSpec:
    """Vectorized coefficients of the LQ model (one idio, one common noise)."""

    def b(x, mu, a):
        return dyn.b0 + x @ dyn.B.T + mean(mu) @ dyn.Bbar.T + a @ dyn.C.T

    def sigma(x, mu, a):
        vals = dyn.theta + x @ dyn.D.T + mean(mu) @ dyn.Dbar.T + a @ dyn.F.T
        return vals[:, :, None]

    def sigma0(x, mu, a):
        vals = dyn.theta0 + x @ dyn.D0.T + mean(mu) @ dyn.D0bar.T + a @ dyn.F0.T
        return vals[:, :, None]

    def f(x, mu, a):
        mbar = mean(mu)
        vals = np.einsum("ni,ij,nj->n", x, cost.Q2, x)
        vals = vals + float(mbar @ cost.Q2bar @ mbar)
        vals = vals + np.einsum("ni,ij,nj->n", a, cost.R2, a)
        if np.any(cost.M2):
            vals = vals + 2.0 * np.einsum("ni,ij,nj->n", x, cost.M2, a)
        return vals

    def g(x, mu):
        mbar = mean(mu)
        vals = np.einsum("ni,ij,nj->n", x, cost.P2, x)
        return vals + float(mbar @ cost.P2bar @ mbar)

    return DynamicsSpec(d=dyn.d, n=1, m0=1, m=dyn.m, T=float(T),
                        b=b, sigma=sigma, sigma0=sigma0, f=f, g=g, lq=(dyn, cost))


class AffineControl:
    """Constant-in-time affine map a(x) = A x + b applied particlewise."""

    def __init__(self, amap: AffineMap):
        self.amap = amap

    @property
    def m(self):
        return self.amap.dim_out

    def values(self, t, x, mubar):
        return np.atleast_2d(self.amap(x))

    def grid_gains(self, t0, dt, n_steps, offset=0):
        A, b = self.amap.A, self.amap.b
        return (np.broadcast_to(A, (n_steps,) + A.shape),
                np.broadcast_to(A, (n_steps,) + A.shape),
                np.broadcast_to(b, (n_steps,) + b.shape))


class FeedbackControl:
    """Time-varying affine feedback a(t, x, mubar) from a feedback policy."""

    def __init__(self, policy):
        self.policy = policy

    @property
    def m(self):
        return self.policy.qv.dyn.m

    def values(self, t, x, mubar):
        return np.atleast_2d(self.policy(t, x, mubar))

    def grid_gains(self, t0, dt, n_steps, offset=0):
        return self.policy.grid_gains(t0, dt, n_steps, offset)


class ShiftedControl:
    """Wraps another control and adds a constant shift to its output."""

    def __init__(self, base, shift):
        self.base = base
        self.shift = np.atleast_1d(np.asarray(shift, dtype=np.float64))

    @property
    def m(self):
        return self.base.m

    def values(self, t, x, mubar):
        return self.base.values(t, x, mubar) + self.shift

    def grid_gains(self, t0, dt, n_steps, offset=0):
        K1, K2, kk = self.base.grid_gains(t0, dt, n_steps, offset)
        return K1, K2, kk + self.shift


# ---------------------------------------------------------------------------
# trajectories

@dataclass(frozen=True)
class ParticleTrajectory:
    """States of one scenario on a uniform grid, with its common-noise path.

    states[k+1] is the Euler-Maruyama image of states[k] under the stored
    common increments and the (regenerable) idiosyncratic increments, so the
    suffix from any node replays bitwise.
    """

    times: np.ndarray
    states: np.ndarray
    means: np.ndarray
    dw0: np.ndarray
    t0: float
    base_t0: float
    dt: float
    seed: int
    path_index: int
    step_offset: int
    model: DynamicsSpec
    control: object

    @property
    def n_steps(self):
        return self.states.shape[0] - 1

    @property
    def n_particles(self):
        return self.states.shape[1]

    def cloud(self, k) -> EmpiricalMeasure:
        return EmpiricalMeasure._wrap(self.states[k])

    def w0_cumulative(self):
        out = np.zeros((self.n_steps + 1, self.dw0.shape[1]))
        if self.n_steps:
            np.cumsum(self.dw0, axis=0, out=out[1:])
        return out

    def node_index(self, t):
        j = int(round((float(t) - self.t0) / self.dt)) if self.dt else 0
        if j < 0 or j > self.n_steps or abs(self.t0 + j * self.dt - float(t)) > GRID_TOL * max(1.0, self.dt):
            raise ValueError(f"t={t} is not a grid node of this trajectory")
        return j


def _control_grid(control, base_t0, dt, n_steps, offset, d, m):
    K1, K2, kk = control.grid_gains(base_t0, dt, n_steps, offset)
    K1 = np.asarray(K1, dtype=np.float64).reshape(n_steps, m, d)
    K2 = np.asarray(K2, dtype=np.float64).reshape(n_steps, m, d)
    kk = np.asarray(kk, dtype=np.float64).reshape(n_steps, m)
    return K1, K2, kk


def _fast_eligible(model, control, force_generic):
    return (not force_generic
            and model.lq is not None
            and model.d == 1 and model.n == 1 and model.m0 == 1 and model.m == 1
            and hasattr(control, "grid_gains"))


def _run_fast_scalar(dyn, states2, means1, K1, K2, kk, dt, dw0, db, backend):
    """Scalar LQ Euler loop; numpy twin of the compiled kernel."""
    coef = (float(dyn.b0[0]), float(dyn.B[0, 0]), float(dyn.Bbar[0, 0]), float(dyn.C[0, 0]),
            float(dyn.theta[0]), float(dyn.D[0, 0]), float(dyn.Dbar[0, 0]), float(dyn.F[0, 0]),
            float(dyn.theta0[0]), float(dyn.D0[0, 0]), float(dyn.D0bar[0, 0]), float(dyn.F0[0, 0]))
    n_steps = states2.shape[0] - 1
    n = states2.shape[1]
    if backend == "cython":
        bad = backends.kernels().em_scalar_path(
            states2, means1, K1, K2, kk, *coef, dt, dw0, db, np.empty(n))
        return int(bad)
    b0, B, Bbar, C, th, D, Dbar, F, th0, D0, D0bar, F0 = coef
    for k in range(n_steps):
        x = states2[k]
        m = float(tree_sum(x) / n)
        means1[k] = m
        a = K1[k] * (x - m) + K2[k] * m + kk[k]
        bv = b0 + B * x + Bbar * m + C * a
        sv = th + D * x + Dbar * m + F * a
        s0v = th0 + D0 * x + D0bar * m + F0 * a
        x1 = x + bv * dt + sv * db[k] + s0v * dw0[k]
        states2[k + 1] = x1
        if not np.all(np.abs(x1) <= BLOWUP_LIMIT):
            return k
    means1[n_steps] = float(tree_sum(states2[n_steps]) / n)
    return -1


def _run_generic(model, control, times, states, means, dt, dw0, db):
    n_steps = states.shape[0] - 1
    for k in range(n_steps):
        x = states[k]
        cloud = EmpiricalMeasure._wrap(x)
        mbar = mean(cloud)
        means[k] = mbar
        t_k = float(times[k])
        a = np.atleast_2d(np.asarray(control.values(t_k, x, mbar), dtype=np.float64))
        bv = np.asarray(model.b(x, cloud, a), dtype=np.float64)
        sv = np.asarray(model.sigma(x, cloud, a), dtype=np.float64)
        s0v = np.asarray(model.sigma0(x, cloud, a), dtype=np.float64)
        if not (np.all(np.isfinite(bv)) and np.all(np.isfinite(sv)) and np.all(np.isfinite(s0v))):
            raise NumericalBlowup(f"t={t_k:.6g}", "coefficients returned non-finite values")
        x1 = x + bv * dt + np.einsum("idn,in->id", sv, db[k]) + np.einsum("idm,m->id", s0v, dw0[k])
        states[k + 1] = x1
        if not np.all(np.abs(x1) <= BLOWUP_LIMIT):
            raise NumericalBlowup(f"t={float(times[k + 1]):.6g}",
                                  "particle state exceeded 1e12 or is NaN")
    means[n_steps] = tree_mean(states[n_steps], axis=0)


def _simulate(model, control, base_t0, x0, n_steps, dt, seed, path_index, step_offset,
              force_generic=False):
    n_particles, d = x0.shape
    sqrt_dt = float(np.sqrt(dt))
    dw0, db = _gen_noise(seed, path_index, step_offset, n_steps, n_particles,
                         model.n, model.m0, sqrt_dt)
    states = np.empty((n_steps + 1, n_particles, d))
    states[0] = x0
    means = np.empty((n_steps + 1, d))
    # node times come from the base origin and an absolute step index, so a
    # continuation reproduces them (and the gains built from them) bitwise
    times = base_t0 + dt * np.arange(step_offset, step_offset + n_steps + 1)

    if _fast_eligible(model, control, force_generic):
        dyn, _ = model.lq
        K1, K2, kk = _control_grid(control, base_t0, dt, n_steps, step_offset, d, model.m)
        backend = backends.resolve()
        bad = _run_fast_scalar(
            dyn, states[:, :, 0], means[:, 0],
            np.ascontiguousarray(K1[:, 0, 0]), np.ascontiguousarray(K2[:, 0, 0]),
            np.ascontiguousarray(kk[:, 0]),
            float(dt), np.ascontiguousarray(dw0[:, 0]),
            np.ascontiguousarray(db[:, :, 0]), backend)
        if bad >= 0:
            raise NumericalBlowup(f"t={float(times[bad + 1]):.6g}",
                                  "particle state exceeded 1e12 or is NaN")
    else:
        _run_generic(model, control, times, states, means, dt, dw0, db)

    for arr in (times, states, means, dw0):
        arr.setflags(write=False)
    return ParticleTrajectory(times=times, states=states, means=means, dw0=dw0,
                              t0=float(times[0]), base_t0=float(base_t0),
                              dt=float(dt), seed=int(seed),
                              path_index=int(path_index), step_offset=int(step_offset),
                              model=model, control=control)


def simulate_path(model, control, t0, mu0: EmpiricalMeasure, T, dt, seed,
                  path_index=0, force_generic=False):
    """Simulate one scenario of the controlled particle system on [t0, T].

    dt must divide T - t0 into an integral number of steps.  All randomness
    is a function of (seed, path_index, particle, step); reruns with the
    same arguments are bitwise identical.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    span = float(T) - float(t0)
    if span < -GRID_TOL:
        raise ValueError("T must be >= t0")
    n_steps = int(round(span / dt))
    if abs(n_steps * dt - span) > GRID_TOL * max(1.0, span):
        raise ValueError(f"dt={dt} must divide T - t0 = {span} into whole steps")
    if mu0.dim != model.d:
        raise ValueError("initial cloud dimension does not match the model")
    return _simulate(model, control, float(t0), mu0.points.copy(), n_steps,
                     float(dt), seed, path_index, 0, force_generic=force_generic)


def restart_continuation(traj: ParticleTrajectory, theta):
    """Re-run the simulation from the stored state at grid node theta.

    The continuation regenerates noise increments and node times at their
    original absolute step indices, so on [theta, T] it reproduces the
    original trajectory bitwise.
    """
    j = traj.node_index(theta)
    return _simulate(traj.model, traj.control, traj.base_t0,
                     traj.states[j].copy(), traj.n_steps - j, traj.dt,
                     traj.seed, traj.path_index, traj.step_offset + j)


def control_values_on_grid(control, traj, k, grid=None):
    """Control values at node k, identical to those used inside the step loop."""
    x = traj.states[k]
    if hasattr(control, "grid_gains") and k < traj.n_steps:
        if grid is None:
            grid = _control_grid(control, traj.base_t0, traj.dt, traj.n_steps,
                                 traj.step_offset, traj.model.d, traj.model.m)
        K1, K2, kk = grid
        mbar = traj.means[k]
        return (x - mbar) @ K1[k].T + mbar @ K2[k].T + kk[k]
    return np.atleast_2d(np.asarray(
        control.values(traj.times[k], x, traj.means[k]), dtype=np.float64))


def _lq_cost_values(cost, x, means, avals):
    """Pointwise LQ running cost on stacked steps: x (K,N,d), avals (K,N,m)."""
    vals = np.einsum("kni,ij,knj->kn", x, cost.Q2, x)
    vals = vals + np.einsum("kd,de,ke->k", means, cost.Q2bar, means)[:, None]
    vals = vals + np.einsum("kni,ij,knj->kn", avals, cost.R2, avals)
    if np.any(cost.M2):
        vals = vals + 2.0 * np.einsum("kni,ij,knj->kn", x, cost.M2, avals)
    return vals


def _pathwise_cost_lq(traj, cost, grid, end, include_terminal):
    total = 0.0
    if end:
        K1, K2, kk = grid
        x = traj.states[:end]
        means = traj.means[:end]
        centered = x - means[:, None, :]
        avals = (np.einsum("knd,kmd->knm", centered, K1[:end])
                 + np.einsum("kd,kmd->km", means, K2[:end])[:, None, :]
                 + kk[:end, None, :])
        fvals = _lq_cost_values(cost, x, means, avals)
        fhat = tree_mean(fvals, axis=1)
        for k in range(end):
            total += float(fhat[k]) * traj.dt
    if include_terminal:
        xT = traj.states[end]
        mT = traj.means[end]
        gvals = np.einsum("ni,ij,nj->n", xT, cost.P2, xT) + float(mT @ cost.P2bar @ mT)
        total += float(tree_mean(gvals))
    return total


def pathwise_cost(traj: ParticleTrajectory, model, control, end_step=None,
                  include_terminal=True):
    """Realized lifted cost along one trajectory.

    Left-endpoint Riemann sum of the particle-averaged running cost plus the
    particle-averaged terminal cost at the end node.
    """
    end = traj.n_steps if end_step is None else int(end_step)
    if end < 0 or end > traj.n_steps:
        raise ValueError("end_step outside the trajectory grid")
    grid = None
    if hasattr(control, "grid_gains") and traj.n_steps:
        grid = _control_grid(control, traj.base_t0, traj.dt, traj.n_steps,
                             traj.step_offset, traj.model.d, traj.model.m)
    if model.lq is not None and (grid is not None or end == 0):
        return _pathwise_cost_lq(traj, model.lq[1], grid, end, include_terminal)
    total = 0.0
    for k in range(end):
        x = traj.states[k]
        cloud = traj.cloud(k)
        a = control_values_on_grid(control, traj, k, grid)
        fhat = float(tree_mean(np.asarray(model.f(x, cloud, a), dtype=np.float64)))
        total += fhat * traj.dt
    if include_terminal:
        x = traj.states[end]
        total += float(tree_mean(np.asarray(model.g(x, traj.cloud(end)), dtype=np.float64)))
    return total


# ---------------------------------------------------------------------------
# initial clouds

def sample_initial(spec, n_particles, seed):
    """Sample an initial cloud: point mass, Gaussian, or particle file.

    spec is {'kind': 'point', 'x0': ...}, {'kind': 'gaussian', 'mean': ...,
    'cov': ...} or {'kind': 'csv', 'path': ...}.  Deterministic in seed.
    """
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    kind = spec.get("kind")
    if kind == "point":
        x0 = np.atleast_1d(np.asarray(spec["x0"], dtype=np.float64))
        return EmpiricalMeasure(np.tile(x0, (n_particles, 1)))
    if kind == "gaussian":
        mu = np.atleast_1d(np.asarray(spec["mean"], dtype=np.float64))
        d = mu.shape[0]
        cov = np.asarray(spec["cov"], dtype=np.float64)
        if cov.ndim == 0:
            cov = cov * np.eye(d)
        if cov.shape != (d, d):
            raise ValueError("covariance shape does not match the mean")
        factor = _psd_factor(cov)
        z = _philox(seed, _INIT_PATH_TAG, 0).standard_normal((n_particles, d))
        return EmpiricalMeasure(mu + z @ factor.T)
    if kind == "csv":
        cloud = load_csv(spec["path"])
        if cloud.n != n_particles:
            raise ValueError(
                f"particle file holds {cloud.n} particles, expected {n_particles}")
        return cloud
    raise ValueError(f"unknown initial-condition kind: {kind!r}")


def _psd_factor(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    eigvals, eigvecs = np.linalg.eigh(cov)
    tol = 1e-12 * max(1.0, float(np.max(np.abs(eigvals))))
    if np.min(eigvals) < -tol:
        raise ValueError("covariance is not positive semidefinite")
    return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
