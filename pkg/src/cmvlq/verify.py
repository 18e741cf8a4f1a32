"""Numerical certification of the dynamic-programming structure.

Monte Carlo cost estimation against the quadratic value, the measure-space
Bellman residual evaluated by exact particle sums, the dynamic-programming
inequality at intermediate times, the generator identity along conditional
flows, lifted-gradient finite differences, and particle-count convergence.

Statistical tolerances use three standard errors; deterministic tolerances
carry explicit discretization constants supplied by the caller (the test
harness calibrates them by Richardson extrapolation).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .lqmodel import lifted_running_cost
from .measure import EmpiricalMeasure, mean, tree_mean, variance_form
from .policy import QuadraticFunctional, QuadraticValue, value
from .riccati import ode_rhs
from .simulator import pathwise_cost, sample_initial, simulate_path


def _resolve_cloud(mu0, n_particles, seed):
    if isinstance(mu0, EmpiricalMeasure):
        if mu0.n != n_particles:
            raise ValueError(f"cloud holds {mu0.n} particles, expected {n_particles}")
        return mu0
    return sample_initial(mu0, n_particles, seed)


@dataclass(frozen=True)
class CostEstimate:
    """Monte Carlo estimate of the lifted cost over common-noise scenarios."""

    mean: float
    stderr: float
    M: int
    N: int
    dt: float
    seed: int

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("cost estimation needs M >= 2 scenarios")


def estimate_cost(model, control, t0, mu0, N, M, dt, seed) -> CostEstimate:
    """Average pathwise cost over M independent common-noise scenarios.

    mu0 is an initial-cloud spec (or a ready cloud of N particles) shared by
    all scenarios; the scenario index enters only the noise keying, so the
    estimate is deterministic in seed.
    """
    if M < 2:
        raise ValueError("cost estimation needs M >= 2 scenarios")
    cloud0 = _resolve_cloud(mu0, N, seed)
    costs = np.empty(M)
    for p in range(M):
        traj = simulate_path(model, control, t0, cloud0, model.T, dt, seed, path_index=p)
        costs[p] = pathwise_cost(traj, model, control)
    m = float(tree_mean(costs))
    stderr = float(np.std(costs, ddof=1) / np.sqrt(M))
    return CostEstimate(mean=m, stderr=stderr, M=M, N=N, dt=float(dt), seed=int(seed))


# ---------------------------------------------------------------------------
# generators by exact particle sums

def generator_apply(phi: QuadraticFunctional, mu, bvals, svals, s0vals):
    """mu(L^a phi) + (mu x mu)(M^a phi) for a quadratic measure functional.

    The first-order and trace parts are a single sum over particles; the
    common-noise part is a full double sum over particle pairs.
    """
    n = mu.n
    dmu = np.atleast_2d(phi.d_mu(mu, mu.points))
    dxdmu = phi.dx_dmu()
    first = np.einsum("nd,nd->n", dmu, bvals)
    trace = 0.5 * (np.einsum("ndc,de,nec->n", svals, dxdmu, svals)
                   + np.einsum("ndc,de,nec->n", s0vals, dxdmu, s0vals))
    single = float(tree_mean(first + trace))

    d2 = phi.d2_mu()
    pair = np.zeros((n, n))
    for c in range(s0vals.shape[2]):
        block = s0vals[:, :, c]
        pair += block @ d2 @ block.T
    double = float(tree_mean(tree_mean(0.5 * pair, axis=0)))
    return single + double


def _lq_coefficient_values(dyn, x, mbar, avals):
    bvals = dyn.b0 + x @ dyn.B.T + mbar @ dyn.Bbar.T + avals @ dyn.C.T
    svals = (dyn.theta + x @ dyn.D.T + mbar @ dyn.Dbar.T + avals @ dyn.F.T)[:, :, None]
    s0vals = (dyn.theta0 + x @ dyn.D0.T + mbar @ dyn.D0bar.T + avals @ dyn.F0.T)[:, :, None]
    return bvals, svals, s0vals


def bellman_residual(qv: QuadraticValue, t, mu, a, with_terms=False):
    """Dynamic-programming residual at (t, mu) under the affine policy a.

    d_t w + lifted running cost + mu(L^a w) + (mu x mu)(M^a w), all exact
    particle sums.  Nonnegative for every a, zero at the minimizing
    feedback; the excess over the minimizer is a quadratic form in a.
    """
    t = float(t)
    if not 0.0 <= t < qv.T:
        raise ValueError(f"residual needs t in [0, T); got t={t}")
    Lam, Gam, gam, chi = qv.sol.eval(t)
    phi = QuadraticFunctional(Lam, Gam, gam, chi)
    dLam, dGam, dgam, dchi = ode_rhs(Lam, Gam, gam, qv.dyn, qv.cost, t)
    mbar = mean(mu)
    d_t = (variance_form(mu, dLam) + float(mbar @ dGam @ mbar)
           + float(dgam @ mbar) + dchi)
    fhat = lifted_running_cost(mu, a, qv.cost)
    avals = np.atleast_2d(a(mu.points))
    bvals, svals, s0vals = _lq_coefficient_values(qv.dyn, mu.points, mbar, avals)
    gen = generator_apply(phi, mu, bvals, svals, s0vals)
    residual = d_t + fhat + gen
    if with_terms:
        return residual, {"d_t": d_t, "running_cost": fhat, "generator": gen}
    return residual


# ---------------------------------------------------------------------------
# dynamic programming and generator checks

@dataclass(frozen=True)
class DppResult:
    gap: float
    stderr: float
    theta: float
    t: float
    M: int


def dpp_check(qv: QuadraticValue, model, t, mu0, theta, control, N, M, dt, seed) -> DppResult:
    """Estimate E[int_t^theta fhat ds + w(theta, rho_theta)] - w(t, mu).

    Nonnegative up to statistical and discretization error for any control;
    zero within tolerance along the optimal feedback.  theta must be a node
    of the simulation grid.
    """
    t, theta = float(t), float(theta)
    if theta < t or theta > model.T * (1 + 1e-12):
        raise ValueError("need t <= theta <= T")
    cloud0 = _resolve_cloud(mu0, N, seed)
    w_t = value(qv, t, cloud0)
    gaps = np.empty(M)
    for p in range(M):
        traj = simulate_path(model, control, t, cloud0, theta, dt, seed, path_index=p)
        partial = pathwise_cost(traj, model, control, include_terminal=False)
        v_theta = value(qv, theta, traj.cloud(traj.n_steps))
        gaps[p] = partial + v_theta - w_t
    gap = float(tree_mean(gaps))
    stderr = float(np.std(gaps, ddof=1) / np.sqrt(M))
    return DppResult(gap=gap, stderr=stderr, theta=theta, t=t, M=M)


@dataclass(frozen=True)
class ItoCheckResult:
    lhs: float
    rhs: float
    stderr: float
    delta: float


def ito_generator_check(model, control, t, mu0, phi: QuadraticFunctional,
                        delta, N, M, dt, seed) -> ItoCheckResult:
    """Flow derivative of a quadratic functional vs its generator value.

    lhs: Monte Carlo difference quotient (E[phi(rho_{t+delta})] - phi(mu))/delta.
    rhs: mu(L^a phi) + (mu x mu)(M^a phi) at the initial cloud, deterministic.
    delta must be a multiple of dt.
    """
    delta = float(delta)
    steps = int(round(delta / dt))
    if steps < 1 or abs(steps * dt - delta) > 1e-9 * max(1.0, delta):
        raise ValueError("delta must be a positive multiple of dt")
    cloud0 = _resolve_cloud(mu0, N, seed)
    phi0 = phi(cloud0)
    ends = np.empty(M)
    for p in range(M):
        traj = simulate_path(model, control, t, cloud0, t + delta, dt, seed, path_index=p)
        ends[p] = phi(traj.cloud(traj.n_steps))
    lhs = (float(tree_mean(ends)) - phi0) / delta
    stderr = float(np.std(ends, ddof=1) / np.sqrt(M)) / delta

    x = cloud0.points
    mbar = mean(cloud0)
    avals = np.atleast_2d(np.asarray(control.values(float(t), x, mbar), dtype=np.float64))
    bvals = np.asarray(model.b(x, cloud0, avals), dtype=np.float64)
    svals = np.asarray(model.sigma(x, cloud0, avals), dtype=np.float64)
    s0vals = np.asarray(model.sigma0(x, cloud0, avals), dtype=np.float64)
    rhs = generator_apply(phi, cloud0, bvals, svals, s0vals)
    return ItoCheckResult(lhs=lhs, rhs=rhs, stderr=stderr, delta=delta)


def grad_check(qv: QuadraticValue, t, mu, epsilon) -> float:
    """Max relative gap between lifted finite differences and d_mu w / N.

    Central differences of the value under single-particle perturbations
    against the closed-form measure derivative, normalized by the largest
    derivative magnitude over the cloud.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    phi = qv.at(t)
    analytic = np.atleast_2d(phi.d_mu(mu, mu.points)) / mu.n
    scale = max(float(np.max(np.abs(analytic))), 1e-12)
    worst = 0.0
    pts = mu.points
    for i in range(mu.n):
        for j in range(mu.dim):
            up = pts.copy()
            up[i, j] += epsilon
            dn = pts.copy()
            dn[i, j] -= epsilon
            fd = (phi(EmpiricalMeasure(up)) - phi(EmpiricalMeasure(dn))) / (2.0 * epsilon)
            worst = max(worst, abs(fd - analytic[i, j]) / scale)
    return worst


def chaos_convergence(model, control, t0, mu0spec, Ns, M, dt, seed):
    """Cost estimates across particle counts, same common-noise scenarios.

    The common increments are drawn before the idiosyncratic block in each
    step, so every N sees identical common-noise paths and the N-trend is
    not confounded by scenario noise.
    """
    Ns = list(Ns)
    if len(Ns) < 2 or any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise ValueError("Ns must be >= 2 ascending particle counts")
    rows = []
    for n in Ns:
        est = estimate_cost(model, control, t0, mu0spec, n, M, dt, seed)
        rows.append({"N": int(n), "mean": est.mean, "stderr": est.stderr})
    return rows


def random_clouds(qv, count, n_particles, seed, spread=1.0):
    """Seeded random (t, cloud) draws for residual and gradient sweeps.

    Times are uniform on [0, T); clouds are Gaussian around a random center
    with the given spread.
    """
    gen = np.random.Generator(np.random.Philox(key=int(seed)))
    d = qv.dyn.d
    out = []
    for _ in range(count):
        t = float(gen.uniform(0.0, qv.T * (1.0 - 1e-6)))
        center = gen.uniform(-2.0, 2.0, size=d)
        pts = center + spread * gen.standard_normal((n_particles, d))
        out.append((t, EmpiricalMeasure(pts)))
    return out


# ---------------------------------------------------------------------------
# reports

def make_report(check, passed, statistic, tolerance, stderr, config):
    return {
        "check": str(check),
        "pass": bool(passed),
        "statistic": float(statistic),
        "tolerance": float(tolerance),
        "stderr": None if stderr is None else float(stderr),
        "config": config,
    }


def save_report(path, report):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
