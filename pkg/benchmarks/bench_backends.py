"""Timing comparison of the compiled kernel against the numpy fallback.

Runs the interbank model under its optimal feedback for a grid of particle
counts and step counts, once per backend, and prints per-path wall times.
The two backends produce bit-identical trajectories (asserted here), so the
only difference is speed.

Usage: python benchmarks/bench_backends.py [--paths 3]
"""

import argparse
import os
import time

import numpy as np

from cmvlq import backends
from cmvlq.policy import FeedbackPolicy, QuadraticValue
from cmvlq.riccati import SystemicRiskParams, solve_riccati, systemic_risk_model
from cmvlq.simulator import FeedbackControl, lq_dynamics_spec, sample_initial, simulate_path


def time_backend(backend, model, control, mu0, dt, seed, paths):
    os.environ["CMVLQ_BACKEND"] = backend
    last = None
    t0 = time.perf_counter()
    for p in range(paths):
        last = simulate_path(model, control, 0.0, mu0, model.T, dt, seed, p)
    return (time.perf_counter() - t0) / paths, last


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--paths", type=int, default=3, help="paths per cell")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    if not backends.HAVE_KERNELS:
        print("compiled kernel not built; nothing to compare")
        return

    p = SystemicRiskParams(kappa=1.0, q=0.5, eta=1.0, c=1.0, sigma0=1.0,
                           sigma1=0.3, rho=0.5, T=1.0, x0=1.0)
    dyn, cost = systemic_risk_model(p)
    model = lq_dynamics_spec(dyn, cost, p.T)

    print(f"{'N':>6} {'steps':>6} {'python':>10} {'cython':>10} {'speedup':>8}")
    for n_particles in (500, 2000, 8000):
        for dt in (1e-2, 1e-3):
            sol = solve_riccati(dyn, cost, p.T, dt)
            control = FeedbackControl(FeedbackPolicy(QuadraticValue(sol, dyn, cost)))
            mu0 = sample_initial({"kind": "point", "x0": p.x0}, n_particles, args.seed)
            t_py, traj_py = time_backend("python", model, control, mu0, dt,
                                         args.seed, args.paths)
            t_cy, traj_cy = time_backend("cython", model, control, mu0, dt,
                                         args.seed, args.paths)
            assert np.array_equal(traj_py.states, traj_cy.states), "backends diverged"
            steps = int(round(p.T / dt))
            print(f"{n_particles:>6} {steps:>6} {t_py:>9.4f}s {t_cy:>9.4f}s "
                  f"{t_py / t_cy:>7.2f}x")
    os.environ.pop("CMVLQ_BACKEND", None)


if __name__ == "__main__":
    main()
