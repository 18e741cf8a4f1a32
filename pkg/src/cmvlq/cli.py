"""Command-line front end.

Subcommands: solve (backward ODE system to CSV), simulate (particle
trajectories and conditional means), cost (Monte Carlo estimate vs the
quadratic value), verify (bellman / dpp / ito / grad / chaos / flow
checks emitting JSON reports), and systemic-risk (end-to-end interbank
example).  Every command is a pure function of (model file, config, seed);
seeds are mandatory wherever randomness is consumed.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import policy as policy_mod
from . import riccati as riccati_mod
from . import verify as verify_mod
from .errors import NonPositiveGain, NumericalBlowup
from .lqmodel import load_model, parse_kv_file, save_model
from .measure import AffineMap, tree_mean
from .policy import FeedbackPolicy, QuadraticValue, feedback_affine_map, optimal_feedback, value
from .simulator import (
    AffineControl,
    FeedbackControl,
    ShiftedControl,
    lq_dynamics_spec,
    restart_continuation,
    sample_initial,
    simulate_path,
)

CONFIG_KEYS = {
    "model": str, "out": str, "seed": int, "particles": int, "paths": int,
    "dt": float, "riccati-step": float, "t0": float, "theta": float,
    "epsilon": float, "init": str, "control": str, "stride": int,
    "count": int, "delta": float, "chaos-ns": str,
}


def _build_parser():
    top = argparse.ArgumentParser(prog="cmvlq", description=__doc__.split("\n\n")[0])
    sub = top.add_subparsers(dest="command", required=True)

    def add_common(p, model_required=True, needs_seed=True):
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--model", required=False, help="model file path")
        p.add_argument("--out", required=False, help="output directory")
        p.add_argument("--seed", type=lambda s: int(s, 10), help="64-bit seed (mandatory)")
        p.add_argument("--particles", type=int, help="particles per cloud (default 2000)")
        p.add_argument("--paths", type=int, help="Monte Carlo scenarios (default 100)")
        p.add_argument("--dt", type=float, help="simulation step (default 1e-3)")
        p.add_argument("--riccati-step", dest="riccati_step", type=float,
                       help="backward-ODE step (default T/1000)")
        p.add_argument("--t0", type=float, help="initial time (default 0)")
        p.add_argument("--theta", type=float, help="intermediate time (default T/2)")
        p.add_argument("--epsilon", type=float, help="control shift / FD step")
        p.add_argument("--init", help="point:<v,..> | gaussian:<mean,..>:<var,..> | csv:<path>")
        p.add_argument("--control", help="optimal | zero | const:<v,..> | shift:<eps>")
        p._model_required = model_required
        p._needs_seed = needs_seed

    p = sub.add_parser("solve", help="integrate the backward ODE system")
    add_common(p, needs_seed=False)

    p = sub.add_parser("simulate", help="simulate controlled particle paths")
    add_common(p)
    p.add_argument("--stride", type=int, help="trajectory downsampling stride (default 1)")

    p = sub.add_parser("cost", help="Monte Carlo cost estimate")
    add_common(p)

    p = sub.add_parser("verify", help="dynamic-programming checks")
    p.add_argument("check", choices=["bellman", "dpp", "ito", "grad", "chaos", "flow"])
    add_common(p)
    p.add_argument("--count", type=int, help="random draws for bellman/grad/flow")
    p.add_argument("--delta", type=float, help="window for the ito check (default 0.01)")
    p.add_argument("--chaos-ns", dest="chaos_ns", help="comma list of particle counts")

    p = sub.add_parser("systemic-risk", help="end-to-end interbank example")
    add_common(p, model_required=False)
    for name, default in [("kappa", 1.0), ("q", 0.5), ("eta", 1.0), ("c", 1.0),
                          ("sigma0", 1.0), ("sigma1", 0.0), ("rho", 0.5),
                          ("T", 1.0), ("x0", 1.0)]:
        p.add_argument(f"--{name}", type=float, default=None,
                       help=f"model parameter (default {default})")
    return top


def _merge_config(args):
    """Config-file values fill in flags the user did not pass."""
    cfg = vars(args)
    if cfg.get("config"):
        raw = parse_kv_file(cfg["config"])
        for key, text in raw.items():
            norm = key.replace("_", "-")
            if norm not in CONFIG_KEYS:
                raise ValueError(f"unknown config key {key!r}")
            attr = norm.replace("-", "_")
            if cfg.get(attr) is None:
                cfg[attr] = CONFIG_KEYS[norm](text)
    return cfg


def _defaults(cfg, T):
    if cfg.get("particles") is None:
        cfg["particles"] = 2000
    if cfg.get("paths") is None:
        cfg["paths"] = 100
    if cfg.get("dt") is None:
        cfg["dt"] = 1e-3
    if cfg.get("riccati_step") is None:
        cfg["riccati_step"] = T / 1000.0
    if cfg.get("t0") is None:
        cfg["t0"] = 0.0
    if cfg.get("theta") is None:
        cfg["theta"] = T / 2.0
    if cfg.get("epsilon") is None:
        cfg["epsilon"] = 0.1
    if cfg.get("init") is None:
        cfg["init"] = "point:0.0"
    if cfg.get("control") is None:
        cfg["control"] = "optimal"
    if cfg.get("stride") is None:
        cfg["stride"] = 1
    for knob in ("particles", "paths", "stride"):
        if cfg[knob] < 1:
            raise ValueError(f"{knob} must be >= 1")
    for knob in ("dt", "riccati_step"):
        if cfg[knob] <= 0:
            raise ValueError(f"{knob} must be positive")
    return cfg


def _parse_init(text, d):
    kind, _, rest = text.partition(":")
    if kind == "point":
        vals = [float(v) for v in rest.split(",")] if rest else [0.0] * d
        return {"kind": "point", "x0": np.asarray(vals)}
    if kind == "gaussian":
        mean_txt, _, var_txt = rest.partition(":")
        mean = np.asarray([float(v) for v in mean_txt.split(",")])
        var = np.asarray([float(v) for v in var_txt.split(",")]) if var_txt else np.ones_like(mean)
        return {"kind": "gaussian", "mean": mean, "cov": np.diag(var)}
    if kind == "csv":
        return {"kind": "csv", "path": rest}
    raise ValueError(f"cannot parse initial condition {text!r}")


def _build_control(text, qv):
    if text == "optimal":
        return FeedbackControl(FeedbackPolicy(qv))
    if text == "zero":
        return AffineControl(AffineMap.zero(qv.dyn.m, qv.dyn.d))
    kind, _, rest = text.partition(":")
    if kind == "const":
        vals = np.asarray([float(v) for v in rest.split(",")])
        return AffineControl(AffineMap.constant(vals, qv.dyn.d))
    if kind == "shift":
        eps = np.asarray([float(v) for v in rest.split(",")])
        return ShiftedControl(FeedbackControl(FeedbackPolicy(qv)), eps)
    raise ValueError(f"cannot parse control {text!r}")


def _prepare(cfg, need_model=True):
    if need_model:
        if not cfg.get("model"):
            raise ValueError("--model is required")
        dyn, cost, T = load_model(cfg["model"])
    else:
        dyn = cost = T = None
    if not cfg.get("out"):
        raise ValueError("--out is required")
    os.makedirs(cfg["out"], exist_ok=True)
    return dyn, cost, T


def _require_seed(cfg):
    if cfg.get("seed") is None:
        raise ValueError("--seed is mandatory (reproducibility contract)")
    return cfg["seed"]


def _solved(dyn, cost, T, cfg):
    sol = riccati_mod.solve_riccati(dyn, cost, T, cfg["riccati_step"])
    return sol, QuadraticValue(sol, dyn, cost)


def _json_dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _public_config(cfg):
    drop = {"command", "config"}
    return {k: v for k, v in sorted(cfg.items())
            if k not in drop and v is not None and not k.startswith("_")}


# ---------------------------------------------------------------------------
# commands

def cmd_solve(cfg):
    dyn, cost, T = _prepare(cfg)
    _defaults(cfg, T)
    sol, qv = _solved(dyn, cost, T, cfg)
    riccati_mod.save_riccati_csv(sol, os.path.join(cfg["out"], "riccati.csv"))
    policy_mod.save_policy_csv(qv, os.path.join(cfg["out"], "policy.csv"))
    print(f"solved on {sol.n_nodes} nodes; Lam(0) diag = "
          f"{np.diag(sol.Lam[0])}; wrote riccati.csv, policy.csv")
    return 0


def _write_trajectories(cfg, model, control, mu0, T, out_dir):
    d = model.d
    stride = cfg["stride"]
    traj_path = os.path.join(out_dir, "trajectory.csv")
    mean_path = os.path.join(out_dir, "means.csv")
    with open(traj_path, "w") as ft, open(mean_path, "w") as fm:
        ft.write("path,t,particle," + ",".join(f"x{j}" for j in range(d)) + "\n")
        fm.write("path,t," + ",".join(f"mean_{j}" for j in range(d)) + ",W0_cum\n")
        for p in range(cfg["paths"]):
            traj = simulate_path(model, control, cfg["t0"], mu0, T, cfg["dt"],
                                 cfg["seed"], path_index=p)
            w0 = traj.w0_cumulative()
            for k in range(0, traj.n_steps + 1, stride):
                t = float(traj.times[k])
                for i in range(traj.n_particles):
                    ft.write(f"{p},{t!r},{i}," +
                             ",".join(repr(float(v)) for v in traj.states[k, i]) + "\n")
                fm.write(f"{p},{t!r}," +
                         ",".join(repr(float(v)) for v in traj.means[k]) +
                         f",{float(w0[k, 0])!r}\n")
    return traj_path, mean_path


def cmd_simulate(cfg):
    dyn, cost, T = _prepare(cfg)
    _defaults(cfg, T)
    _require_seed(cfg)
    sol, qv = _solved(dyn, cost, T, cfg)
    model = lq_dynamics_spec(dyn, cost, T)
    control = _build_control(cfg["control"], qv)
    mu0 = sample_initial(_parse_init(cfg["init"], dyn.d), cfg["particles"], cfg["seed"])
    _write_trajectories(cfg, model, control, mu0, T, cfg["out"])
    print(f"simulated {cfg['paths']} path(s); wrote trajectory.csv, means.csv")
    return 0


def cmd_cost(cfg):
    dyn, cost, T = _prepare(cfg)
    _defaults(cfg, T)
    _require_seed(cfg)
    sol, qv = _solved(dyn, cost, T, cfg)
    model = lq_dynamics_spec(dyn, cost, T)
    control = _build_control(cfg["control"], qv)
    init = _parse_init(cfg["init"], dyn.d)
    est = verify_mod.estimate_cost(model, control, cfg["t0"], init,
                                   cfg["particles"], cfg["paths"], cfg["dt"], cfg["seed"])
    cloud0 = sample_initial(init, cfg["particles"], cfg["seed"])
    out = {
        "command": "cost",
        "mean": est.mean,
        "stderr": est.stderr,
        "value": value(qv, cfg["t0"], cloud0),
        "config": _public_config(cfg),
    }
    _json_dump(os.path.join(cfg["out"], "cost.json"), out)
    print(f"cost mean = {est.mean!r} (stderr {est.stderr:.3e}); wrote cost.json")
    return 0


def _verify_bellman(cfg, qv):
    count = cfg.get("count") or 100
    worst = 0.0
    for i in range(count):
        t, cloud = verify_mod.random_clouds(qv, 1, 50, cfg["seed"] + i)[0]
        fb = optimal_feedback(qv, t)
        a_star = feedback_affine_map(fb, tree_mean(cloud.points, axis=0))
        res, terms = verify_mod.bellman_residual(qv, t, cloud, a_star, with_terms=True)
        scale = max(max(abs(v) for v in terms.values()), 1.0)
        worst = max(worst, abs(res) / scale)
    tol = 1e-8
    return worst, tol, None, worst <= tol


def _verify_dpp(cfg, qv, model, control):
    init = _parse_init(cfg["init"], qv.dyn.d)
    res = verify_mod.dpp_check(qv, model, cfg["t0"], init, cfg["theta"], control,
                               cfg["particles"], cfg["paths"], cfg["dt"], cfg["seed"])
    coarse = verify_mod.dpp_check(qv, model, cfg["t0"], init, cfg["theta"], control,
                                  cfg["particles"], cfg["paths"], 2 * cfg["dt"], cfg["seed"])
    c_dt = max(1.0, abs(coarse.gap - res.gap) / cfg["dt"])
    tol = 3.0 * res.stderr + c_dt * cfg["dt"]
    optimal = cfg["control"] == "optimal"
    passed = abs(res.gap) <= tol if optimal else res.gap >= -tol
    return res.gap, tol, res.stderr, passed


def _verify_ito(cfg, qv, model, control):
    delta = cfg.get("delta") or 0.01
    init = _parse_init(cfg["init"], qv.dyn.d)
    phi = policy_mod.QuadraticFunctional(
        np.zeros((qv.dyn.d, qv.dyn.d)), np.eye(qv.dyn.d), np.zeros(qv.dyn.d), 0.0)
    res = verify_mod.ito_generator_check(model, control, cfg["t0"], init, phi,
                                         delta, cfg["particles"], cfg["paths"],
                                         cfg["dt"], cfg["seed"])
    c_bias = max(1.0, abs(res.rhs))
    tol = 3.0 * res.stderr + c_bias * (delta + cfg["dt"])
    gap = abs(res.lhs - res.rhs)
    return gap, tol, res.stderr, gap <= tol


def _verify_grad(cfg, qv):
    count = cfg.get("count") or 100
    eps = cfg["epsilon"] if cfg.get("epsilon") is not None else 1e-5
    worst = 0.0
    for i in range(count):
        t, cloud = verify_mod.random_clouds(qv, 1, 20, cfg["seed"] + i)[0]
        worst = max(worst, verify_mod.grad_check(qv, t, cloud, eps))
    tol = 1e-6
    return worst, tol, None, worst <= tol


def _verify_chaos(cfg, qv, model, control):
    ns = [int(v) for v in (cfg.get("chaos_ns") or "250,1000,4000").split(",")]
    init = _parse_init(cfg["init"], qv.dyn.d)
    rows = verify_mod.chaos_convergence(model, control, cfg["t0"], init, ns,
                                        cfg["paths"], cfg["dt"], cfg["seed"])
    diffs = [abs(rows[i]["mean"] - rows[i + 1]["mean"]) for i in range(len(rows) - 1)]
    inversions = 0
    worst_excess = 0.0
    for i in range(len(diffs) - 1):
        if diffs[i + 1] > diffs[i]:
            inversions += 1
            slack = 2.0 * (rows[i + 1]["stderr"] + rows[i + 2]["stderr"])
            worst_excess = max(worst_excess, diffs[i + 1] - diffs[i] - slack)
    passed = inversions <= 1 and worst_excess <= 0.0
    stat = diffs[-1] if diffs else 0.0
    return stat, max(diffs[0], 1e-30) if diffs else 0.0, rows[-1]["stderr"], passed


def _verify_flow(cfg, qv, model, control):
    count = cfg.get("count") or 10
    init = _parse_init(cfg["init"], qv.dyn.d)
    mu0 = sample_initial(init, cfg["particles"], cfg["seed"])
    rng = np.random.Generator(np.random.Philox(key=cfg["seed"]))
    failures = 0
    for i in range(count):
        traj = simulate_path(model, control, cfg["t0"], mu0, model.T, cfg["dt"],
                             cfg["seed"], path_index=i)
        j = int(rng.integers(0, traj.n_steps + 1))
        cont = restart_continuation(traj, traj.times[j])
        if not (np.array_equal(cont.states, traj.states[j:])
                and np.array_equal(cont.means, traj.means[j:])):
            failures += 1
    return float(failures), 0.0, None, failures == 0


def cmd_verify(cfg):
    dyn, cost, T = _prepare(cfg)
    _defaults(cfg, T)
    _require_seed(cfg)
    sol, qv = _solved(dyn, cost, T, cfg)
    model = lq_dynamics_spec(dyn, cost, T)
    control = _build_control(cfg["control"], qv)
    check = cfg["check"]
    if check == "bellman":
        stat, tol, stderr, passed = _verify_bellman(cfg, qv)
    elif check == "dpp":
        stat, tol, stderr, passed = _verify_dpp(cfg, qv, model, control)
    elif check == "ito":
        stat, tol, stderr, passed = _verify_ito(cfg, qv, model, control)
    elif check == "grad":
        stat, tol, stderr, passed = _verify_grad(cfg, qv)
    elif check == "chaos":
        stat, tol, stderr, passed = _verify_chaos(cfg, qv, model, control)
    else:
        stat, tol, stderr, passed = _verify_flow(cfg, qv, model, control)
    report = verify_mod.make_report(check, passed, stat, tol, stderr, _public_config(cfg))
    verify_mod.save_report(os.path.join(cfg["out"], f"verify_{check}.json"), report)
    print(f"verify {check}: {'PASS' if passed else 'FAIL'} "
          f"(statistic {stat:.6e}, tolerance {tol:.6e})")
    return 0 if passed else 1


def cmd_systemic_risk(cfg):
    _prepare(cfg, need_model=False)
    params = riccati_mod.SystemicRiskParams(
        kappa=cfg["kappa"] if cfg.get("kappa") is not None else 1.0,
        q=cfg["q"] if cfg.get("q") is not None else 0.5,
        eta=cfg["eta"] if cfg.get("eta") is not None else 1.0,
        c=cfg["c"] if cfg.get("c") is not None else 1.0,
        sigma0=cfg["sigma0"] if cfg.get("sigma0") is not None else 1.0,
        sigma1=cfg["sigma1"] if cfg.get("sigma1") is not None else 0.0,
        rho=cfg["rho"] if cfg.get("rho") is not None else 0.5,
        T=cfg["T"] if cfg.get("T") is not None else 1.0,
        x0=cfg["x0"] if cfg.get("x0") is not None else 1.0,
    )
    _defaults(cfg, params.T)
    _require_seed(cfg)
    cfg["init"] = f"point:{params.x0!r}"
    dyn, cost = riccati_mod.systemic_risk_model(params)
    out = cfg["out"]
    save_model(os.path.join(out, "model.txt"), dyn, cost, params.T)
    sol, qv = _solved(dyn, cost, params.T, cfg)
    riccati_mod.save_riccati_csv(sol, os.path.join(out, "riccati.csv"))
    policy_mod.save_policy_csv(qv, os.path.join(out, "policy.csv"))

    lam_cf = np.array([riccati_mod.closed_form_lambda(params, t) for t in sol.grid])
    lam_num = sol.Lam[:, 0, 0]
    with open(os.path.join(out, "lambda_compare.csv"), "w") as fh:
        fh.write("t,lambda_numeric,lambda_closed_form,abs_err\n")
        for t, a, b in zip(sol.grid, lam_num, lam_cf):
            fh.write(f"{float(t)!r},{float(a)!r},{float(b)!r},{float(abs(a - b))!r}\n")
    max_err = float(np.max(np.abs(lam_num - lam_cf)))

    model = lq_dynamics_spec(dyn, cost, params.T)
    control = FeedbackControl(FeedbackPolicy(qv))
    mu0 = sample_initial(_parse_init(cfg["init"], 1), cfg["particles"], cfg["seed"])
    _write_trajectories(dict(cfg, paths=min(cfg["paths"], 4), stride=max(cfg["stride"], 10)),
                        model, control, mu0, params.T, out)
    est = verify_mod.estimate_cost(model, control, 0.0, mu0, cfg["particles"],
                                   cfg["paths"], cfg["dt"], cfg["seed"])
    w0 = value(qv, 0.0, mu0)
    dp, dm = riccati_mod.delta_pm(params)
    report = {
        "command": "systemic-risk",
        "delta_plus": dp,
        "delta_minus": dm,
        "lambda0": float(lam_num[0]),
        "lambda_terminal": float(lam_num[-1]),
        "max_lambda_abs_err": max_err,
        "cost_mean": est.mean,
        "cost_stderr": est.stderr,
        "value_at_0": w0,
        "cost_value_gap": est.mean - w0,
        "config": _public_config(cfg),
    }
    _json_dump(os.path.join(out, "systemic_risk.json"), report)
    print(f"delta+ = {dp!r}, delta- = {dm!r}")
    print(f"Lambda(0) = {float(lam_num[0])!r} (closed form {float(lam_cf[0])!r}, "
          f"max abs err {max_err:.3e})")
    print(f"cost {est.mean:.6f} +- {est.stderr:.6f} vs value {w0:.6f}")
    return 0


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _merge_config(args)
        command = cfg["command"]
        if command == "solve":
            return cmd_solve(cfg)
        if command == "simulate":
            return cmd_simulate(cfg)
        if command == "cost":
            return cmd_cost(cfg)
        if command == "verify":
            return cmd_verify(cfg)
        return cmd_systemic_risk(cfg)
    except (NonPositiveGain, NumericalBlowup) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
