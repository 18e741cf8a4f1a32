"""Linear-quadratic problem data.

Holds the affine dynamics coefficients and quadratic cost matrices of the
controlled mean-field model, the lifted (measure-level) running and
terminal costs, the gain matrices entering the optimal feedback, and the
standing positivity condition on the cost data.

Conventions: the state lives in R^d, controls in R^m, and the model has one
idiosyncratic and one common Brownian motion, so the volatility coefficients
are R^d-valued.  All cost matrices are symmetrized on construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .measure import AffineMap, mean, pushforward, quad_moment, tree_mean, variance_form

SYM_TOL = 1e-12
PD_THRESHOLD = 1e-10

MODEL_KEYS = [
    "d", "m", "T",
    "b0", "B", "Bbar", "C", "theta", "D", "Dbar", "F",
    "theta0", "D0", "D0bar", "F0",
    "Q2", "Q2bar", "R2", "P2", "P2bar", "M2",
]


def _as_matrix(x, rows, cols, name):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(rows, cols) if rows * cols == a.size else a[:, None]
    if a.shape != (rows, cols):
        raise ValueError(f"{name} has shape {a.shape}, expected ({rows}, {cols})")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _as_vector(x, n, name):
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if a.size == 1 and n > 1:
        raise ValueError(f"{name} has size 1, expected {n}")
    if a.shape != (n,):
        raise ValueError(f"{name} has shape {a.shape}, expected ({n},)")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _symmetric(x, n, name):
    a = _as_matrix(x, n, n, name)
    gap = float(np.max(np.abs(a - a.T))) if n > 1 else 0.0
    if gap > SYM_TOL * max(1.0, float(np.max(np.abs(a)))):
        raise ValueError(f"{name} is not symmetric (max asymmetry {gap:.3e})")
    return (a + a.T) / 2.0


@dataclass(frozen=True)
class LqDynamics:
    """Affine coefficients of the controlled dynamics.

    drift      b0 + B x + Bbar mubar + C a(x)
    idio vol   theta + D x + Dbar mubar + F a(x)
    common vol theta0 + D0 x + D0bar mubar + F0 a(x)
    """

    b0: np.ndarray
    B: np.ndarray
    Bbar: np.ndarray
    C: np.ndarray
    theta: np.ndarray
    D: np.ndarray
    Dbar: np.ndarray
    F: np.ndarray
    theta0: np.ndarray
    D0: np.ndarray
    D0bar: np.ndarray
    F0: np.ndarray

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        d = B.shape[0]
        C = np.asarray(self.C, dtype=np.float64)
        if C.ndim == 0:
            C = C.reshape(1, 1)
        elif C.ndim == 1:
            C = C.reshape(d, -1)
        m = C.shape[1]
        norm = {
            "b0": _as_vector(self.b0, d, "b0"),
            "B": _as_matrix(B, d, d, "B"),
            "Bbar": _as_matrix(self.Bbar, d, d, "Bbar"),
            "C": _as_matrix(C, d, m, "C"),
            "theta": _as_vector(self.theta, d, "theta"),
            "D": _as_matrix(self.D, d, d, "D"),
            "Dbar": _as_matrix(self.Dbar, d, d, "Dbar"),
            "F": _as_matrix(self.F, d, m, "F"),
            "theta0": _as_vector(self.theta0, d, "theta0"),
            "D0": _as_matrix(self.D0, d, d, "D0"),
            "D0bar": _as_matrix(self.D0bar, d, d, "D0bar"),
            "F0": _as_matrix(self.F0, d, m, "F0"),
        }
        for k, v in norm.items():
            v.setflags(write=False)
            object.__setattr__(self, k, v)

    @property
    def d(self):
        return self.B.shape[0]

    @property
    def m(self):
        return self.C.shape[1]


@dataclass(frozen=True)
class LqCost:
    """Quadratic cost matrices; M2 is the state-control cross weight.

    Pointwise running cost x'Q2 x + mubar'Q2bar mubar + a'R2 a + 2 x'M2 a,
    terminal cost x'P2 x + mubar'P2bar mubar.  M2 defaults to zero, which
    recovers the cross-term-free form.
    """

    Q2: np.ndarray
    Q2bar: np.ndarray
    R2: np.ndarray
    P2: np.ndarray
    P2bar: np.ndarray
    M2: np.ndarray = None

    def __post_init__(self):
        Q2 = np.atleast_2d(np.asarray(self.Q2, dtype=np.float64))
        d = Q2.shape[0]
        R2 = np.atleast_2d(np.asarray(self.R2, dtype=np.float64))
        m = R2.shape[0]
        norm = {
            "Q2": _symmetric(Q2, d, "Q2"),
            "Q2bar": _symmetric(self.Q2bar, d, "Q2bar"),
            "R2": _symmetric(R2, m, "R2"),
            "P2": _symmetric(self.P2, d, "P2"),
            "P2bar": _symmetric(self.P2bar, d, "P2bar"),
            "M2": _as_matrix(self.M2 if self.M2 is not None else np.zeros((d, m)), d, m, "M2"),
        }
        for k, v in norm.items():
            v.setflags(write=False)
            object.__setattr__(self, k, v)

    @property
    def d(self):
        return self.Q2.shape[0]

    @property
    def m(self):
        return self.R2.shape[0]


@dataclass(frozen=True)
class GainMatrices:
    """Control-weight and coupling matrices at one time.

    U, V weight the centered and mean parts of the control; S, Z couple the
    control to the centered state and to the mean; Y is the affine term.
    Positive definiteness of U and V is checked, never assumed.
    """

    t: float
    U: np.ndarray
    V: np.ndarray
    S: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    min_eig_u: float
    min_eig_v: float
    pd_ok: bool = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "pd_ok", bool(self.min_eig_u > PD_THRESHOLD and self.min_eig_v > PD_THRESHOLD))


def gain_blocks(Lam, Gam, gam, dyn, cost):
    """Raw (U, V, S, Z, Y) without eigenvalue diagnostics.

    Note the mean-coupling Z pairs Gam with F0 (the common-noise control
    loading), mirroring how V pairs Gam with F0; this is what makes the
    square-completion identity exact for all coefficient choices.
    """
    Lam = np.atleast_2d(np.asarray(Lam, dtype=np.float64))
    Gam = np.atleast_2d(np.asarray(Gam, dtype=np.float64))
    gam = np.asarray(gam, dtype=np.float64).reshape(-1)
    F, F0, C = dyn.F, dyn.F0, dyn.C
    U = F.T @ Lam @ F + F0.T @ Lam @ F0 + cost.R2
    V = F.T @ Lam @ F + F0.T @ Gam @ F0 + cost.R2
    U = (U + U.T) / 2.0
    V = (V + V.T) / 2.0
    S = dyn.D.T @ Lam @ F + dyn.D0.T @ Lam @ F0 + Lam @ C + cost.M2
    Z = (dyn.D + dyn.Dbar).T @ Lam @ F + (dyn.D0 + dyn.D0bar).T @ Gam @ F0 + Gam @ C + cost.M2
    Y = C.T @ gam + 2.0 * F.T @ (Lam @ dyn.theta) + 2.0 * F0.T @ (Gam @ dyn.theta0)
    return U, V, S, Z, Y


def gains(t, Lam, Gam, gam, dyn, cost):
    """Gain matrices at time t, with positive-definiteness diagnostics."""
    U, V, S, Z, Y = gain_blocks(Lam, Gam, gam, dyn, cost)
    min_u = float(np.min(np.linalg.eigvalsh(U)))
    min_v = float(np.min(np.linalg.eigvalsh(V)))
    return GainMatrices(t=float(t), U=U, V=V, S=S, Z=Z, Y=Y, min_eig_u=min_u, min_eig_v=min_v)


def lifted_running_cost(mu, a, cost):
    """Measure-level running cost at cloud mu under the affine policy a.

    Exact particle sums of the variance form in Q2, the mean form in
    Q2+Q2bar, the pushforward second moment in R2, and the M2 cross term.
    """
    if a.dim_in != mu.dim:
        raise ValueError("policy input dimension does not match the cloud")
    if cost.d != mu.dim or cost.m != a.dim_out:
        raise ValueError("cost dimensions do not match cloud/policy")
    mbar = mean(mu)
    amu = pushforward(mu, a)
    val = variance_form(mu, cost.Q2)
    val += float(mbar @ (cost.Q2 + cost.Q2bar) @ mbar)
    val += quad_moment(amu, cost.R2)
    if np.any(cost.M2):
        cross = np.einsum("ni,ij,nj->n", mu.points, cost.M2, amu.points)
        val += 2.0 * float(tree_mean(cross))
    return val


def lifted_terminal_cost(mu, cost):
    """Measure-level terminal cost: Var-form in P2 plus mean form in P2+P2bar."""
    if cost.d != mu.dim:
        raise ValueError("cost dimension does not match the cloud")
    mbar = mean(mu)
    return variance_form(mu, cost.P2) + float(mbar @ (cost.P2 + cost.P2bar) @ mbar)


def check_standing_condition(cost, delta):
    """Eigenvalue tests for the positivity condition on the cost data.

    Requires P2 >= 0, P2+P2bar >= 0, Q2 >= 0, Q2+Q2bar >= 0 and R2 >= delta I.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")

    def min_eig(mat):
        return float(np.min(np.linalg.eigvalsh(mat)))

    eigs = {
        "P2": min_eig(cost.P2),
        "P2_plus_P2bar": min_eig(cost.P2 + cost.P2bar),
        "Q2": min_eig(cost.Q2),
        "Q2_plus_Q2bar": min_eig(cost.Q2 + cost.Q2bar),
        "R2": min_eig(cost.R2),
    }
    checks = {k: bool(v >= 0.0) for k, v in eigs.items() if k != "R2"}
    checks["R2_geq_delta"] = bool(eigs["R2"] >= delta)
    return {
        "ok": all(checks.values()),
        "checks": checks,
        "min_eigenvalues": eigs,
        "delta": float(delta),
    }


# ---------------------------------------------------------------------------
# model files: flat "key = value" text, matrices row-major with ';' between
# rows and ',' between entries

def _format_block(a):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    return ";".join(",".join(repr(float(v)) for v in row) for row in a)


def _parse_block(text, name):
    try:
        rows = [[float(v) for v in row.split(",")] for row in text.split(";")]
    except ValueError as exc:
        raise ValueError(f"cannot parse matrix for key {name!r}: {exc}") from None
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"ragged matrix for key {name!r}")
    return np.asarray(rows, dtype=np.float64)


def save_model(path, dyn, cost, T):
    d, m = dyn.d, dyn.m
    vals = {
        "d": str(d), "m": str(m), "T": repr(float(T)),
        "b0": _format_block(dyn.b0), "B": _format_block(dyn.B),
        "Bbar": _format_block(dyn.Bbar), "C": _format_block(dyn.C),
        "theta": _format_block(dyn.theta), "D": _format_block(dyn.D),
        "Dbar": _format_block(dyn.Dbar), "F": _format_block(dyn.F),
        "theta0": _format_block(dyn.theta0), "D0": _format_block(dyn.D0),
        "D0bar": _format_block(dyn.D0bar), "F0": _format_block(dyn.F0),
        "Q2": _format_block(cost.Q2), "Q2bar": _format_block(cost.Q2bar),
        "R2": _format_block(cost.R2), "P2": _format_block(cost.P2),
        "P2bar": _format_block(cost.P2bar), "M2": _format_block(cost.M2),
    }
    with open(path, "w") as fh:
        for key in MODEL_KEYS:
            fh.write(f"{key} = {vals[key]}\n")


def parse_kv_file(path):
    """Read a flat key=value file, ignoring blank lines and '#' comments."""
    out = {}
    with open(path) as fh:
        for ln_no, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln_no}: expected 'key = value'")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def load_model(path):
    """Parse a model file into (LqDynamics, LqCost, T)."""
    kv = parse_kv_file(path)
    missing = [k for k in MODEL_KEYS if k not in kv and k != "M2"]
    if missing:
        raise ValueError(f"model file {path} missing keys: {', '.join(missing)}")
    d = int(kv["d"])
    m = int(kv["m"])
    T = float(kv["T"])
    if d < 1 or m < 1 or T <= 0:
        raise ValueError("model file requires d >= 1, m >= 1, T > 0")

    def mat(name, rows, cols):
        return _as_matrix(_parse_block(kv[name], name), rows, cols, name)

    def vec(name, n):
        return _as_vector(_parse_block(kv[name], name).reshape(-1), n, name)

    dyn = LqDynamics(
        b0=vec("b0", d), B=mat("B", d, d), Bbar=mat("Bbar", d, d), C=mat("C", d, m),
        theta=vec("theta", d), D=mat("D", d, d), Dbar=mat("Dbar", d, d), F=mat("F", d, m),
        theta0=vec("theta0", d), D0=mat("D0", d, d), D0bar=mat("D0bar", d, d), F0=mat("F0", d, m),
    )
    cost = LqCost(
        Q2=mat("Q2", d, d), Q2bar=mat("Q2bar", d, d), R2=mat("R2", m, m),
        P2=mat("P2", d, d), P2bar=mat("P2bar", d, d),
        M2=mat("M2", d, m) if "M2" in kv else None,
    )
    return dyn, cost, T


def zero_control(dyn):
    """The identically-zero policy for this model's control dimension."""
    return AffineMap.zero(dyn.m, dyn.d)
