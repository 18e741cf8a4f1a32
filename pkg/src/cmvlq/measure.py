"""Equal-weight particle measures on R^d and the functionals built on them.

A measure is a cloud of N points, each carrying weight 1/N.  Every
functional used by the LQ theory (mean, quadratic moments, variance forms,
pushforwards by affine maps) is an exact finite sum over the particles, so
identity checks downstream carry no quadrature error.

Reductions over the particle index always go through ``tree_sum``, an
index-ascending pairwise tree whose floating-point result is fixed by the
data alone (no dependence on threading or chunking).  Sums over the d
coordinates are plain left-to-right loops; d is small and fixed.
"""

from __future__ import annotations

import numpy as np

W2_MAX_DIM = 1


def tree_sum(a, axis=0):
    """Sum along `axis` with a fixed index-ascending pairwise tree.

    At level s the element at index i+s is added into index i for
    i = 0, 2s, 4s, ...; elements without a partner pass through.  The
    compiled simulation kernel implements the same reduction, so both
    backends produce bit-identical means.
    """
    w = np.array(np.moveaxis(np.asarray(a, dtype=np.float64), axis, 0))
    n = w.shape[0]
    s = 1
    while s < n:
        head = w[0 : n - s : 2 * s]
        head += w[s : n : 2 * s]
        s *= 2
    return w[0]


def tree_mean(a, axis=0):
    n = np.asarray(a).shape[axis]
    return tree_sum(a, axis=axis) / n


class AffineMap:
    """Affine map x -> A x + b from R^d to R^m."""

    def __init__(self, A, b=None):
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        if A.ndim != 2:
            raise ValueError("A must be a matrix")
        self.A = A
        if b is None:
            self.b = np.zeros(A.shape[0])
        else:
            self.b = np.asarray(b, dtype=np.float64).reshape(A.shape[0])
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.b))):
            raise ValueError("affine map coefficients must be finite")

    @property
    def dim_in(self):
        return self.A.shape[1]

    @property
    def dim_out(self):
        return self.A.shape[0]

    @classmethod
    def identity(cls, d):
        return cls(np.eye(d))

    @classmethod
    def constant(cls, c, d):
        c = np.atleast_1d(np.asarray(c, dtype=np.float64))
        return cls(np.zeros((c.shape[0], d)), c)

    @classmethod
    def zero(cls, m, d):
        return cls(np.zeros((m, d)))

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return self.A @ x + self.b
        return x @ self.A.T + self.b


class EmpiricalMeasure:
    """Equal-weight cloud of N >= 1 points in R^d.

    Points are copied and frozen at construction; instances are immutable
    and safe to share.
    """

    __slots__ = ("points", "_mean")

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError("points must be an (N, d) array with N, d >= 1")
        if not np.all(np.isfinite(pts)):
            raise ValueError("particle cloud contains non-finite coordinates")
        pts = pts.copy()
        pts.setflags(write=False)
        self.points = pts
        self._mean = None

    @classmethod
    def _wrap(cls, pts):
        # internal: adopt an already-validated float64 (N, d) array, no copy
        obj = object.__new__(cls)
        pts.setflags(write=False)
        object.__setattr__(obj, "points", pts)
        object.__setattr__(obj, "_mean", None)
        return obj

    def __setattr__(self, name, value):
        if name == "_mean" or not hasattr(self, "points"):
            object.__setattr__(self, name, value)
        else:
            raise AttributeError("EmpiricalMeasure is immutable")

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]


def _check_form(mu, L):
    L = np.atleast_2d(np.asarray(L, dtype=np.float64))
    if L.shape != (mu.dim, mu.dim):
        raise ValueError(f"form has shape {L.shape}, expected ({mu.dim}, {mu.dim})")
    return L


def mean(mu):
    """Particle mean, cached on the (immutable) measure."""
    if mu._mean is None:
        mu._mean = tree_mean(mu.points, axis=0)
    return mu._mean


def quad_moment(mu, L):
    """Mean of x^T L x over the cloud."""
    L = _check_form(mu, L)
    vals = np.einsum("ni,ij,nj->n", mu.points, L, mu.points)
    return float(tree_mean(vals))


def variance_form(mu, L):
    """quad_moment(mu, L) minus the same form at the mean."""
    L = _check_form(mu, L)
    m = mean(mu)
    return quad_moment(mu, L) - float(m @ L @ m)


def pushforward(mu, a):
    """Image measure under an affine map: the cloud {a(x_i)}."""
    if a.dim_in != mu.dim:
        raise ValueError(f"map expects dimension {a.dim_in}, cloud has {mu.dim}")
    return EmpiricalMeasure(a(mu.points))


def w2_1d(mu, nu):
    """Exact 2-Wasserstein distance between two 1-d clouds of equal size.

    Sorting realizes the optimal coupling for equal-weight samples on the
    line.  Dimensions above 1 are unsupported by design.
    """
    if mu.dim > W2_MAX_DIM or nu.dim > W2_MAX_DIM:
        raise ValueError("w2_1d supports dimension 1 only")
    if mu.n != nu.n:
        raise ValueError("w2_1d requires equal particle counts")
    xs = np.sort(mu.points[:, 0])
    ys = np.sort(nu.points[:, 0])
    return float(np.sqrt(tree_mean((xs - ys) ** 2)))


def l2_norm(mu):
    """Square root of the mean squared Euclidean norm of the points."""
    sq = np.einsum("ni,ni->n", mu.points, mu.points)
    return float(np.sqrt(tree_mean(sq)))


def save_csv(mu, path):
    """One row per particle, header x0,...,x{d-1}, full-precision floats."""
    header = ",".join(f"x{j}" for j in range(mu.dim))
    lines = [header]
    for row in mu.points:
        lines.append(",".join(repr(float(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_csv(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"empty particle file: {path}")
    header = lines[0].split(",")
    if header[0] != "x0":
        raise ValueError(f"bad particle file header: {lines[0]!r}")
    pts = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    arr = np.asarray(pts, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != len(header):
        raise ValueError("particle file rows do not match header width")
    return EmpiricalMeasure(arr)
