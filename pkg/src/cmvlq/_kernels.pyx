# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled Euler-Maruyama loop for scalar LQ models under affine feedback.

Every floating-point operation here mirrors the numpy fallback in
simulator._run_fast_scalar, including the index-ascending pairwise tree
used for particle means, so both backends produce bit-identical
trajectories.  The build disables FMA contraction for the same reason.
"""

from libc.math cimport fabs

DEF BLOWUP_LIMIT = 1e12


cdef double _tree_sum(double* w, Py_ssize_t n) noexcept nogil:
    # pairwise tree, identical order to measure.tree_sum; destroys w
    cdef Py_ssize_t s = 1, i
    while s < n:
        i = 0
        while i + s < n:
            w[i] = w[i] + w[i + s]
            i += 2 * s
        s *= 2
    return w[0]


def em_scalar_path(double[:, ::1] states, double[::1] means,
                   double[::1] K1, double[::1] K2, double[::1] kk,
                   double b0, double B, double Bbar, double C,
                   double th, double D, double Dbar, double F,
                   double th0, double D0, double D0bar, double F0,
                   double dt, double[::1] dw0, double[:, ::1] db,
                   double[::1] scratch):
    """Fill states[1:] and means from states[0]; return failing step or -1.

    states is (K+1, N) with row 0 holding the initial particles; dw0 and db
    are increments already scaled by sqrt(dt).
    """
    cdef Py_ssize_t n_steps = states.shape[0] - 1
    cdef Py_ssize_t n = states.shape[1]
    cdef Py_ssize_t k, i
    cdef double m, a, bv, sv, s0v, xi, xn, dwk
    cdef int bad = -1

    with nogil:
        for k in range(n_steps):
            for i in range(n):
                scratch[i] = states[k, i]
            m = _tree_sum(&scratch[0], n) / n
            means[k] = m
            dwk = dw0[k]
            for i in range(n):
                xi = states[k, i]
                a = K1[k] * (xi - m) + K2[k] * m + kk[k]
                bv = b0 + B * xi + Bbar * m + C * a
                sv = th + D * xi + Dbar * m + F * a
                s0v = th0 + D0 * xi + D0bar * m + F0 * a
                xn = xi + bv * dt + sv * db[k, i] + s0v * dwk
                states[k + 1, i] = xn
                if not (fabs(xn) <= BLOWUP_LIMIT):
                    bad = <int> k
            if bad >= 0:
                break
        if bad < 0:
            for i in range(n):
                scratch[i] = states[n_steps, i]
            means[n_steps] = _tree_sum(&scratch[0], n) / n
    return bad
