# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled SMO solver: same algorithm and working-set rule as ``_smo_py``
(maximal-violating pair, lowest-index tie-break), with the gradient update
and on-the-fly RBF kernel rows in tight C loops."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, INFINITY

BACKEND_NAME = "compiled"

cdef double _TAU = 1e-12

# Snap width for pushing near-bound alphas onto the exact bound after each
# update (same rationale as in _smo_py: float drift otherwise makes the
# working-set rule cycle on degenerate pairs).
cdef double _SNAP = 1e-12


cdef void _kernel_row(const double[:, ::1] X, const double[::1] sq,
                      Py_ssize_t i, double gamma, double[::1] out) noexcept nogil:
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t k, c
    cdef double dot
    for k in range(n):
        dot = 0.0
        for c in range(d):
            dot += X[i, c] * X[k, c]
        out[k] = exp(-gamma * (sq[i] + sq[k] - 2.0 * dot))


def solve(X, y, double C, double gamma, double tol, long long max_updates):
    """Run SMO; returns (alpha, bias, n_updates, final_violation, converged)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[:, ::1] Xv = X
    cdef const double[::1] yv = y
    cdef Py_ssize_t n = Xv.shape[0]

    alpha_arr = np.zeros(n, dtype=np.float64)
    grad_arr = -np.ones(n, dtype=np.float64)
    sq_arr = np.einsum("ij,ij->i", X, X)
    ki_arr = np.empty(n, dtype=np.float64)
    kj_arr = np.empty(n, dtype=np.float64)

    cdef double[::1] alpha = alpha_arr
    cdef double[::1] grad = grad_arr
    cdef const double[::1] sq = sq_arr
    cdef double[::1] Ki = ki_arr
    cdef double[::1] Kj = kj_arr

    cdef Py_ssize_t i, j, k
    cdef long long updates = 0
    cdef double m, M, sc, eta, L, H, aj_new, daj, dai, yi, yj
    cdef bint converged = 0

    m = INFINITY
    M = -INFINITY
    with nogil:
        while True:
            m = -INFINITY
            M = INFINITY
            i = -1
            j = -1
            for k in range(n):
                sc = -yv[k] * grad[k]
                if (yv[k] > 0 and alpha[k] < C) or (yv[k] < 0 and alpha[k] > 0):
                    if sc > m:
                        m = sc
                        i = k
                if (yv[k] < 0 and alpha[k] < C) or (yv[k] > 0 and alpha[k] > 0):
                    if sc < M:
                        M = sc
                        j = k
            if i < 0 or j < 0:
                m = 0.0
                M = 0.0
                converged = 1
                break
            if m - M < tol:
                converged = 1
                break
            if updates >= max_updates:
                break

            _kernel_row(Xv, sq, i, gamma, Ki)
            _kernel_row(Xv, sq, j, gamma, Kj)
            eta = Ki[i] + Kj[j] - 2.0 * Ki[j]
            if eta < _TAU:
                eta = _TAU

            yi = yv[i]
            yj = yv[j]
            if yi != yj:
                L = alpha[j] - alpha[i]
                if L < 0.0:
                    L = 0.0
                H = C + alpha[j] - alpha[i]
                if H > C:
                    H = C
            else:
                L = alpha[i] + alpha[j] - C
                if L < 0.0:
                    L = 0.0
                H = alpha[i] + alpha[j]
                if H > C:
                    H = C

            aj_new = alpha[j] + yj * (M - m) / eta
            if aj_new < L:
                aj_new = L
            elif aj_new > H:
                aj_new = H
            daj = aj_new - alpha[j]
            if daj == 0.0:
                # L == H for the selected pair: no feasible move left
                break
            dai = -yi * yj * daj
            alpha[i] += dai
            alpha[j] = aj_new
            if alpha[i] < _SNAP * C:
                alpha[i] = 0.0
            elif alpha[i] > C - _SNAP * C:
                alpha[i] = C
            if alpha[j] < _SNAP * C:
                alpha[j] = 0.0
            elif alpha[j] > C - _SNAP * C:
                alpha[j] = C
            for k in range(n):
                grad[k] += yv[k] * (yi * dai * Ki[k] + yj * daj * Kj[k])
            updates += 1

    bias = _bias(alpha_arr, grad_arr, y, C, m, M)
    violation = max(m - M, 0.0)
    return alpha_arr, float(bias), int(updates), float(violation), bool(converged)


def _bias(alpha, grad, y, double C, double m, double M):
    free = (alpha > 0.0) & (alpha < C)
    if free.any():
        return float(np.mean((-y * grad)[free]))
    import math
    if math.isfinite(m) and math.isfinite(M):
        return 0.5 * (m + M)
    return 0.0
