"""Pure-numpy SMO solver for the soft-margin RBF-kernel SVM dual.

This is the fallback backend; ``_smo`` (Cython) implements the same
algorithm with the identical working-set rule and is preferred when the
compiled extension is importable. Both solve

    min 0.5 a'Qa - e'a   s.t.  y'a = 0,  0 <= a_i <= C,

with Q_ij = y_i y_j K(x_i, x_j), by repeatedly optimizing the
maximal-violating pair: i maximizing -y_i g_i over the "up" set and j
minimizing it over the "down" set (ties resolved to the lowest index, which
makes training deterministic). Iteration stops when the violation m - M
drops below ``tol`` or after ``max_updates`` pair updates.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"

_TAU = 1e-12

# Alphas this close to a box bound are snapped onto it after each update;
# without the snap, float drift leaves points epsilon-inside the box, the
# working-set rule keeps reselecting them, and the pair step degenerates.
_SNAP = 1e-12


def solve(
    X: np.ndarray,
    y: np.ndarray,
    C: float,
    gamma: float,
    tol: float,
    max_updates: int,
    track_objective: bool = False,
):
    """Run SMO; returns (alpha, bias, n_updates, final_violation, converged
    [, objective_trace])."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n = X.shape[0]
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of the dual objective at alpha = 0
    sq = np.einsum("ij,ij->i", X, X)
    pos = y > 0

    trace: list[float] = []
    updates = 0
    m = np.inf
    M = -np.inf
    converged = False
    while True:
        score = -y * grad
        up = (pos & (alpha < C)) | (~pos & (alpha > 0))
        low = (~pos & (alpha < C)) | (pos & (alpha > 0))
        if not up.any() or not low.any():
            m, M = 0.0, 0.0
            converged = True
            break
        i = int(np.argmax(np.where(up, score, -np.inf)))
        j = int(np.argmin(np.where(low, score, np.inf)))
        m = float(score[i])
        M = float(score[j])
        if m - M < tol:
            converged = True
            break
        if updates >= max_updates:
            break

        Ki = np.exp(-gamma * (sq[i] + sq - 2.0 * (X @ X[i])))
        Kj = np.exp(-gamma * (sq[j] + sq - 2.0 * (X @ X[j])))
        eta = max(Ki[i] + Kj[j] - 2.0 * Ki[j], _TAU)

        if y[i] != y[j]:
            L = max(0.0, alpha[j] - alpha[i])
            H = min(C, C + alpha[j] - alpha[i])
        else:
            L = max(0.0, alpha[i] + alpha[j] - C)
            H = min(C, alpha[i] + alpha[j])

        # Biasless errors E_k = u(x_k) - y_k equal -score_k, so the classic
        # second-order step y_j (E_i - E_j) / eta becomes y_j (M - m) / eta.
        aj_new = min(max(alpha[j] + y[j] * (M - m) / eta, L), H)
        daj = aj_new - alpha[j]
        if daj == 0.0:
            # Pair cannot move (L == H); treat remaining violation as final.
            break
        dai = -y[i] * y[j] * daj
        alpha[i] += dai
        alpha[j] = aj_new
        snap = _SNAP * C
        for idx in (i, j):
            if alpha[idx] < snap:
                alpha[idx] = 0.0
            elif alpha[idx] > C - snap:
                alpha[idx] = C

        grad += y * (y[i] * dai * Ki + y[j] * daj * Kj)
        updates += 1
        if track_objective:
            trace.append(0.5 * (alpha.sum() - alpha @ grad))

    bias = _bias(alpha, grad, y, C, m, M)
    violation = max(m - M, 0.0)
    if track_objective:
        return alpha, bias, updates, violation, converged, np.asarray(trace)
    return alpha, bias, updates, violation, converged


def _bias(alpha, grad, y, C, m, M):
    """Mean of y_k - u(x_k) over free support vectors, else midpoint of the
    final violating interval."""
    free = (alpha > 0.0) & (alpha < C)
    if free.any():
        return float(np.mean((-y * grad)[free]))
    if np.isfinite(m) and np.isfinite(M):
        return 0.5 * (m + M)
    return 0.0
