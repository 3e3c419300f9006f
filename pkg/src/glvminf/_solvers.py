"""Batched first-order solvers shared by the fitting and debiasing code.

A "batch" is ``m`` independent problems stacked as the rows of an ``(m, d)``
array; objectives, gradients and steps are all row-wise, so a whole phase of the
alternating algorithm (all items, or all subjects) is one solver call.
"""

from __future__ import annotations

import numpy as np


class NumericalError(FloatingPointError):
    """A non-finite objective or gradient appeared during optimization."""

    def __init__(self, msg, index=None):
        self.index = index
        super().__init__(msg)


def soft_threshold(z, level):
    return np.sign(z) * np.maximum(np.abs(z) - level, 0.0)


def masked_sigma_max_sq(Z, mask, n_iter=30, exact_max_dim=0):
    """Squared top singular value of ``Z[mask[:, j]]`` for every column ``j``.

    Batched power iteration on ``Z_j^T Z_j``; returns shape ``(mask.shape[1],)``.
    Uses a fixed starting vector so the result is deterministic. When ``Z`` has
    at most ``exact_max_dim`` columns the masked Gram matrices are formed and
    their top eigenvalue is computed exactly instead.
    """
    n, d = Z.shape
    m = mask.shape[1]
    if d == 0:
        return np.zeros(m)
    maskf = mask.astype(float)
    if d <= exact_max_dim:
        G = np.einsum("nj,na,nb->jab", maskf, Z, Z, optimize=True)
        return np.linalg.eigvalsh(G)[:, -1]
    start = np.random.default_rng(12345).standard_normal(d) + 1.0
    V = np.tile(start / np.linalg.norm(start), (m, 1))
    est = np.zeros(m)
    for _ in range(n_iter):
        A = (Z @ V.T) * maskf  # (n, m): Z_j v_j
        est = (A * A).sum(axis=0)
        V = (Z.T @ A).T  # (m, d): Z_j^T Z_j v_j
        norms = np.linalg.norm(V, axis=1)
        norms[norms == 0] = 1.0
        V /= norms[:, None]
    A = (Z @ V.T) * maskf
    est = np.maximum(est, (A * A).sum(axis=0))
    return est


def proximal_gradient(
    grad,
    value,
    penalty,
    prox,
    x0,
    step,
    n_iter,
    accelerate=True,
    backtrack=False,
    tol=0.0,
    what="problem",
):
    """Minimize ``f(x_r) + g(x_r)`` independently for every row ``r``.

    Monotone FISTA (``accelerate=True``) or plain ISTA. Every accepted iterate
    has an objective no larger than the previous one, row by row.

    Parameters
    ----------
    grad : callable ``x -> grad (m, d)``
    value : callable ``x -> f (m,)``
    penalty : callable ``x -> g (m,)``
    prox : callable ``(z, t) -> x`` with per-row steps ``t`` of shape (m,)
    step : array (m,)
        Initial step sizes (``1/L`` per row).
    tol : float
        Stop early once the largest gradient-mapping entry is below ``tol``.

    Returns
    -------
    x : array (m, d)
    obj : array (m,) final objective values
    n_done : int, iterations run
    """
    x = np.array(x0, dtype=float, copy=True)
    m = x.shape[0]
    step = np.broadcast_to(np.asarray(step, dtype=float), (m,)).copy()
    Fx = value(x) + penalty(x)
    _check_finite(Fx, what, 0)
    y = x.copy()
    theta = np.ones(m)
    it = 0
    for it in range(1, n_iter + 1):
        gy = grad(y)
        _check_finite(gy, what, it)
        z = prox(y - step[:, None] * gy, step)
        fz = value(z)
        if backtrack:
            fy = value(y)
            for _ in range(60):
                diff = z - y
                bound = fy + (gy * diff).sum(axis=1) + (diff * diff).sum(axis=1) / (2.0 * step)
                bad = fz > bound + 1e-12 * np.abs(fy)
                if not bad.any():
                    break
                step[bad] *= 0.5
                z[bad] = prox(y[bad] - step[bad, None] * gy[bad], step[bad])
                fz = value(z)
        Fz = fz + penalty(z)
        _check_finite(Fz, what, it)
        better = Fz <= Fx
        x_new = np.where(better[:, None], z, x)
        F_new = np.where(better, Fz, Fx)
        if accelerate:
            # function-value restart: rows whose candidate was rejected drop momentum
            theta_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta * theta))
            b = ((theta - 1.0) / theta_new)[:, None]
            y = np.where(better[:, None], x_new + b * (x_new - x), x_new)
            theta = np.where(better, theta_new, 1.0)
        else:
            y = x_new
        x, Fx = x_new, F_new
        if tol > 0:
            gx = grad(x)
            gmap = (x - prox(x - step[:, None] * gx, step)) / step[:, None]
            if np.max(np.abs(gmap)) < tol:
                break
    return x, Fx, it


def _check_finite(a, what, it):
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a.reshape(a.shape[0], -1)))[0][0]
        raise NumericalError(f"non-finite value for {what} {bad} at inner iteration {it}", index=int(bad))
