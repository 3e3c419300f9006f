"""Decorrelated-score debiasing of individual covariate effects.

For a target ``(j, k)`` the nuisance of item ``j`` is
``xi = (beta_j0, beta_{j,-k}, gamma_j)`` with design row
``Z_{i,-k} = (1, X_{i,-k}, U_i)``. Steps:

1. ``w_hat`` solves the lasso-type quadratic
   ``0.5 w' H_xx w - w' H_xt + lambda' ||w||_1`` where ``H`` is the weighted
   Gram matrix ``(1/n_j) sum_i nu_ij Z_i Z_i'`` at the fitted predictor and
   ``nu = -l''``;
2. the decorrelated score ``S`` and partial information ``F`` are averaged
   over subjects observed on item ``j``;
3. ``beta_tilde = beta_hat + S / F`` with standard error ``1/sqrt(n_j F)``.

Information quantities use the positive weight ``nu``; this is the same
estimator as writing the correction with ``l''`` in both ``F`` and the update.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm

from ._solvers import proximal_gradient, soft_threshold
from .altfit import FitResult
from .model import DataSet, linear_predictor


class DegenerateInformationError(ArithmeticError):
    """Partial information too small for inference on this target."""


@dataclass(frozen=True)
class DebiasTarget:
    item: int
    covariate: int


@dataclass
class DebiasReport:
    item: int
    covariate: int
    beta_hat: float
    beta_tilde: float
    info_F: float
    se: float
    z: float
    p_value: float
    ci_low: float
    ci_high: float
    w_hat_support: int
    lambda_prime: float
    score: float = float("nan")
    n_obs: int = 0
    flagged: bool = False
    error: str = ""

    def as_dict(self):
        return asdict(self)


def _as_target(target):
    if isinstance(target, DebiasTarget):
        return target
    j, k = target
    return DebiasTarget(int(j), int(k))


class _ItemContext:
    """Quantities shared by every target on one item."""

    def __init__(self, data: DataSet, fit: FitResult, j: int, W=None):
        params = fit.params
        if not 0 <= j < data.q:
            raise IndexError(f"item {j} out of range [0, {data.q})")
        if W is None:
            W = linear_predictor(data, params)
        rows = data.mask[:, j]
        self.j = j
        self.rows = rows
        self.n_j = int(rows.sum())
        self.family = data.family_per_item[j]
        self.Z = np.hstack([np.ones((self.n_j, 1)), data.X[rows], params.U[rows]])
        self.y = data.Y[rows, j]
        self.w = W[rows, j]
        self.nu = self.family.variance(self.w)
        self.H = (self.Z * self.nu[:, None]).T @ self.Z / self.n_j
        self.p = data.p
        self.beta_row = params.B[j]


def default_lambda_prime(n, q, p, support, c=0.5):
    """``c * (sqrt(log n / q) + sqrt(s) * sqrt(log p / n))`` with ``s`` the fitted support size."""
    return c * (math.sqrt(math.log(n) / q) + math.sqrt(support) * math.sqrt(math.log(max(p, 2)) / n))


def _solve_decorrelation(H, cols, lam, max_iter, tol, w0=None):
    """Decorrelation vectors for several columns of one Gram matrix.

    Each row of the returned ``(m, d)`` array has a structural zero at its own
    target column; the remaining entries are the coefficients on ``Z_{-k}``.
    """
    d = H.shape[0]
    m = len(cols)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (m,))
    fixed = np.zeros((m, d), dtype=bool)
    fixed[np.arange(m), cols] = True
    h = H[:, cols].T.copy()  # (m, d)
    h[fixed] = 0.0
    diag = np.diag(H)
    for r, c in enumerate(cols):
        if np.any(np.delete(diag, c) <= 0):
            raise DegenerateInformationError("weighted design has a zero diagonal entry")
    L = float(np.linalg.eigvalsh(H)[-1])
    step = np.full(m, 1.0 / L)

    def value(w):
        return 0.5 * ((w @ H) * w).sum(axis=1) - (w * h).sum(axis=1)

    def grad(w):
        return w @ H - h

    def penalty(w):
        return lam * np.abs(w).sum(axis=1)

    def prox(z, t):
        out = soft_threshold(z, (t * lam)[:, None])
        out[fixed] = 0.0
        return out

    x0 = np.zeros((m, d)) if w0 is None else w0
    w, obj, _ = proximal_gradient(grad, value, penalty, prox, x0, step, max_iter, accelerate=True,
                                  tol=max(tol, 1e-7), what="decorrelation target")
    if tol >= 1e-7:
        return w, obj
    # exact solve on the detected support and signs; iterate further only where KKT fails
    pending = []
    for r, c in enumerate(cols):
        exact = _polish(H, h[r], c, lam[r], w[r])
        if exact is None:
            pending.append(r)
        else:
            w[r] = exact
    if pending:
        rows = np.array(pending)
        sub_lam, sub_fixed, sub_h = lam[rows], fixed[rows], h[rows]
        w[rows], _, _ = proximal_gradient(
            lambda v: v @ H - sub_h,
            lambda v: 0.5 * ((v @ H) * v).sum(axis=1) - (v * sub_h).sum(axis=1),
            lambda v: sub_lam * np.abs(v).sum(axis=1),
            lambda z, t: np.where(sub_fixed, 0.0, soft_threshold(z, (t * sub_lam)[:, None])),
            w[rows], step[rows], max_iter, accelerate=True, tol=tol, what="decorrelation target")
    return w, value(w) + penalty(w)


def _polish(H, h, c, lam, w):
    """Solve the KKT system on the support and signs of ``w``; ``None`` if they are not optimal."""
    act = np.flatnonzero(w)
    act = act[act != c]
    out = np.zeros_like(w)
    if act.size:
        sgn = np.sign(w[act])
        try:
            out[act] = np.linalg.solve(H[np.ix_(act, act)], h[act] - lam * sgn)
        except np.linalg.LinAlgError:
            return None
        if np.any(np.sign(out[act]) != sgn):
            return None
    g = h - H @ out
    g[act] = 0.0
    g[c] = 0.0
    if np.max(np.abs(g)) > lam * (1 + 1e-9) + 1e-13:
        return None
    return out


def decorrelate(data: DataSet, fit: FitResult, target, lambda_prime=None, max_iter=20000, tol=1e-10,
                _ctx=None):
    """Decorrelation vector ``w_hat`` of length ``p + K`` on ``(1, X_{-k}, U)``."""
    t = _as_target(target)
    if not 0 <= t.covariate < data.p:
        raise IndexError(f"covariate {t.covariate} out of range [0, {data.p})")
    ctx = _ctx or _ItemContext(data, fit, t.item)
    lam = _lambda_prime(ctx, data, lambda_prime, [1 + t.covariate])
    w, _ = _solve_decorrelation(ctx.H, [1 + t.covariate], lam, max_iter, tol)
    return np.delete(w[0], 1 + t.covariate)


def decorrelation_objective(H, c, w_full, lam):
    """Objective of the decorrelation problem for column ``c`` (``w_full[c]`` ignored)."""
    w = np.array(w_full, dtype=float)
    w[c] = 0.0
    h = H[:, c].copy()
    h[c] = 0.0
    return float(0.5 * w @ H @ w - w @ h + lam * np.abs(w).sum())


def _lambda_prime(ctx, data, lambda_prime, cols=None):
    """Resolve ``lambda_prime`` (number, ``None`` for the default rule, or ``"cv"``)."""
    if lambda_prime is None or isinstance(lambda_prime, str):
        support = int(np.count_nonzero(ctx.beta_row))
        base = default_lambda_prime(ctx.n_j, data.q, data.p, support)
        if lambda_prime is None:
            return base
        if lambda_prime != "cv":
            raise ValueError("lambda_prime must be a number, None or 'cv'")
        return cv_lambda_prime(ctx, cols, base * np.geomspace(1.0, 0.01, 8))
    if lambda_prime < 0:
        raise ValueError("lambda_prime must be nonnegative")
    return float(lambda_prime)


def cv_lambda_prime(ctx, cols, grid, folds=5, max_iter=5000, tol=1e-7):
    """Per-column ``lambda_prime`` minimizing held-out decorrelation loss.

    Folds are contiguous residues of the observed-row index, so the choice is
    deterministic. Ties go to the larger value. Each fold walks the grid from
    large to small with warm starts; selection needs less accuracy than the
    final solve.
    """
    cols = list(cols)
    grid = sorted((float(g) for g in grid), reverse=True)
    idx = np.arange(ctx.n_j) % folds
    WZ = ctx.Z * ctx.nu[:, None]
    loss = np.zeros((len(grid), len(cols)))
    for f in range(folds):
        tr, te = idx != f, idx == f
        H_tr = WZ[tr].T @ ctx.Z[tr] / tr.sum()
        H_te = WZ[te].T @ ctx.Z[te] / te.sum()
        h_te = H_te[:, cols].T.copy()
        h_te[np.arange(len(cols)), cols] = 0.0
        w = None
        for g, lam in enumerate(grid):
            w, _ = _solve_decorrelation(H_tr, cols, lam, max_iter, tol, w0=w)
            loss[g] += 0.5 * ((w @ H_te) * w).sum(axis=1) - (w * h_te).sum(axis=1)
    return np.array([grid[g] for g in loss.argmin(axis=0)])


def score_and_info(data: DataSet, fit: FitResult, target, w_hat, _ctx=None, at_null=False):
    """Decorrelated score ``S`` and partial information ``F`` (positive)."""
    t = _as_target(target)
    ctx = _ctx or _ItemContext(data, fit, t.item)
    w_hat = np.asarray(w_hat, dtype=float)
    if not np.all(np.isfinite(w_hat)):
        raise ValueError("w_hat must be finite")
    c = 1 + t.covariate
    xk = ctx.Z[:, c]
    d = xk - np.delete(ctx.Z, c, axis=1) @ w_hat
    w = ctx.w
    nu = ctx.nu
    if at_null:
        w = w - ctx.beta_row[t.covariate] * xk
        nu = ctx.family.variance(w)
    S = float(np.mean(ctx.family.dloglik(ctx.y, w) * d))
    F = float(np.mean(nu * xk * d))
    if not F > 1e-10:
        raise DegenerateInformationError(
            f"degenerate partial information F={F:.3g} for item {t.item}, covariate {t.covariate}"
        )
    return S, F


def debias_one(data: DataSet, fit: FitResult, target, lambda_prime=None, alpha=0.05, at_null=False,
               max_iter=20000, tol=1e-10, _ctx=None) -> DebiasReport:
    """Debiased estimate, Wald test of ``beta_jk = 0`` and confidence interval.

    With ``at_null=True`` the score is evaluated with ``beta_jk`` set to zero
    (the classical decorrelated score test) instead of at the estimate.
    """
    t = _as_target(target)
    if not 0 <= t.covariate < data.p:
        raise IndexError(f"covariate {t.covariate} out of range [0, {data.p})")
    ctx = _ctx or _ItemContext(data, fit, t.item)
    lam = _lambda_prime(ctx, data, lambda_prime, [1 + t.covariate])
    w_full, _ = _solve_decorrelation(ctx.H, [1 + t.covariate], lam, max_iter, tol)
    return _report(ctx, t, w_full[0], float(np.ravel(lam)[0]), alpha, at_null)


def _report(ctx, t, w_full, lam, alpha, at_null):
    c = 1 + t.covariate
    w_hat = np.delete(w_full, c)
    S, F = score_and_info(None, None, t, w_hat, _ctx=ctx, at_null=at_null)
    beta_hat = float(ctx.beta_row[t.covariate])
    start = 0.0 if at_null else beta_hat
    beta_tilde = start + S / F
    se = 1.0 / math.sqrt(ctx.n_j * F)
    z = beta_tilde / se
    pval = float(2.0 * norm.sf(abs(z)))
    half = float(norm.ppf(1.0 - alpha / 2.0)) * se
    return DebiasReport(
        item=t.item, covariate=t.covariate, beta_hat=beta_hat, beta_tilde=float(beta_tilde),
        info_F=F, se=se, z=float(z), p_value=pval, ci_low=beta_tilde - half, ci_high=beta_tilde + half,
        w_hat_support=int(np.count_nonzero(w_hat)), lambda_prime=lam, score=S, n_obs=ctx.n_j,
    )


@dataclass
class ScreenResult:
    reports: list
    alpha: float
    correction: str
    threshold: float

    @property
    def flags(self):
        return [r.flagged for r in self.reports]

    def biased_item_counts(self, p=None):
        """Number of flagged items per covariate, keyed by covariate index."""
        covs = range(p) if p is not None else sorted({r.covariate for r in self.reports})
        counts = {k: set() for k in covs}
        for r in self.reports:
            if r.flagged:
                counts.setdefault(r.covariate, set()).add(r.item)
        return {k: len(v) for k, v in counts.items()}


def screen(data: DataSet, fit: FitResult, targets, lambda_prime=None, alpha=0.05, correction="none",
           at_null=False, max_iter=20000, tol=1e-10) -> ScreenResult:
    """Debias many targets; flag rejections with optional Bonferroni correction.

    Targets that fail (degenerate information) get a report with NaN fields
    and the error message instead of aborting the batch.
    """
    targets = [_as_target(t) for t in targets]
    if not targets:
        raise ValueError("targets must be nonempty")
    if correction not in ("none", "bonferroni"):
        raise ValueError("correction must be 'none' or 'bonferroni'")
    threshold = alpha / len(targets) if correction == "bonferroni" else alpha
    W = linear_predictor(data, fit.params)
    by_item = {}
    for pos, t in enumerate(targets):
        by_item.setdefault(t.item, []).append(pos)
    reports = [None] * len(targets)
    for j, positions in by_item.items():
        ctx = _ItemContext(data, fit, j, W=W)
        uniq = sorted({targets[pos].covariate for pos in positions})
        for k in uniq:
            if not 0 <= k < data.p:
                raise IndexError(f"covariate {k} out of range [0, {data.p})")
        try:
            lam = np.broadcast_to(_lambda_prime(ctx, data, lambda_prime, [1 + k for k in uniq]), (len(uniq),))
            w_all, _ = _solve_decorrelation(ctx.H, [1 + k for k in uniq], lam, max_iter, tol)
        except DegenerateInformationError as exc:
            w_all = None
            err = str(exc)
        for r, k in enumerate(uniq):
            t = DebiasTarget(j, k)
            try:
                if w_all is None:
                    raise DegenerateInformationError(err)
                rep = _report(ctx, t, w_all[r], float(lam[r]), alpha, at_null)
            except DegenerateInformationError as exc:
                nan = float("nan")
                lam_k = float(lam[r]) if w_all is not None else nan
                rep = DebiasReport(j, k, float(ctx.beta_row[k]), nan, nan, nan, nan, nan, nan, nan,
                                   0, lam_k, n_obs=ctx.n_j, error=str(exc))
            rep.flagged = bool(rep.p_value <= threshold) if not rep.error else False
            for pos in positions:
                if targets[pos].covariate == k:
                    reports[pos] = DebiasReport(**rep.as_dict())
    return ScreenResult(reports, alpha, correction, threshold)
