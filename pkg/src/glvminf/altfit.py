"""Alternating estimation of item parameters and latent variables.

One outer iteration runs two phases:

1. every item ``j``: an L1-penalized GLM of ``y_j`` on ``(1, X, U_hat)`` with
   only the covariate block penalized, solved by ``M1`` proximal-gradient steps;
2. every subject ``i``: a box-constrained GLM for ``U_i`` given the item
   parameters, solved by ``M2`` projected-gradient steps.

Both phases are vectorized over items (subjects) and warm-started from the
previous outer iterate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._solvers import masked_sigma_max_sq, proximal_gradient, soft_threshold
from .families import FamilyPanel, get_family
from .model import DataSet, ParamSet, joint_objective, linear_predictor

STEP_RULES = ("lipschitz", "backtracking")


def default_M1(n) -> int:
    return int(math.ceil(10 * math.log(n)))


def default_M2(n, q) -> int:
    return int(math.ceil(10 * (math.log(n) + math.log(q))))


def default_lambda_grid(n, p, num=8):
    """Geometric grid of ``c * sqrt(log p / n)`` for ``c`` in ``[0.05, 1]``."""
    base = math.sqrt(math.log(max(p, 2)) / n)
    return list(base * np.geomspace(1.0, 0.05, num))


@dataclass
class FitConfig:
    """Tuning knobs of the alternating algorithm.

    ``M1``/``M2`` left as ``None`` resolve to ``ceil(10 log n)`` and
    ``ceil(10 (log n + log q))``.
    """

    lam: object = "cv"
    lambda_grid: list = None
    M1: int = None
    M2: int = None
    max_outer: int = 50
    tol_outer: float = 1e-4
    box_D: float = 10.0
    step_rule: str = "lipschitz"
    cv_folds: int = 5
    seed: int = 0
    accelerate: bool = True

    def __post_init__(self):
        if not self.tol_outer > 0:
            raise ValueError("tol_outer must be positive")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step_rule must be one of {STEP_RULES}")
        if isinstance(self.lam, str):
            if self.lam != "cv":
                raise ValueError("lam must be a nonnegative number or 'cv'")
            if self.lambda_grid is not None and len(self.lambda_grid) == 0:
                raise ValueError("lambda_grid must be nonempty when lam='cv'")
        elif self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.max_outer < 1 or (self.M1 is not None and self.M1 < 1) or (self.M2 is not None and self.M2 < 1):
            raise ValueError("iteration counts must be positive")
        if self.box_D <= 0:
            raise ValueError("box_D must be positive")

    def resolve_M1(self, n) -> int:
        if self.M1 is None:
            return default_M1(n)
        if self.M1 < default_M1(n):
            warnings.warn(f"M1={self.M1} is below the default budget ceil(10 log n)={default_M1(n)}")
        return self.M1

    def resolve_M2(self, n, q) -> int:
        if self.M2 is None:
            return default_M2(n, q)
        if self.M2 < default_M2(n, q):
            warnings.warn(f"M2={self.M2} is below the default budget {default_M2(n, q)}")
        return self.M2

    def grid(self, n, p):
        return list(self.lambda_grid) if self.lambda_grid else default_lambda_grid(n, p)


@dataclass
class FitResult:
    params: ParamSet
    outer_iters: int
    trace: list = field(default_factory=list)
    lambda_used: float = 0.0
    clamp_count: int = 0
    converged: bool = False


# ---------------------------------------------------------------------------
# item phase
# ---------------------------------------------------------------------------

def _item_design(X, U):
    n = X.shape[0]
    return np.hstack([np.ones((n, 1)), X, U])


def fit_items(Y, mask, X, U, families, lam, M1, warm=None, step_rule="lipschitz", accelerate=True):
    """Solve the penalized item problems for all items at once.

    Returns the item matrix with rows ``(beta_j0, beta_j, gamma_j)``.
    """
    families = families if isinstance(families, FamilyPanel) else FamilyPanel(families)
    n, q = Y.shape
    p = X.shape[1]
    Z = _item_design(X, U)
    d = Z.shape[1]
    maskf = mask.astype(float)
    n_j = maskf.sum(axis=0)
    if warm is None:
        warm = np.zeros((q, d))
        warm[:, 0] = _intercept_start(Y, mask, families)
    pen_cols = slice(1, 1 + p)

    def value(phi):
        W = Z @ phi.T
        return -(families.loglik(Y, W) * maskf).sum(axis=0) / n_j

    def grad(phi):
        r = families.dloglik(Y, Z @ phi.T) * maskf
        return -(r.T @ Z) / n_j[:, None]

    def penalty(phi):
        return lam * np.abs(phi[:, pen_cols]).sum(axis=1)

    def prox(z, t):
        out = z.copy()
        out[:, pen_cols] = soft_threshold(z[:, pen_cols], (t * lam)[:, None])
        return out

    L = families.curvature_bounds / n_j * masked_sigma_max_sq(Z, mask)
    step = np.where(L > 0, 1.0 / np.where(L > 0, L, 1.0), 1.0)
    phi, _, _ = proximal_gradient(
        grad, value, penalty, prox, warm, step, M1,
        accelerate=accelerate, backtrack=(step_rule == "backtracking"), what="item",
    )
    return phi


def _intercept_start(Y, mask, families, eps=0.01):
    out = np.empty(Y.shape[1])
    ybar = (Y * mask).sum(axis=0) / mask.sum(axis=0)
    for j, fam in enumerate(families.families):
        if fam.kind == "bernoulli-logit":
            out[j] = fam.link(np.clip(ybar[j], eps, 1 - eps))
        elif fam.kind == "poisson-log":
            out[j] = fam.link(max(ybar[j], eps))
        else:
            out[j] = ybar[j]
    return out


def fit_item(y, mask, X, U_hat, family, lam, M1, step_rule="lipschitz", warm=None, accelerate=True):
    """Penalized GLM for a single item.

    Returns ``(beta_j0, beta_j, gamma_j)``.
    """
    y = np.asarray(y, dtype=float).reshape(-1, 1)
    mask = np.asarray(mask, dtype=bool).reshape(-1, 1)
    X = np.asarray(X, dtype=float).reshape(y.shape[0], -1)
    U_hat = np.zeros((y.shape[0], 0)) if U_hat is None else np.asarray(U_hat, dtype=float).reshape(y.shape[0], -1)
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if not np.all(np.isfinite(U_hat)):
        raise ValueError("U_hat must be finite")
    if warm is not None:
        warm = np.concatenate([np.atleast_1d(w) for w in warm])[None, :]
    phi = fit_items(np.where(mask, y, 0.0), mask, X, U_hat, [get_family(family)], lam, M1,
                    warm=warm, step_rule=step_rule, accelerate=accelerate)[0]
    p = X.shape[1]
    return phi[0], phi[1:1 + p], phi[1 + p:]


def item_objective(y, mask, X, U_hat, family, lam, beta0, beta, gamma):
    """Value of the penalized item objective at a given point."""
    family = get_family(family)
    mask = np.asarray(mask, dtype=bool)
    U_hat = np.zeros((len(y), 0)) if U_hat is None else np.asarray(U_hat).reshape(len(y), -1)
    w = beta0 + np.asarray(X).reshape(len(y), -1) @ beta + U_hat @ np.asarray(gamma)
    ll = family.loglik(np.asarray(y, float)[mask], w[mask])
    return float(-ll.mean() + lam * np.abs(beta).sum())


# ---------------------------------------------------------------------------
# latent phase
# ---------------------------------------------------------------------------

def update_latents(Y, mask, offset, Gamma, families, U_init, M2, box_D, accelerate=True):
    """Projected gradient for all subjects' latent vectors.

    ``offset`` is the fixed part ``beta_j0 + beta_j . X_i`` of the predictor.
    """
    families = families if isinstance(families, FamilyPanel) else FamilyPanel(families)
    K = Gamma.shape[1]
    n = Y.shape[0]
    if K == 0:
        return np.zeros((n, 0))
    maskf = mask.astype(float)
    q_i = maskf.sum(axis=1)

    def value(u):
        W = offset + u @ Gamma.T
        return -(families.loglik(Y, W) * maskf).sum(axis=1) / q_i

    def grad(u):
        r = families.dloglik(Y, offset + u @ Gamma.T) * maskf
        return -(r @ Gamma) / q_i[:, None]

    def penalty(u):
        return np.zeros(u.shape[0])

    def prox(z, t):
        return np.clip(z, -box_D, box_D)

    b_U = families.curvature_bounds.max()
    D_i = b_U / q_i * masked_sigma_max_sq(Gamma, mask.T, exact_max_dim=16)
    step = np.where(D_i > 0, 1.0 / np.where(D_i > 0, D_i, 1.0), 1.0)
    U0 = np.clip(U_init, -box_D, box_D)
    U, _, _ = proximal_gradient(grad, value, penalty, prox, U0, step, M2,
                                accelerate=accelerate, what="subject")
    return U


def update_latent(y, mask, beta0, B, Gamma, families, U_init, M2, box_D, x=None, accelerate=True):
    """Latent vector of a single subject given item parameters.

    ``y``/``mask`` are the subject's length-q responses, ``x`` its covariates.
    """
    y = np.asarray(y, dtype=float)[None, :]
    mask = np.asarray(mask, dtype=bool)[None, :]
    B = np.asarray(B, dtype=float)
    x = np.zeros(B.shape[1]) if x is None else np.asarray(x, dtype=float)
    offset = (np.asarray(beta0) + B @ x)[None, :]
    if isinstance(families, str) or not np.iterable(families):
        families = [families] * y.shape[1]
    U = update_latents(np.where(mask, y, 0.0), mask, offset, np.asarray(Gamma, float), families,
                       np.asarray(U_init, float)[None, :], M2, box_D, accelerate=accelerate)
    return U[0]


def latent_objective(y, mask, beta0, B, Gamma, families, u, x=None):
    mask = np.asarray(mask, dtype=bool)
    B = np.asarray(B, dtype=float)
    x = np.zeros(B.shape[1]) if x is None else np.asarray(x, dtype=float)
    if isinstance(families, str) or not np.iterable(families):
        families = [families] * len(y)
    panel = FamilyPanel(families)
    w = (np.asarray(beta0) + np.asarray(Gamma) @ u + B @ x)[None, :]
    ll = panel.loglik(np.asarray(y, float)[None, :], w)[0]
    return float(-ll[mask].mean())


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

def alternate(data: DataSet, K, cfg: FitConfig, init: ParamSet, lam=None) -> FitResult:
    """Run the alternating algorithm from ``init`` at a fixed penalty level.

    ``lam`` overrides ``cfg.lam`` (which must then be numeric).
    """
    lam = cfg.lam if lam is None else lam
    if isinstance(lam, str):
        raise ValueError("alternate needs a numeric lambda; use fit() or cross_validate() for 'cv'")
    if init.K != K:
        raise ValueError(f"init has K={init.K}, expected {K}")
    n, q, p = data.n, data.q, data.p
    M1 = cfg.resolve_M1(n)
    M2 = cfg.resolve_M2(n, q)
    fams = data.families

    params = init
    phi = params.item_matrix()
    U = params.U
    trace = [{"iter": 0, "joint_objective": joint_objective(data, params, lam), "max_block_change": float("nan")}]
    clamps = 0
    converged = False
    t = 0
    for t in range(1, cfg.max_outer + 1):
        phi_new = fit_items(data.Y, data.mask, data.X, U, fams, lam, M1, warm=phi,
                            step_rule=cfg.step_rule, accelerate=cfg.accelerate)
        beta0, B, Gamma = phi_new[:, 0], phi_new[:, 1:1 + p], phi_new[:, 1 + p:]
        offset = beta0[None, :] + data.X @ B.T
        U_new = update_latents(data.Y, data.mask, offset, Gamma, fams, U, M2, cfg.box_D,
                               accelerate=cfg.accelerate)
        change = max(
            np.linalg.norm(B - phi[:, 1:1 + p]),
            np.linalg.norm(Gamma - phi[:, 1 + p:]),
            np.linalg.norm(U_new - U),
            np.linalg.norm(beta0 - phi[:, 0]),
        )
        phi, U = phi_new, U_new
        params = ParamSet(beta0.copy(), B.copy(), Gamma.copy(), U.copy())
        W = linear_predictor(data, params)
        clamps += fams.count_outside(W)
        obj = joint_objective(data, params, lam)
        if not np.isfinite(obj):
            raise FloatingPointError(f"joint objective is not finite at outer iteration {t}")
        trace.append({"iter": t, "joint_objective": obj, "max_block_change": float(change)})
        if change < cfg.tol_outer:
            converged = True
            break
    return FitResult(params, t, trace, float(lam), clamps, converged)


def fit(data: DataSet, K, cfg: FitConfig, init: ParamSet = None, init_method="spectral+refine"):
    """Initialize (if needed), pick lambda (if ``cfg.lam == 'cv'``) and run the loop."""
    from .init import initialize

    if init is None:
        init = initialize(data, K, method=init_method, box_D=cfg.box_D)
    lam = cfg.lam
    cv_table = None
    if lam == "cv":
        lam, cv_table = cross_validate(data, K, cfg, init_method=init_method)
    res = alternate(data, K, cfg, init, lam=lam)
    res.cv_table = cv_table
    return res


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

def cv_folds(mask, n_folds, seed, max_attempts=100):
    """Assign observed cells to folds so no training mask loses a row or column.

    Returns an int array shaped like ``mask`` with fold ids, ``-1`` at
    unobserved cells.
    """
    rng = np.random.default_rng(seed)
    cells = np.flatnonzero(mask.ravel())
    for _ in range(max_attempts):
        ids = np.full(mask.size, -1)
        perm = rng.permutation(cells.size)
        ids[cells[perm]] = np.arange(cells.size) % n_folds
        ids = ids.reshape(mask.shape)
        ok = True
        for f in range(n_folds):
            train = mask & (ids != f)
            if not (train.any(axis=0).all() and train.any(axis=1).all()):
                ok = False
                break
        if ok:
            return ids
    raise RuntimeError(f"could not draw {n_folds} valid folds in {max_attempts} attempts")


def cross_validate(data: DataSet, K, cfg: FitConfig, init_method="spectral+refine"):
    """Pick lambda by K-fold CV over observed cells.

    The CV error is the mean squared difference between held-out responses and
    the fitted mean. Returns ``(lambda_star, [(lambda, cv_error), ...])`` with
    ties resolved toward the larger lambda.
    """
    from .init import initialize

    grid = sorted(cfg.grid(data.n, data.p), reverse=True)
    if not grid:
        raise ValueError("lambda_grid must be nonempty")
    if len(grid) == 1:
        return float(grid[0]), [(float(grid[0]), float("nan"))]
    folds = cv_folds(data.mask, cfg.cv_folds, cfg.seed)
    errors = np.zeros((len(grid), cfg.cv_folds))
    for f in range(cfg.cv_folds):
        held = folds == f
        train = data.with_mask(data.mask & ~held)
        init = initialize(train, K, method=init_method, box_D=cfg.box_D)
        start = init
        for g, lam in enumerate(grid):
            res = alternate(train, K, cfg, start, lam=lam)
            W = linear_predictor(train, res.params)
            mu = data.families.mean(W)
            errors[g, f] = float(np.mean((data.Y[held] - mu[held]) ** 2))
    cv_err = errors.mean(axis=1)
    best = 0
    for g in range(1, len(grid)):
        if cv_err[g] < cv_err[best]:
            best = g
    table = [(float(l), float(e)) for l, e in zip(grid, cv_err)]
    return float(grid[best]), table


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def fit_baseline(data: DataSet, lam, M1=None, step_rule="lipschitz", accelerate=True):
    """L1-penalized GLM per item ignoring latent variables.

    Returns ``(beta0, B)``.
    """
    M1 = default_M1(data.n) if M1 is None else M1
    phi = fit_items(data.Y, data.mask, data.X, np.zeros((data.n, 0)), data.families, lam, M1,
                    step_rule=step_rule, accelerate=accelerate)
    return phi[:, 0], phi[:, 1:]


def baseline_result(data: DataSet, lam, M1=None, **kw) -> FitResult:
    """``fit_baseline`` wrapped as a ``K = 0`` fit, ready for debiasing."""
    beta0, B = fit_baseline(data, lam, M1, **kw)
    params = ParamSet(beta0, B, np.zeros((data.q, 0)), np.zeros((data.n, 0)))
    return FitResult(params, 1, [], float(lam), 0, True)


def cross_validate_baseline(data: DataSet, cfg: FitConfig, M1=None):
    """Cellwise K-fold CV for the latent-free baseline, same rule as ``cross_validate``."""
    grid = sorted(cfg.grid(data.n, data.p), reverse=True)
    if len(grid) == 1:
        return float(grid[0]), [(float(grid[0]), float("nan"))]
    folds = cv_folds(data.mask, cfg.cv_folds, cfg.seed)
    errors = np.zeros((len(grid), cfg.cv_folds))
    for f in range(cfg.cv_folds):
        held = folds == f
        train = data.with_mask(data.mask & ~held)
        for g, lam in enumerate(grid):
            beta0, B = fit_baseline(train, lam, M1, step_rule=cfg.step_rule, accelerate=cfg.accelerate)
            mu = data.families.mean(beta0[None, :] + data.X @ B.T)
            errors[g, f] = float(np.mean((data.Y[held] - mu[held]) ** 2))
    cv_err = errors.mean(axis=1)
    best = 0
    for g in range(1, len(grid)):
        if cv_err[g] < cv_err[best]:
            best = g
    return float(grid[best]), [(float(l), float(e)) for l, e in zip(grid, cv_err)]
