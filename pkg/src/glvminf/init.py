"""Starting values for the alternating algorithm.

The default start ignores covariates: a rank-K SVD of the centered response
matrix gives latent scores and loadings (``spectral_init``), which are then
polished by projected block gradient descent on the covariate-free likelihood
with every coordinate boxed to ``[-D, D]`` (``refine_covfree``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._solvers import masked_sigma_max_sq
from .model import DataSet, ParamSet

INIT_METHODS = ("spectral", "spectral+refine", "anchor")


@dataclass(frozen=True)
class InitConfig:
    eps_clip: float = 0.01
    refine_steps: int = 20
    box_D: float = 10.0

    def __post_init__(self):
        if not 0 < self.eps_clip < 0.5:
            raise ValueError("eps_clip must lie in (0, 0.5)")
        if self.box_D < 1:
            raise ValueError("box_D must be at least 1")
        if self.refine_steps < 0:
            raise ValueError("refine_steps must be nonnegative")


def _intercepts(data: DataSet, eps):
    ybar = data.Y.sum(axis=0) / data.n_obs_item
    beta0 = np.empty(data.q)
    for j, fam in enumerate(data.family_per_item):
        if fam.kind == "bernoulli-logit":
            beta0[j] = fam.link(np.clip(ybar[j], eps, 1 - eps))
        elif fam.kind == "poisson-log":
            beta0[j] = fam.link(max(ybar[j], eps))
        else:
            beta0[j] = ybar[j]
    return beta0


def spectral_init(data: DataSet, K, cfg: InitConfig = InitConfig()) -> ParamSet:
    """SVD start with ``B = 0``.

    Residuals ``y_ij - mean(beta_j0)`` are zero-filled at unobserved cells and
    rescaled by the inverse observation rate, then factored as ``A D V^T``.
    ``U = sqrt(n) A_K`` and ``Gamma = V_K D_K / (sqrt(n) vbar)``, where ``vbar``
    is the average curvature ``-l''`` at the intercepts, converting mean-scale
    factors to the predictor scale.
    """
    n, q = data.n, data.q
    if K < 1 or K >= min(n, q):
        raise ValueError(f"K={K} must satisfy 1 <= K < min(n, q) = {min(n, q)}")
    beta0 = _intercepts(data, cfg.eps_clip)
    fams = data.families
    mu0 = fams.mean(np.broadcast_to(beta0, (1, q)))[0]
    rate = data.mask.mean()
    R = np.where(data.mask, data.Y - mu0[None, :], 0.0) / rate
    A, s, Vt = np.linalg.svd(R, full_matrices=False)
    A, s, V = A[:, :K], s[:K], Vt[:K].T
    # fix signs so the output does not depend on LAPACK's choice
    flip = np.sign(V[np.abs(V).argmax(axis=0), np.arange(K)])
    flip[flip == 0] = 1.0
    A, V = A * flip, V * flip
    vbar = float(np.mean(fams.variance(np.broadcast_to(beta0, (1, q)))))
    U = np.sqrt(n) * A
    Gamma = V * s / (np.sqrt(n) * vbar)
    D = cfg.box_D
    return ParamSet(beta0, np.zeros((q, data.p)), np.clip(Gamma, -D, D), np.clip(U, -D, D))


def covfree_objective(data: DataSet, beta0, Gamma, U) -> float:
    W = beta0[None, :] + U @ Gamma.T
    ll = data.families.loglik(data.Y, W)
    return float(-ll[data.mask].sum() / data.mask.sum())


def refine_covfree(data: DataSet, params0: ParamSet, cfg: InitConfig = InitConfig()) -> ParamSet:
    """Projected block gradient descent on the covariate-free likelihood.

    Each round takes one gradient step for all ``(beta_j0, gamma_j)`` given
    ``U``, then one for all ``U_i`` given the item parameters, each with step
    ``1/L`` for its block and projection onto ``[-D, D]``.
    """
    if np.any(params0.B != 0):
        raise ValueError("refine_covfree expects B = 0")
    if cfg.refine_steps == 0:
        return params0
    D = cfg.box_D
    fams = data.families
    mask = data.mask
    maskf = mask.astype(float)
    N = maskf.sum()
    bU = fams.curvature_bounds
    beta0 = np.clip(params0.beta0, -D, D)
    Gamma = np.clip(params0.Gamma, -D, D)
    U = np.clip(params0.U, -D, D)
    obj = covfree_objective(data, beta0, Gamma, U)
    for it in range(1, cfg.refine_steps + 1):
        # item block
        Z = np.hstack([np.ones((data.n, 1)), U])
        phi = np.hstack([beta0[:, None], Gamma])
        R = fams.dloglik(data.Y, Z @ phi.T) * maskf
        G = -(R.T @ Z) / N
        L = bU * masked_sigma_max_sq(Z, mask, exact_max_dim=16) / N
        phi = np.clip(phi - G / L[:, None], -D, D)
        beta0, Gamma = phi[:, 0], phi[:, 1:]
        # subject block
        R = fams.dloglik(data.Y, beta0[None, :] + U @ Gamma.T) * maskf
        G = -(R @ Gamma) / N
        Li = bU.max() * masked_sigma_max_sq(Gamma, mask.T, exact_max_dim=16) / N
        step = np.where(Li > 0, 1.0 / np.where(Li > 0, Li, 1.0), 0.0)
        U = np.clip(U - step[:, None] * G, -D, D)
        new = covfree_objective(data, beta0, Gamma, U)
        if not np.isfinite(new):
            raise FloatingPointError(f"covariate-free objective is not finite at refine iteration {it}")
        if new > obj + 1e-10:
            raise AssertionError(f"refine_covfree objective increased at iteration {it}: {obj} -> {new}")
        obj = new
    return ParamSet(beta0, params0.B.copy(), Gamma, U)


def anchor_init(data: DataSet, anchor_items, K, cfg: InitConfig = InitConfig(), lam=0.0, M1=None) -> ParamSet:
    """Start from items known to have no covariate effects.

    Latent scores come from the covariate-free fit on the anchor columns; the
    remaining items then get a penalized item fit given those scores.
    """
    from .altfit import default_M1, fit_items

    anchors = np.unique(np.asarray(sorted(anchor_items), dtype=int))
    if anchors.size == 0:
        raise ValueError("anchor set must be nonempty")
    if anchors.size < K:
        raise ValueError(f"need at least K={K} anchor items, got {anchors.size}")
    if anchors.min() < 0 or anchors.max() >= data.q:
        raise ValueError("anchor index out of range")
    sub = data.items(anchors)
    sub_params = refine_covfree(sub, spectral_init(sub, K, cfg), cfg)
    U0 = sub_params.U
    beta0 = np.zeros(data.q)
    B = np.zeros((data.q, data.p))
    Gamma = np.zeros((data.q, K))
    beta0[anchors] = sub_params.beta0
    Gamma[anchors] = sub_params.Gamma
    rest = np.setdiff1d(np.arange(data.q), anchors)
    if rest.size:
        M1 = default_M1(data.n) if M1 is None else M1
        phi = fit_items(data.Y[:, rest], data.mask[:, rest], data.X, U0,
                        data.families.subset(rest), lam, M1)
        beta0[rest] = phi[:, 0]
        B[rest] = phi[:, 1:1 + data.p]
        Gamma[rest] = phi[:, 1 + data.p:]
    return ParamSet(beta0, B, Gamma, U0)


def initialize(data: DataSet, K, method="spectral+refine", cfg: InitConfig = None, box_D=None,
               anchor_items=None, lam=0.0) -> ParamSet:
    if cfg is None:
        cfg = InitConfig(box_D=box_D if box_D is not None else 10.0)
    if method == "spectral":
        return spectral_init(data, K, cfg)
    if method == "spectral+refine":
        return refine_covfree(data, spectral_init(data, K, cfg), cfg)
    if method == "anchor":
        if anchor_items is None:
            raise ValueError("method='anchor' needs anchor_items")
        return anchor_init(data, anchor_items, K, cfg, lam=lam)
    raise ValueError(f"unknown init method {method!r}; expected one of {INIT_METHODS}")
