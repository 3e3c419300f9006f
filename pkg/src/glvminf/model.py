"""Data and parameter containers, the linear predictor and the joint objective."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .families import FamilyPanel, get_family


class DimensionError(ValueError):
    """Array shapes of data and parameters disagree."""


@dataclass(frozen=True, eq=False)
class DataSet:
    """Observed responses, missingness mask and covariates.

    ``Y`` holds the responses as floats; unobserved cells are stored as 0 and
    ignored everywhere through ``mask``. The intercept is implicit and must not
    appear as a column of ``X``.
    """

    Y: np.ndarray
    mask: np.ndarray
    X: np.ndarray
    family_per_item: tuple = field(default=("bernoulli-logit",))

    def __post_init__(self):
        Y = np.array(self.Y, dtype=float)
        mask = np.array(self.mask, dtype=bool)
        X = np.array(self.X, dtype=float)
        if Y.ndim != 2:
            raise DimensionError("Y must be a 2-d array")
        n, q = Y.shape
        if X.ndim == 1:
            X = X.reshape(n, -1)
        if mask.shape != Y.shape:
            raise DimensionError(f"mask shape {mask.shape} != Y shape {Y.shape}")
        if X.shape[0] != n:
            raise DimensionError(f"X has {X.shape[0]} rows but Y has {n} (subject axis)")
        fams = self.family_per_item
        if isinstance(fams, str) or not np.iterable(fams):
            fams = (fams,)
        fams = tuple(get_family(f) for f in fams)
        if len(fams) == 1 and q != 1:
            fams = fams * q
        if len(fams) != q:
            raise DimensionError(f"{len(fams)} families given for {q} items (item axis)")

        Y = np.where(mask, Y, 0.0)
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite values")
        if X.shape[1] and n > 1:
            sd = X.std(axis=0)
            const = np.flatnonzero(sd == 0)
            if const.size:
                raise ValueError(
                    f"covariate column(s) {const.tolist()} are constant; the intercept is implicit"
                )
        empty_rows = np.flatnonzero(~mask.any(axis=1))
        if empty_rows.size:
            raise ValueError(f"subject(s) {empty_rows[:10].tolist()} have no observed responses")
        empty_cols = np.flatnonzero(~mask.any(axis=0))
        if empty_cols.size:
            raise ValueError(f"item(s) {empty_cols[:10].tolist()} have no observed responses")

        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "family_per_item", fams)
        self.families.validate(Y, mask)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def q(self) -> int:
        return self.Y.shape[1]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @cached_property
    def families(self) -> FamilyPanel:
        return FamilyPanel(self.family_per_item)

    @cached_property
    def n_obs_item(self) -> np.ndarray:
        return self.mask.sum(axis=0).astype(float)

    @cached_property
    def n_obs_subject(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(float)

    @property
    def fully_observed(self) -> bool:
        return bool(self.mask.all())

    def with_mask(self, mask) -> "DataSet":
        """Same data with a different (typically smaller) observation mask."""
        return DataSet(np.where(self.mask, self.Y, 0.0), mask & self.mask, self.X, self.family_per_item)

    def items(self, idx) -> "DataSet":
        idx = np.atleast_1d(idx)
        return DataSet(
            self.Y[:, idx], self.mask[:, idx], self.X, tuple(self.family_per_item[j] for j in idx)
        )


@dataclass(frozen=True, eq=False)
class ParamSet:
    """Intercepts ``beta0`` (q,), effects ``B`` (q, p), loadings ``Gamma``
    (q, K) and latent variables ``U`` (n, K)."""

    beta0: np.ndarray
    B: np.ndarray
    Gamma: np.ndarray
    U: np.ndarray

    def __post_init__(self):
        for name in ("beta0", "B", "Gamma", "U"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        q = self.beta0.shape[0]
        if self.B.ndim != 2 or self.B.shape[0] != q:
            raise DimensionError(f"B has shape {self.B.shape}; expected ({q}, p) (item axis)")
        if self.Gamma.ndim != 2 or self.Gamma.shape[0] != q:
            raise DimensionError(f"Gamma has shape {self.Gamma.shape}; expected ({q}, K) (item axis)")
        if self.U.ndim != 2 or self.U.shape[1] != self.Gamma.shape[1]:
            raise DimensionError(
                f"U has shape {self.U.shape} but Gamma has K={self.Gamma.shape[1]} (latent axis)"
            )

    @property
    def K(self) -> int:
        return self.Gamma.shape[1]

    @property
    def shape(self):
        """``(n, q, p, K)``."""
        return self.U.shape[0], self.beta0.shape[0], self.B.shape[1], self.K

    def replace(self, **changes) -> "ParamSet":
        return replace(self, **changes)

    def copy(self) -> "ParamSet":
        return ParamSet(self.beta0.copy(), self.B.copy(), self.Gamma.copy(), self.U.copy())

    def item_matrix(self) -> np.ndarray:
        """Rows ``(beta_j0, beta_j, gamma_j)``, matching design rows ``(1, X_i, U_i)``."""
        return np.hstack([self.beta0[:, None], self.B, self.Gamma])

    @classmethod
    def zeros(cls, n, q, p, K) -> "ParamSet":
        return cls(np.zeros(q), np.zeros((q, p)), np.zeros((q, K)), np.zeros((n, K)))


def check_dims(data: DataSet, params: ParamSet):
    n, q, p, K = params.shape
    if n != data.n:
        raise DimensionError(f"subject axis: data has n={data.n}, params have n={n}")
    if q != data.q:
        raise DimensionError(f"item axis: data has q={data.q}, params have q={q}")
    if p != data.p:
        raise DimensionError(f"covariate axis: data has p={data.p}, params have p={p}")


def linear_predictor(data: DataSet, params: ParamSet) -> np.ndarray:
    """``W[i, j] = beta_j0 + gamma_j . U_i + beta_j . X_i`` for every cell, observed or not."""
    check_dims(data, params)
    return params.beta0[None, :] + params.U @ params.Gamma.T + data.X @ params.B.T


def item_losses(data: DataSet, W: np.ndarray) -> np.ndarray:
    """Per-item mean negative log-likelihood over observed subjects, shape (q,)."""
    ll = data.families.loglik(data.Y, W)
    return -np.where(data.mask, ll, 0.0).sum(axis=0) / data.n_obs_item


def joint_objective(data: DataSet, params: ParamSet, lam: float) -> float:
    """Average over items of the per-item penalized losses.

    Equals ``-(1/(nq)) sum l_ij + (lam/q) sum_j ||beta_j||_1`` for fully observed
    data. Scaling the penalty by ``1/q`` makes this the quantity that both
    alternating blocks decrease; it is a diagnostic and is never minimized.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    W = linear_predictor(data, params)
    losses = item_losses(data, W)
    return float(np.mean(losses + lam * np.abs(params.B).sum(axis=1)))
