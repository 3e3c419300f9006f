"""Response families for the generalized latent variable model.

Each family supplies the per-entry log-likelihood ``l(w) = log p(y | w)`` of a
canonical-link exponential family together with its first three derivatives in
the linear predictor ``w``. Everything downstream (item fits, latent updates,
debiasing) talks to the likelihood only through these methods.

Additive constants that do not depend on ``w`` are dropped:

* ``bernoulli-logit``: exact value, ``y*w - log(1 + exp(w))``.
* ``gaussian-identity``: ``-(y - w)**2 / (2*dispersion)``, i.e. without
  ``-0.5*log(2*pi*dispersion)``.
* ``poisson-log``: ``y*w - exp(w)``, i.e. without ``-log(y!)``.

Predictor values outside ``natural_domain`` are clamped to it before
evaluation. Use :meth:`Family.count_outside` to keep track of how often that
happens; the methods themselves are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

FAMILY_KEYS = ("bernoulli-logit", "gaussian-identity", "poisson-log")

_DEFAULT_DOMAIN = {
    "bernoulli-logit": (-30.0, 30.0),
    "gaussian-identity": (-30.0, 30.0),
    "poisson-log": (-30.0, 10.0),
}


class FamilyDomainError(ValueError):
    """Raised when a response value or mean is invalid for a family."""

    def __init__(self, kind, value, reason=""):
        self.kind = kind
        self.value = value
        msg = f"invalid value {value!r} for family {kind!r}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


@dataclass(frozen=True)
class Family:
    """A canonical-link response family.

    Parameters
    ----------
    kind : str
        One of ``FAMILY_KEYS``.
    dispersion : float
        Fixed residual variance, used by the gaussian family only.
    natural_domain : tuple of float, optional
        Interval of predictor values considered safe. Defaults to
        ``[-30, 30]`` (``[-30, 10]`` for poisson).
    """

    kind: str
    dispersion: float = 1.0
    natural_domain: tuple = field(default=None)

    def __post_init__(self):
        if self.kind not in FAMILY_KEYS:
            raise ValueError(f"unknown family {self.kind!r}; expected one of {FAMILY_KEYS}")
        if not self.dispersion > 0:
            raise ValueError("dispersion must be positive")
        if self.natural_domain is None:
            object.__setattr__(self, "natural_domain", _DEFAULT_DOMAIN[self.kind])
        lo, hi = self.natural_domain
        if not lo < hi:
            raise ValueError("natural_domain must be a nonempty interval")

    # -- bounds ------------------------------------------------------------
    @property
    def curvature_bound(self) -> float:
        """Uniform upper bound ``b_U`` on ``-l''`` over the natural domain."""
        if self.kind == "bernoulli-logit":
            return 0.25
        if self.kind == "gaussian-identity":
            return 1.0 / self.dispersion
        return float(np.exp(self.natural_domain[1]))

    def clip(self, w):
        lo, hi = self.natural_domain
        return np.clip(w, lo, hi)

    def count_outside(self, w) -> int:
        lo, hi = self.natural_domain
        w = np.asarray(w)
        return int(np.count_nonzero((w < lo) | (w > hi)))

    # -- validation --------------------------------------------------------
    def validate(self, y):
        """Check that every entry of ``y`` is a legal response; raise otherwise."""
        y = np.asarray(y, dtype=float)
        if self.kind == "bernoulli-logit":
            bad = ~((y == 0) | (y == 1))
        elif self.kind == "poisson-log":
            bad = ~(np.isfinite(y) & (y >= 0) & (y == np.floor(y)))
        else:
            bad = ~np.isfinite(y)
        if np.any(bad):
            raise FamilyDomainError(self.kind, y[bad].flat[0])

    # -- likelihood and derivatives ----------------------------------------
    def loglik(self, y, w):
        w = self.clip(w)
        if self.kind == "bernoulli-logit":
            # log(1 + e^w) in overflow-safe form; much faster than np.logaddexp
            return y * w - (np.maximum(w, 0.0) + np.log1p(np.exp(-np.abs(w))))
        if self.kind == "gaussian-identity":
            return -0.5 * (y - w) ** 2 / self.dispersion
        return y * w - np.exp(w)

    def dloglik(self, y, w):
        w = self.clip(w)
        if self.kind == "gaussian-identity":
            return (y - w) / self.dispersion
        return y - self.mean(w)

    def d2loglik(self, y, w):
        """Second derivative ``l''(w)``; does not depend on ``y``."""
        return -self.variance(w) + 0.0 * np.asarray(y)

    def d3loglik(self, w):
        w = self.clip(w)
        if self.kind == "bernoulli-logit":
            p = expit(w)
            return -p * (1.0 - p) * (1.0 - 2.0 * p)
        if self.kind == "gaussian-identity":
            return np.zeros_like(np.asarray(w, dtype=float))
        return -np.exp(w)

    def variance(self, w):
        """``-l''(w)``, the Fisher weight of one observation."""
        w = self.clip(w)
        if self.kind == "bernoulli-logit":
            p = expit(w)
            return p * (1.0 - p)
        if self.kind == "gaussian-identity":
            return np.full_like(np.asarray(w, dtype=float), 1.0 / self.dispersion)
        return np.exp(w)

    # -- mean and link -----------------------------------------------------
    def mean(self, w):
        w = self.clip(w)
        if self.kind == "bernoulli-logit":
            return expit(w)
        if self.kind == "gaussian-identity":
            return np.asarray(w, dtype=float) * 1.0
        return np.exp(w)

    def link(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.kind == "bernoulli-logit":
            bad = ~((mu > 0) & (mu < 1))
            if np.any(bad):
                raise FamilyDomainError(self.kind, mu[bad].flat[0], "mean must lie in (0, 1)")
            return logit(mu)
        if self.kind == "poisson-log":
            bad = ~(mu > 0)
            if np.any(bad):
                raise FamilyDomainError(self.kind, mu[bad].flat[0], "mean must be positive")
            return np.log(mu)
        if not np.all(np.isfinite(mu)):
            raise FamilyDomainError(self.kind, mu, "mean must be finite")
        return mu * 1.0

    def sample(self, w, rng):
        """Draw responses with predictor ``w`` using generator ``rng``."""
        mu = self.mean(w)
        if self.kind == "bernoulli-logit":
            return (rng.random(np.shape(mu)) < mu).astype(float)
        if self.kind == "gaussian-identity":
            return mu + np.sqrt(self.dispersion) * rng.standard_normal(np.shape(mu))
        return rng.poisson(mu).astype(float)


def get_family(key, dispersion=1.0) -> Family:
    if isinstance(key, Family):
        return key
    return Family(key, dispersion=dispersion)


# Functional aliases, convenient for scalar checks and tests.
def loglik(family, y, w):
    family = get_family(family)
    family.validate(y)
    return family.loglik(y, w)


def dloglik(family, y, w):
    family = get_family(family)
    family.validate(y)
    return family.dloglik(y, w)


def d2loglik(family, y, w):
    family = get_family(family)
    family.validate(y)
    return family.d2loglik(y, w)


def d3loglik(family, w):
    return get_family(family).d3loglik(w)


def mean(family, w):
    return get_family(family).mean(w)


def link(family, mu):
    return get_family(family).link(mu)


class FamilyPanel:
    """Column-wise family dispatch over an ``n x q`` response matrix.

    Items sharing a family are evaluated in one vectorized call, so the common
    single-family case costs one call per method.
    """

    def __init__(self, families):
        self.families = tuple(get_family(f) for f in families)
        groups = {}
        for j, fam in enumerate(self.families):
            groups.setdefault(fam, []).append(j)
        if len(groups) == 1:
            fam = self.families[0] if self.families else get_family("gaussian-identity")
            self.groups = [(fam, slice(None))]
        else:
            self.groups = [(fam, np.asarray(idx)) for fam, idx in groups.items()]
        self.curvature_bounds = np.array([f.curvature_bound for f in self.families])

    def __len__(self):
        return len(self.families)

    @property
    def single(self):
        return len(self.groups) == 1

    def subset(self, items):
        return FamilyPanel([self.families[j] for j in np.atleast_1d(items)])

    def _apply(self, name, *arrays):
        if self.single:
            return getattr(self.groups[0][0], name)(*arrays)
        out = np.empty(np.broadcast(*arrays).shape)
        for fam, idx in self.groups:
            out[..., idx] = getattr(fam, name)(*(a[..., idx] for a in arrays))
        return out

    def loglik(self, Y, W):
        return self._apply("loglik", Y, W)

    def dloglik(self, Y, W):
        return self._apply("dloglik", Y, W)

    def variance(self, W):
        return self._apply("variance", W)

    def mean(self, W):
        return self._apply("mean", W)

    def sample(self, W, rng):
        if self.single:
            return self.groups[0][0].sample(W, rng)
        out = np.empty(W.shape)
        for fam, idx in self.groups:
            out[:, idx] = fam.sample(W[:, idx], rng)
        return out

    def count_outside(self, W) -> int:
        if self.single:
            return self.groups[0][0].count_outside(W)
        return sum(fam.count_outside(W[:, idx]) for fam, idx in self.groups)

    def validate(self, Y, mask):
        for fam, idx in self.groups:
            fam.validate(Y[:, idx][mask[:, idx]])
