import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glvminf.families import (
    FAMILY_KEYS,
    Family,
    FamilyDomainError,
    FamilyPanel,
    d2loglik,
    dloglik,
    get_family,
    link,
    loglik,
    mean,
)

W_GRID = np.linspace(-6, 6, 25)


def test_loglik_examples():
    assert loglik("bernoulli-logit", 1.0, 0.0) == pytest.approx(np.log(0.5), abs=1e-12)
    assert loglik("gaussian-identity", 0.0, 0.0) == 0.0
    assert loglik("poisson-log", 2.0, 0.0) == pytest.approx(-1.0)


def test_derivative_examples():
    assert dloglik("bernoulli-logit", 1.0, 0.0) == pytest.approx(0.5)
    assert d2loglik("bernoulli-logit", 0.0, 0.0) == pytest.approx(-0.25)
    assert dloglik("gaussian-identity", 3.0, 1.0) == pytest.approx(2.0)


def test_mean_link_examples():
    assert mean("bernoulli-logit", 0.0) == 0.5
    assert link("bernoulli-logit", 0.5) == 0.0
    assert link("poisson-log", 1.0) == 0.0


@pytest.mark.parametrize("kind", FAMILY_KEYS)
def test_finite_difference_consistency(kind):
    fam = get_family(kind)
    h = 1e-5
    for y in (0.0, 1.0, 3.0) if kind != "gaussian-identity" else (-1.3, 0.0, 2.5):
        if kind == "bernoulli-logit" and y > 1:
            continue
        for fn, dfn in ((fam.loglik, fam.dloglik), (fam.dloglik, fam.d2loglik)):
            fd = (fn(y, W_GRID + h) - fn(y, W_GRID - h)) / (2 * h)
            exact = dfn(y, W_GRID)
            np.testing.assert_allclose(fd, exact, rtol=1e-6, atol=1e-8)
    fd = (fam.d2loglik(0.0, W_GRID + h) - fam.d2loglik(0.0, W_GRID - h)) / (2 * h)
    np.testing.assert_allclose(fd, fam.d3loglik(W_GRID), rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("kind", FAMILY_KEYS)
def test_concavity_and_curvature_bound(kind):
    fam = get_family(kind)
    lo, hi = fam.natural_domain
    w = np.linspace(lo, hi, 2001)
    d2 = fam.d2loglik(0.0, w)
    assert np.all(d2 < 0)
    assert np.all(-d2 <= fam.curvature_bound * (1 + 1e-12))


def test_specific_bounds():
    assert get_family("bernoulli-logit").curvature_bound == 0.25
    g = Family("gaussian-identity", dispersion=2.0)
    np.testing.assert_allclose(-g.d2loglik(0.0, W_GRID), 0.5)
    assert get_family("poisson-log").curvature_bound == pytest.approx(np.exp(10.0))


@pytest.mark.parametrize("kind", FAMILY_KEYS)
@pytest.mark.parametrize("w", [-1.0, 0.4])
def test_score_mean_zero(kind, w):
    fam = get_family(kind)
    rng = np.random.default_rng(11)
    y = fam.sample(np.full(100_000, w), rng)
    s = fam.dloglik(y, w)
    assert abs(s.mean()) <= 4 * s.std() / np.sqrt(s.size)


def test_clamping_counts_not_errors():
    fam = get_family("poisson-log")
    w = np.array([-40.0, 0.0, 12.0])
    assert fam.count_outside(w) == 2
    assert np.all(np.isfinite(fam.loglik(1.0, w)))
    assert fam.mean(12.0) == pytest.approx(np.exp(10.0))


def test_validation_errors():
    with pytest.raises(FamilyDomainError):
        get_family("bernoulli-logit").validate([0, 1, 2])
    with pytest.raises(FamilyDomainError):
        get_family("poisson-log").validate([1.5])
    with pytest.raises(FamilyDomainError):
        link("bernoulli-logit", 1.0)
    with pytest.raises(ValueError):
        get_family("probit")


def test_panel_dispatch_matches_columns():
    kinds = ["bernoulli-logit", "gaussian-identity", "poisson-log", "bernoulli-logit"]
    panel = FamilyPanel(kinds)
    rng = np.random.default_rng(0)
    W = rng.normal(size=(5, 4))
    Y = panel.sample(W, rng)
    for j, k in enumerate(kinds):
        f = get_family(k)
        np.testing.assert_allclose(panel.loglik(Y, W)[:, j], f.loglik(Y[:, j], W[:, j]))
        np.testing.assert_allclose(panel.mean(W)[:, j], f.mean(W[:, j]))
    np.testing.assert_allclose(panel.curvature_bounds[:2], [0.25, 1.0])


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(FAMILY_KEYS), st.floats(-25, 9), st.floats(-25, 9))
def test_loglik_concave_chord(kind, a, b):
    fam = get_family(kind)
    y = 1.0
    mid = fam.loglik(y, 0.5 * (a + b))
    assert mid >= 0.5 * (fam.loglik(y, a) + fam.loglik(y, b)) - 1e-9 * (1 + abs(mid))


@settings(max_examples=200, deadline=None)
@given(st.floats(-20, 20))
def test_bernoulli_link_inverts_mean(w):
    fam = get_family("bernoulli-logit")
    assert fam.link(fam.mean(w)) == pytest.approx(w, abs=1e-6)
