import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from glvminf import DataSet, FitConfig, ParamSet, alternate, debias_one, decorrelate, initialize, score_and_info, screen
from glvminf.altfit import FitResult, fit_items
from glvminf.debias import (
    DegenerateInformationError,
    _ItemContext,
    cv_lambda_prime,
    _solve_decorrelation,
    decorrelation_objective,
    default_lambda_prime,
)
from glvminf.simlab import SimConfig, generate
from oracles import cd_quadratic_lasso, newton_logistic


def _result(params):
    return FitResult(params, 1, [], 0.0, 0, True)


def _k0(y, X, fam, lam=0.0, M1=20000):
    n = len(y)
    d = DataSet(np.asarray(y, float)[:, None], np.ones((n, 1), bool), X, fam)
    phi = fit_items(d.Y, d.mask, X, np.zeros((n, 0)), d.families, lam, M1)
    return d, _result(ParamSet(phi[:, 0], phi[:, 1:], np.zeros((1, 0)), np.zeros((n, 0))))


def _orthogonal_X(rng, n, p):
    Q, _ = np.linalg.qr(np.hstack([np.ones((n, 1)), rng.normal(size=(n, p))]))
    return Q[:, 1:] * np.sqrt(n)


def test_orthogonal_design_gives_zero_w():
    rng = np.random.default_rng(0)
    n = 200
    X = _orthogonal_X(rng, n, 3)
    y = X @ [1.0, 0.0, -0.5] + rng.normal(size=n)
    d, fit = _k0(y, X, "gaussian-identity")
    w = decorrelate(d, fit, (0, 0), lambda_prime=0.0)
    # coefficients on (1, X_1, X_2): weighted regression of X_0 on them is zero
    np.testing.assert_allclose(w, 0.0, atol=1e-8)


def test_huge_lambda_prime_gives_plain_score():
    rng = np.random.default_rng(1)
    n = 100
    X = rng.normal(size=(n, 3))
    y = (rng.random(n) < 0.5).astype(float)
    d, fit = _k0(y, X, "bernoulli-logit", lam=0.05, M1=500)
    w = decorrelate(d, fit, (0, 1), lambda_prime=1e6)
    assert np.all(w == 0)
    S, F = score_and_info(d, fit, (0, 1), w)
    W = fit.params.beta0[0] + X @ fit.params.B[0]
    mu = 1 / (1 + np.exp(-W))
    assert S == pytest.approx(np.mean((y - mu) * X[:, 1]), rel=1e-12)
    assert F == pytest.approx(np.mean(mu * (1 - mu) * X[:, 1] ** 2), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_decorrelate_matches_coordinate_descent(seed):
    rng = np.random.default_rng(seed)
    n, p, K = 60, 5, 1
    X = rng.normal(size=(n, p))
    U = rng.normal(size=(n, K))
    Y = (rng.random((n, 2)) < 0.5).astype(float)
    d = DataSet(Y, np.ones((n, 2), bool), X)
    params = ParamSet(rng.normal(size=2) * 0.3, rng.normal(size=(2, p)) * 0.3, rng.normal(size=(2, K)), U)
    fit = _result(params)
    lam = 0.03
    k = seed % p
    w = decorrelate(d, fit, (0, k), lambda_prime=lam)
    ctx = _ItemContext(d, fit, 0)
    c = 1 + k
    w_full = np.insert(w, c, 0.0)
    ref = cd_quadratic_lasso(ctx.H, c, lam)
    assert decorrelation_objective(ctx.H, c, w_full, lam) <= decorrelation_objective(ctx.H, c, ref, lam) + 1e-8


def test_gaussian_single_covariate_classical_score():
    rng = np.random.default_rng(2)
    n = 80
    X = rng.normal(size=(n, 1))
    y = 0.4 * X[:, 0] + rng.normal(size=n)
    d = DataSet(y[:, None], np.ones((n, 1), bool), X, "gaussian-identity")
    params = ParamSet([0.1], [[0.3]], np.zeros((1, 0)), np.zeros((n, 0)))
    fit = _result(params)
    w = np.zeros(1)  # coefficient on the intercept only
    S, F = score_and_info(d, fit, (0, 0), w)
    assert S == pytest.approx(np.mean((y - 0.1 - 0.3 * X[:, 0]) * X[:, 0]))
    assert F == pytest.approx(np.mean(X[:, 0] ** 2))


def test_score_mean_zero_at_truth():
    rng = np.random.default_rng(3)
    n, p = 200, 3
    X = rng.normal(size=(n, p))
    beta = np.array([0.5, -0.3, 0.0])
    params = ParamSet([0.2], beta[None, :], np.zeros((1, 0)), np.zeros((n, 0)))
    scores = []
    for _ in range(400):
        y = (rng.random(n) < 1 / (1 + np.exp(-(0.2 + X @ beta)))).astype(float)
        d = DataSet(y[:, None], np.ones((n, 1), bool), X)
        fit = _result(params)
        w = decorrelate(d, fit, (0, 2), lambda_prime=0.0)
        scores.append(score_and_info(d, fit, (0, 2), w)[0])
    scores = np.array(scores)
    assert abs(scores.mean()) <= 4 * scores.std() / math.sqrt(scores.size)


def test_ols_and_newton_reductions():
    rng = np.random.default_rng(4)
    n = 500
    X = _orthogonal_X(rng, n, 2)
    y = 0.3 + X @ [0.7, 0.0] + rng.normal(size=n)
    d, fit = _k0(y, X, "gaussian-identity")
    coef = np.linalg.lstsq(np.hstack([np.ones((n, 1)), X]), y, rcond=None)[0]
    for k in range(2):
        assert debias_one(d, fit, (0, k), lambda_prime=0.0).beta_tilde == pytest.approx(coef[1 + k], abs=1e-8)
    n, p = 400, 5
    X = rng.normal(size=(n, p))
    y = (rng.random(n) < 1 / (1 + np.exp(-(X @ [0.5, 0, 0, -0.4, 0.2])))).astype(float)
    d, fit = _k0(y, X, "bernoulli-logit")
    mle = newton_logistic(np.hstack([np.ones((n, 1)), X]), y)
    for k in range(p):
        assert debias_one(d, fit, (0, k), lambda_prime=0.0).beta_tilde == pytest.approx(mle[1 + k], abs=1e-4)


def test_one_step_newton_in_profiled_direction():
    rng = np.random.default_rng(5)
    n, p = 90, 4
    X = rng.normal(size=(n, p))
    y = (rng.random(n) < 1 / (1 + np.exp(-(X @ [0.6, -0.2, 0, 0.3])))).astype(float)
    d, fit = _k0(y, X, "bernoulli-logit", lam=0.0, M1=30)  # deliberately short: not at the optimum
    Z = np.hstack([np.ones((n, 1)), X])
    theta = np.r_[fit.params.beta0, fit.params.B[0]]
    mu = 1 / (1 + np.exp(-Z @ theta))
    nu = mu * (1 - mu)
    k = 2
    c = 1 + k
    rest = [i for i in range(p + 1) if i != c]
    Hfull = (Z * nu[:, None]).T @ Z / n
    w = np.linalg.solve(Hfull[np.ix_(rest, rest)], Hfull[rest, c])
    dvec = Z[:, c] - Z[:, rest] @ w
    S = np.mean((y - mu) * dvec)
    F = Hfull[c, c] - Hfull[c, rest] @ w
    expected = theta[c] + S / F
    rep = debias_one(d, fit, (0, k), lambda_prime=0.0)
    assert rep.beta_tilde == pytest.approx(expected, rel=1e-8, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_sign_convention_identity(seed):
    rng = np.random.default_rng(seed)
    S = rng.normal()
    nu = rng.uniform(0.01, 0.25, 50)
    x = rng.normal(size=50)
    dvec = x - 0.3 * rng.normal(size=50)
    F_fisher = np.mean(nu * x * dvec)
    F_signed = np.mean(-nu * x * dvec)  # l'' signed
    beta_hat = rng.normal()
    a = beta_hat + S / F_fisher
    b = beta_hat - S / F_signed
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


def _small_fit(seed=0, n=150, q=20, p=10):
    cfg = SimConfig(n=n, q=q, p=p, K=2, J=5, s=3, reps=1, seed=seed, signal_block=[], null_block=[])
    d, truth = generate(cfg, 0)
    res = alternate(d, 2, FitConfig(lam=0.05, max_outer=3), initialize(d, 2))
    return d, res, truth


def test_report_invariants_and_duplicates():
    d, res, _ = _small_fit()
    targets = [(0, 0), (0, 0), (3, 2), (15, 9)]
    sr = screen(d, res, targets)
    r0, r1 = sr.reports[0], sr.reports[1]
    assert r0 == r1 and r0 is not r1
    for r in sr.reports:
        assert r.ci_low <= r.beta_tilde <= r.ci_high
        assert r.se > 0 and r.info_F > 0
        assert r.p_value == pytest.approx(2 * (1 - norm.cdf(abs(r.z))), abs=1e-12)
    single = debias_one(d, res, (3, 2))
    assert single.beta_tilde == pytest.approx(sr.reports[2].beta_tilde, rel=1e-10)
    one = screen(d, res, [(3, 2)], correction="none")
    assert one.reports[0].flagged == (single.p_value <= 0.05)


def test_bonferroni_threshold_and_counts():
    d, res, _ = _small_fit(1)
    targets = [(j, k) for j in range(d.q) for k in range(3)]
    sr = screen(d, res, targets, correction="bonferroni")
    assert sr.threshold == pytest.approx(0.05 / len(targets))
    assert sr.flags == [r.p_value <= sr.threshold for r in sr.reports]
    counts = sr.biased_item_counts(d.p)
    assert set(counts) == set(range(d.p))
    for k in range(3):
        assert counts[k] == sum(r.flagged for r in sr.reports if r.covariate == k)


def test_degenerate_information_is_per_target():
    rng = np.random.default_rng(6)
    n = 40
    X = rng.normal(size=(n, 2))
    y = (rng.random(n) < 0.5).astype(float)
    d = DataSet(y[:, None], np.ones((n, 1), bool), X)
    # predictor far in the tail: nu underflows to ~0
    params = ParamSet([29.0], [[0.0, 0.0]], np.zeros((1, 0)), np.zeros((n, 0)))
    fit = _result(params)
    with pytest.raises(DegenerateInformationError):
        debias_one(d, fit, (0, 0))
    sr = screen(d, fit, [(0, 0), (0, 1)])
    assert all(r.error and not r.flagged for r in sr.reports)


def test_fwer_bonferroni_all_null():
    hits = 0
    for rep in range(100):
        cfg = SimConfig(n=120, q=10, p=10, K=1, J=0, s=0, reps=1, seed=rep, signal_block=[], null_block=[])
        d, _ = generate(cfg, 0)
        res = alternate(d, 1, FitConfig(lam=0.1, max_outer=3), initialize(d, 1))
        sr = screen(d, res, [(j, k) for j in range(10) for k in range(10)], correction="bonferroni")
        hits += any(sr.flags)
    assert hits <= 10


def test_ci_narrows_with_n():
    widths = {}
    for n in (100, 300):
        w = []
        for rep in range(6):
            cfg = SimConfig(n=n, q=40, p=20, K=2, J=5, s=3, reps=1, seed=rep, family="gaussian-identity",
                            signal_block=[], null_block=[])
            d, _ = generate(cfg, 0)
            res = alternate(d, 2, FitConfig(lam=0.05, max_outer=5), initialize(d, 2))
            r = debias_one(d, res, (0, 0))
            w.append(r.ci_high - r.ci_low)
        widths[n] = np.median(w)
    assert widths[300] < widths[100]


def test_at_null_variant_differs_only_in_evaluation_point():
    d, res, _ = _small_fit(2)
    a = debias_one(d, res, (0, 0))
    b = debias_one(d, res, (0, 0), at_null=True)
    if res.params.B[0, 0] == 0:
        assert a.beta_tilde == pytest.approx(b.beta_tilde)
    assert np.isfinite(b.beta_tilde) and b.se > 0


def test_default_lambda_prime_formula():
    assert default_lambda_prime(100, 50, 80, 4) == pytest.approx(
        0.5 * (math.sqrt(math.log(100) / 50) + 2 * math.sqrt(math.log(80) / 100)))


def test_target_range_errors():
    d, res, _ = _small_fit(3, n=60, q=8, p=4)
    with pytest.raises(IndexError):
        debias_one(d, res, (0, 4))
    with pytest.raises(IndexError):
        debias_one(d, res, (8, 0))
    with pytest.raises(ValueError):
        screen(d, res, [])


def test_cv_lambda_prime_picks_from_grid_and_is_consistent():
    d, res, _ = _small_fit(4, n=120, q=12, p=6)
    ctx = _ItemContext(d, res, 2)
    grid = [0.3, 0.1, 0.03, 0.01]
    lam = cv_lambda_prime(ctx, [1, 3], grid)
    assert lam.shape == (2,) and set(lam) <= set(grid)
    np.testing.assert_array_equal(lam, cv_lambda_prime(ctx, [1, 3], grid))
    sr = screen(d, res, [(2, 0), (2, 2)], lambda_prime="cv")
    for r in sr.reports:
        one = debias_one(d, res, (r.item, r.covariate), lambda_prime="cv")
        assert one.lambda_prime == r.lambda_prime
        # batched and single solves stop at slightly different iterates
        assert one.beta_tilde == pytest.approx(r.beta_tilde, rel=1e-6)
    with pytest.raises(ValueError):
        debias_one(d, res, (2, 0), lambda_prime="auto")


def test_cv_lambda_prime_prefers_small_penalty_when_decorrelation_matters():
    rng = np.random.default_rng(8)
    n = 600
    x1 = rng.normal(size=n)
    X = np.column_stack([x1 + 0.5 * rng.normal(size=n), x1, rng.normal(size=n)])
    y = X @ [0.5, 0.5, 0.0] + rng.normal(size=n)
    d, fit = _k0(y, X, "gaussian-identity", lam=0.05, M1=2000)
    ctx = _ItemContext(d, fit, 0)
    # strong dependence between X_0 and X_1: heavy shrinkage of w hurts held-out loss
    assert cv_lambda_prime(ctx, [1], [1.0, 0.01])[0] == 0.01
