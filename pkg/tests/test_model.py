import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from glvminf import DataSet, ParamSet, joint_objective, linear_predictor
from glvminf.model import DimensionError, item_losses


def _data(n=4, q=3, p=2, fam="bernoulli-logit", seed=0):
    rng = np.random.default_rng(seed)
    Y = (rng.random((n, q)) < 0.5).astype(float)
    return DataSet(Y, np.ones((n, q), bool), rng.standard_normal((n, p)), fam)


def test_linear_predictor_examples():
    d = _data()
    assert np.all(linear_predictor(d, ParamSet.zeros(4, 3, 2, 1)) == 0)
    ones = ParamSet(np.ones(3), np.zeros((3, 2)), np.zeros((3, 1)), np.zeros((4, 1)))
    assert np.all(linear_predictor(d, ones) == 1)
    tiny = DataSet([[1.0]], [[True]], [[3.0]], "gaussian-identity")
    # a single subject has zero sample variance; constant-column check needs n > 1
    params = ParamSet([0.5], [[2.0]], [[1.0]], [[-1.0]])
    assert linear_predictor(tiny, params)[0, 0] == pytest.approx(5.5)


def test_joint_objective_examples():
    d = _data()
    assert joint_objective(d, ParamSet.zeros(4, 3, 2, 1), 0.0) == pytest.approx(np.log(2))
    rng = np.random.default_rng(1)
    params = ParamSet(rng.normal(size=3), rng.normal(size=(3, 2)), rng.normal(size=(3, 1)), rng.normal(size=(4, 1)))
    W = linear_predictor(d, params)
    nll = np.mean(-(d.Y * W - np.log1p(np.exp(W))))
    assert joint_objective(d, params, 0.0) == pytest.approx(nll, rel=1e-12)


def test_joint_objective_hand_sum():
    Y = np.array([[1.0, 0.0], [0.0, 1.0]])
    X = np.array([[1.0], [-1.0]])
    d = DataSet(Y, np.ones((2, 2), bool), X, "bernoulli-logit")
    params = ParamSet([0.1, -0.2], [[0.5], [0.0]], [[1.0], [2.0]], [[0.3], [-0.4]])
    total = 0.0
    for i in range(2):
        for j in range(2):
            w = params.beta0[j] + params.B[j] @ X[i] + params.Gamma[j] @ params.U[i]
            total += -(Y[i, j] * w - np.log(1 + np.exp(w)))
    lam = 0.3
    expected = total / 4 + lam * np.abs(params.B).sum() / 2
    assert joint_objective(d, params, lam) == pytest.approx(expected, rel=1e-12)


def test_masked_sums_use_observed_counts():
    d = _data(n=5, q=2)
    mask = np.ones((5, 2), bool)
    mask[0, 0] = mask[3, 0] = False
    dm = d.with_mask(mask)
    W = np.random.default_rng(0).normal(size=(5, 2))
    ll = -(d.Y * W - np.log1p(np.exp(W)))
    np.testing.assert_allclose(item_losses(dm, W), [ll[mask[:, 0], 0].mean(), ll[:, 1].mean()])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10), st.integers(0, 10_000))
def test_rotational_indeterminacy_scalar(a, seed):
    rng = np.random.default_rng(seed)
    d = _data(seed=seed % 7)
    params = ParamSet(rng.normal(size=3), rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(4, 2)))
    scaled = params.replace(Gamma=params.Gamma * a, U=params.U / a)
    np.testing.assert_allclose(linear_predictor(d, params), linear_predictor(d, scaled), rtol=1e-10, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(float, (3, 2), elements=st.floats(-3, 3)), hnp.arrays(float, (3, 2), elements=st.floats(-3, 3)))
def test_linear_in_B(B1, B2):
    d = _data()
    base = ParamSet(np.zeros(3), np.zeros((3, 2)), np.ones((3, 1)), np.ones((4, 1)))
    W0 = linear_predictor(d, base)
    W1 = linear_predictor(d, base.replace(B=B1)) - W0
    W2 = linear_predictor(d, base.replace(B=B2)) - W0
    W12 = linear_predictor(d, base.replace(B=B1 + B2)) - W0
    np.testing.assert_allclose(W12, W1 + W2, atol=1e-10)


def test_block_minimizer_does_not_increase_objective():
    # gaussian, U block: exact minimizer is least squares per subject
    rng = np.random.default_rng(3)
    n, q, p, K = 30, 8, 2, 2
    Y = rng.normal(size=(n, q))
    d = DataSet(Y, np.ones((n, q), bool), rng.normal(size=(n, p)), "gaussian-identity")
    params = ParamSet(rng.normal(size=q), rng.normal(size=(q, p)), rng.normal(size=(q, K)), rng.normal(size=(n, K)))
    before = joint_objective(d, params, 0.1)
    R = Y - params.beta0 - d.X @ params.B.T
    U = np.linalg.lstsq(params.Gamma, R.T, rcond=None)[0].T
    assert joint_objective(d, params.replace(U=U), 0.1) <= before + 1e-12


def test_dataset_validation():
    with pytest.raises(DimensionError, match="subject axis"):
        DataSet(np.zeros((3, 2)), np.ones((3, 2), bool), np.zeros((4, 1)))
    with pytest.raises(ValueError, match="constant"):
        DataSet(np.zeros((3, 2)), np.ones((3, 2), bool), np.ones((3, 1)))
    with pytest.raises(ValueError, match="no observed"):
        DataSet(np.zeros((3, 2)), np.array([[1, 1], [0, 0], [1, 1]], bool), np.arange(3.0)[:, None])
    with pytest.raises(ValueError, match="non-finite"):
        DataSet(np.zeros((3, 2)), np.ones((3, 2), bool), np.array([[0.0], [np.nan], [1.0]]))
    with pytest.raises(ValueError):
        DataSet(np.full((3, 2), 2.0), np.ones((3, 2), bool), np.arange(3.0)[:, None])
    with pytest.raises(DimensionError, match="families"):
        DataSet(np.zeros((3, 2)), np.ones((3, 2), bool), np.arange(3.0)[:, None], ("bernoulli-logit",) * 3)


def test_paramset_shape_errors():
    with pytest.raises(DimensionError, match="item axis"):
        ParamSet(np.zeros(3), np.zeros((2, 1)), np.zeros((3, 1)), np.zeros((4, 1)))
    with pytest.raises(DimensionError, match="latent axis"):
        ParamSet(np.zeros(3), np.zeros((3, 1)), np.zeros((3, 2)), np.zeros((4, 1)))
    d = _data()
    with pytest.raises(DimensionError, match="subject axis"):
        linear_predictor(d, ParamSet.zeros(5, 3, 2, 1))


def test_unobserved_cells_zero_filled():
    Y = np.array([[1.0, 7.0], [0.0, 1.0]])
    d = DataSet(Y, np.array([[True, False], [True, True]]), np.array([[0.0], [1.0]]))
    assert d.Y[0, 1] == 0.0
    assert d.n_obs_item.tolist() == [2.0, 1.0]
