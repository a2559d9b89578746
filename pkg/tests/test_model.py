import io
import math

import numpy as np
import pytest

from lib.errors import (
    AllColumnsDropped, ConstantVector, DuplicateConflict, NonFinite, NonPositiveUnderLog,
    RankDeficientWarning, SchemaError, TooFewRows,
)
from lib.model import (
    HONEST, LEAKY, LOG10, PipelineConfig, correlation_filter, cross_validate,
    cross_validate_detailed, evaluate, fit_prediction_pipeline, fold_assignments, load_outcomes,
    mse, pca_apply, pca_fit, pca_reconstruct, pearson_r, remove_low_variance, ridge_fit,
    select_alpha,
)


def linear_task(n=500, d=5, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    beta = rng.standard_normal(d)
    y = X @ beta + noise * rng.standard_normal(n)
    return X, y


# Outcomes

def test_log10_income():
    table = load_outcomes(io.StringIO("fips,income\n42101,46000\n"), LOG10)
    assert table.values['42101'] == pytest.approx(4.66, abs=0.005)
    assert table.name == 'income'


def test_no_transform_is_identity():
    table = load_outcomes(io.StringIO("fips,rate\n42101,0.25\n42003,-1.5\n"))
    assert table.values == {'42101': 0.25, '42003': -1.5}


def test_log_of_zero_rejected():
    with pytest.raises(NonPositiveUnderLog):
        load_outcomes(io.StringIO("fips,income\n42101,0\n"), LOG10)


@pytest.mark.parametrize("text", [
    "county,value\n42101,1\n",
    "fips,value\n4210,1\n",
    "fips,value\n42101,abc\n",
    "fips,value\n42101,inf\n",
    "",
])
def test_outcome_schema_errors(text):
    with pytest.raises(SchemaError):
        load_outcomes(io.StringIO(text))


def test_outcome_conflicting_duplicate():
    with pytest.raises(DuplicateConflict):
        load_outcomes(io.StringIO("fips,value\n42101,1\n42101,2\n"))


def test_align_skips_counties_without_outcome():
    table = load_outcomes(io.StringIO("fips,value\n42101,1\n42003,2\n"))
    idx, y = table.align(['42003', '99999', '42101'])
    assert idx == [0, 2]
    assert list(y) == [2.0, 1.0]


# Filters

def test_constant_column_dropped():
    X = np.array([[1.0, 3.0], [1.0, 4.0], [1.0, 5.0]])
    assert list(remove_low_variance(X)) == [False, True]


def test_variance_floor():
    X = np.array([[0.0], [1.0]])  # sample variance 0.5
    assert remove_low_variance(X, 0.4).all()


def test_all_constant_raises():
    with pytest.raises(AllColumnsDropped):
        remove_low_variance(np.ones((5, 3)))


def test_nonfinite_rejected():
    with pytest.raises(NonFinite):
        remove_low_variance(np.array([[1.0], [np.nan]]))


def test_column_equal_to_y_kept():
    rng = np.random.default_rng(1)
    y = rng.standard_normal(50)
    X = np.column_stack([y, rng.standard_normal(50)])
    assert correlation_filter(X, y)[0]


def test_insignificant_columns_keep_single_best():
    y = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    X = np.array([[1, 0], [0, 1], [1, 1], [0, 0], [1, 0], [0, 1.0]])
    mask = correlation_filter(X, y, alpha=1e-6)
    assert mask.sum() == 1


def test_independent_column_rejection_rate():
    kept = 0
    trials = 2000
    for seed in range(trials):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((1000, 2))
        y = rng.standard_normal(1000)
        # column 0 is the signal, so the floor rule never touches column 1
        X[:, 0] = y
        kept += int(correlation_filter(X, y, 0.05)[1])
    assert abs(1 - kept / trials - 0.95) <= 0.02


# PCA

def test_principal_axis():
    rng = np.random.default_rng(2)
    t = rng.standard_normal(2000)
    X = np.outer(t, [1.0, 1.0]) / math.sqrt(2) + 1e-4 * rng.standard_normal((2000, 2))
    basis = pca_fit(X, 1)
    axis = basis.components[0]
    angle = math.acos(min(1.0, abs(axis @ np.array([1.0, 1.0]) / math.sqrt(2))))
    assert angle < 1e-3
    assert axis[np.argmax(np.abs(axis))] > 0


def test_anisotropic_gaussian_axis():
    rng = np.random.default_rng(4)
    theta = 0.3
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    X = (rng.standard_normal((20000, 2)) * [100.0, 1.0]) @ rot.T
    axis = pca_fit(X, 1).components[0]
    angle = math.acos(min(1.0, abs(axis @ rot[:, 0])))
    assert angle < 1e-3


def test_full_rank_reconstruction_and_distances():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((30, 6))
    basis = pca_fit(X, 6)
    Z = pca_apply(X, basis)
    np.testing.assert_allclose(pca_reconstruct(Z, basis), X, atol=1e-9)
    d_x = np.linalg.norm(X[:, None] - X[None], axis=2)
    d_z = np.linalg.norm(Z[:, None] - Z[None], axis=2)
    np.testing.assert_allclose(d_z, d_x, atol=1e-9)


def test_training_mean_maps_to_zero():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((20, 4))
    basis = pca_fit(X, 3)
    np.testing.assert_allclose(pca_apply(X.mean(axis=0)[None], basis), 0.0, atol=1e-12)


def test_too_many_components_truncated():
    X = np.random.default_rng(0).standard_normal((5, 10))
    with pytest.warns(RankDeficientWarning):
        basis = pca_fit(X, 8)
    assert basis.n_components == 4


def test_variance_rule():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((200, 3)) * [10.0, 1.0, 0.01]
    assert pca_fit(X, None, 0.95).n_components == 1
    assert pca_fit(X, None, 0.999).n_components == 2


def test_components_identical_across_refits():
    rng = np.random.default_rng(12)
    X = rng.standard_normal((40, 5)) * [5.0, 3.0, 2.0, 1.0, 0.5]
    basis = pca_fit(X, 4)
    for other in (X[rng.permutation(len(X))], -X):
        np.testing.assert_allclose(pca_fit(other, 4).components, basis.components, atol=1e-9)
    largest = basis.components[np.arange(4), np.argmax(np.abs(basis.components), axis=1)]
    assert np.all(largest > 0)


# Ridge

def test_ridge_hand_computed_slope():
    model = ridge_fit(np.array([[1.0], [2.0], [3.0]]), np.array([1.0, 2.0, 3.0]), alpha=2.0)
    assert model.weights[0] == pytest.approx(0.5, abs=1e-10)
    assert model.predict(np.array([[2.0]]))[0] == pytest.approx(2.0, abs=1e-10)


def test_small_alpha_is_least_squares():
    X, y = linear_task(100, 4, seed=1, noise=0.1)
    model = ridge_fit(X, y, alpha=1e-12)
    A = np.column_stack([np.ones(len(y)), X])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    np.testing.assert_allclose(model.coef, coef[1:], atol=1e-8)
    np.testing.assert_allclose(model.predict(X), A @ coef, atol=1e-8)


def test_huge_alpha_predicts_mean():
    X, y = linear_task(50, 3, seed=2)
    model = ridge_fit(X, y, alpha=1e15)
    np.testing.assert_allclose(model.predict(X), y.mean(), atol=1e-8)


def test_ridge_rejects_nan():
    with pytest.raises(NonFinite):
        ridge_fit(np.array([[1.0], [np.inf]]), np.array([1.0, 2.0]))


# Cross-validation

def test_fold_assignment():
    a = fold_assignments(10, 10, seed=0)
    assert sorted(a) == list(range(10))
    np.testing.assert_array_equal(a, fold_assignments(10, 10, seed=0))
    with pytest.raises(TooFewRows):
        fold_assignments(9, 10, seed=0)


def test_leave_one_out_predicts_every_row_once():
    X, y = linear_task(10, 2, seed=3, noise=0.5)
    result = cross_validate_detailed(X, y, PipelineConfig(folds=10))
    assert sorted(result.folds) == list(range(10))
    assert np.all(np.isfinite(result.predictions))


def test_same_seed_is_bitwise_deterministic():
    X, y = linear_task(120, 8, seed=4, noise=1.0)
    cfg = PipelineConfig(seed=3)
    np.testing.assert_array_equal(cross_validate(X, y, cfg), cross_validate(X, y, cfg))


def test_noiseless_linear_task():
    X, y = linear_task(500, 5, seed=5)
    predictions = cross_validate(X, y, PipelineConfig(ridge_alpha=1.0))
    assert pearson_r(y, predictions) > 0.99


def test_column_scaling_invariance():
    X, y = linear_task(200, 6, seed=6, noise=0.3)
    scaled = X.copy()
    scaled[:, 2] *= 10
    cfg = PipelineConfig(pca_components=6, correlation_alpha=1.0)
    np.testing.assert_allclose(cross_validate(X, y, cfg), cross_validate(scaled, y, cfg), atol=1e-9)


def test_positive_affine_predictions_keep_r():
    X, y = linear_task(100, 3, seed=7, noise=1.0)
    p = cross_validate(X, y, PipelineConfig())
    assert pearson_r(y, 3 * p + 7) == pytest.approx(pearson_r(y, p), abs=1e-12)


def test_test_fold_outcomes_never_leak():
    X, y = linear_task(100, 20, seed=8, noise=1.0)
    cfg = PipelineConfig(folds=5, seed=1)
    base = cross_validate(X, y, cfg)
    folds = fold_assignments(100, 5, 1)
    for f in range(5):
        corrupted = y.copy()
        corrupted[folds == f] = 1e6
        again = cross_validate(X, corrupted, cfg)
        np.testing.assert_array_equal(again[folds == f], base[folds == f])


def test_leaky_protocol_is_labelled_and_differs():
    X, y = linear_task(60, 200, seed=9, noise=5.0)
    honest = cross_validate_detailed(X, y, PipelineConfig(folds=5))
    leaky = cross_validate_detailed(X, y, PipelineConfig(folds=5, leaky_preprocess=True))
    assert honest.protocol == HONEST
    assert leaky.protocol == LEAKY
    assert not np.array_equal(honest.predictions, leaky.predictions)


def test_two_blocks_combined():
    X, y = linear_task(150, 6, seed=10, noise=0.1)
    fitted = fit_prediction_pipeline([X[:, :3], X[:, 3:] * 1000], y, PipelineConfig(ridge_alpha=1.0))
    assert len(fitted.preprocessor.blocks) == 2
    assert pearson_r(y, fitted.predict([X[:, :3], X[:, 3:] * 1000])) > 0.95


def test_alpha_grid_choice():
    X, y = linear_task(80, 4, seed=11)
    assert select_alpha(X, y, (1.0, 10.0, 100000.0)) in (1.0, 10.0)
    result = cross_validate_detailed(X, y, PipelineConfig(alpha_grid=(1.0, 1e5)))
    assert set(result.alphas) == {1.0}


@pytest.mark.parametrize("kwargs", [
    {'folds': 1}, {'ridge_alpha': 0}, {'pca_components': 0}, {'correlation_alpha': 0},
    {'alpha_grid': ()},
])
def test_pipeline_config_validation(kwargs):
    with pytest.raises(SchemaError):
        PipelineConfig(**kwargs)


# Metrics

def test_perfect_predictions():
    y = np.array([1.0, 3.0, 2.0, 5.0])
    r, err = evaluate(y, y)
    assert r == pytest.approx(1.0, abs=1e-12)
    assert err == 0.0


def test_negated_predictions():
    y = np.array([-1.5, 0.5, 1.0, 0.0])
    assert pearson_r(y, -y) == pytest.approx(-1.0, abs=1e-12)


def test_arithmetic_oracle():
    y = [1, 2, 3, 4]
    y_hat = [1.1, 1.9, 3.2, 3.8]
    # sum of cross deviations 4.7; sums of squares 5 and 4.5
    assert pearson_r(y, y_hat) == pytest.approx(4.7 / math.sqrt(22.5), abs=1e-12)
    assert mse(y, y_hat) == pytest.approx(0.025, abs=1e-12)


def test_constant_vector_is_an_error():
    with pytest.raises(ConstantVector):
        pearson_r([1, 2, 3], [2, 2, 2])


def test_metric_length_checks():
    with pytest.raises(TooFewRows):
        mse([1.0], [1.0])
    with pytest.raises(SchemaError):
        mse([1.0, 2.0], [1.0])
