import math

import numpy as np
import pytest

from adaptbases.covariance import CovarianceSpec
from adaptbases.exceptions import FactorizationFailure, ValidationError
from adaptbases.simulate import (
    SimulationRecipe,
    recipe_from_text,
    sample_gp_realization,
    synthesize_dataset,
)


def test_degenerate_variance_gives_zero():
    assert sample_gp_realization(np.zeros((1, 1)), 0).tolist() == [0.0]


def test_identity_draws_have_unit_variance():
    rng = np.random.default_rng(1)
    draws = np.array([sample_gp_realization(np.eye(3), rng) for _ in range(10_000)])
    assert np.array_equal(sample_gp_realization(np.eye(3), 5), sample_gp_realization(np.eye(3), 5))
    x = draws[:, 0] ** 2
    assert abs(x.mean() - 1) < 3 * x.std() / math.sqrt(x.size)


def test_correlated_pair():
    rng = np.random.default_rng(2)
    cov = np.array([[1.0, 0.9], [0.9, 1.0]])
    draws = np.array([sample_gp_realization(cov, rng) for _ in range(10_000)])
    prod = draws[:, 0] * draws[:, 1]
    assert abs(prod.mean() - 0.9) < 3 * prod.std() / math.sqrt(prod.size)


def test_not_psd_raises():
    with pytest.raises(FactorizationFailure):
        sample_gp_realization(np.array([[1.0, 2.0], [2.0, 1.0]]), 0)


def test_zero_field_linear_predictor():
    fit, val, truth = synthesize_dataset(SimulationRecipe(n_fit=300, n_validate=100, field=None, seed=3))
    X = np.vstack([fit.X, val.X])
    assert np.array_equal(truth.eta, X[:, 0] + X[:, 1])
    assert np.all(truth.w == 0)
    assert math.exp(0.5 + 0.5) == pytest.approx(math.e)


def test_bernoulli_zero_eta_mean():
    recipe = SimulationRecipe(n_fit=10_000, n_validate=1, field=None, family="bernoulli",
                              beta_true=(0.0, 0.0), seed=4)
    fit, _, truth = synthesize_dataset(recipe)
    assert np.all(truth.eta == 0)
    assert abs(fit.z.mean() - 0.5) < 3 * 0.5 / math.sqrt(fit.n)


def test_poisson_mean_matches_intensity():
    recipe = SimulationRecipe(n_fit=10_000, n_validate=1, field=None, seed=6)
    fit, _, truth = synthesize_dataset(recipe)
    mu = np.exp(truth.eta[truth.is_fit])
    assert abs(fit.z.mean() - mu.mean()) < 3 * math.sqrt(mu.mean() / fit.n)


def test_default_recipe_shapes_and_split():
    recipe = SimulationRecipe(n_fit=400, n_validate=100, seed=7)
    fit, val, truth = synthesize_dataset(recipe)
    assert fit.n == 400 and val.n == 100 and truth.eta.shape == (500,)
    assert truth.is_fit.sum() == 400
    both = np.vstack([fit.coords, val.coords])
    assert np.unique(both, axis=0).shape[0] == 500
    assert np.all((both >= 0) & (both <= 5))
    assert np.all((fit.X >= -0.5) & (fit.X <= 0.5))
    again = synthesize_dataset(recipe)
    assert np.array_equal(again[0].z, fit.z) and np.array_equal(again[2].w, truth.w)


def test_stationary_field_variance():
    recipe = SimulationRecipe(n_fit=600, n_validate=1, field=CovarianceSpec("exponential", range=1.0),
                              seed=8)
    _, _, truth = synthesize_dataset(recipe)
    assert 0.2 < truth.w.var() < 3.0


def test_recipe_validation_and_text():
    with pytest.raises(ValidationError):
        SimulationRecipe(n_fit=0)
    with pytest.raises(ValidationError):
        SimulationRecipe(covariate_range=(1.0, 1.0))
    r = recipe_from_text("n_fit = 20\nn_validate = 5\nfamily = bernoulli\nfield = matern\nrange = 0.7\nnu = 1.5\n")
    assert r.n_fit == 20 and r.family.value == "bernoulli" and r.field.range == 0.7 and r.field.nu == 1.5
    assert recipe_from_text("field = none\n").field is None
    with pytest.raises(ValidationError):
        recipe_from_text("bogus = 1\n")
