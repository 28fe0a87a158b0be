import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

import oracles
from test_sampler import two_partition_context
from adaptbases.basis import bisquare
from adaptbases.core import Bounds, ModelConfig, ModelState, PartitionState, SpatialDataset
from adaptbases.exceptions import DegenerateLabels, EmptyDraws, LengthMismatch, MissingCovariates
from adaptbases.inference import (
    GridSpec,
    auc,
    interval_coverage,
    posterior_predict,
    rcvmspe,
    summarize_draws,
    surface_summary,
)
from adaptbases.partition import single_partition
from adaptbases.sampler import FitContext, ModelBases, PosteriorDraws, run_chain


def make_draws(states, ctx, p=None):
    S = len(states)
    K = len(ctx.bases.R)
    return PosteriorDraws(list(states), np.arange(1, S + 1), np.zeros((S, K)), np.zeros((S, K)),
                          np.zeros((S, K)), np.zeros(S), {}, 0, "", ctx.bases, ctx.partition, ctx.cfg,
                          ctx.data.p if p is None else p)


def dense_eta(state, ctx, locs, X):
    labels = ctx.partition.assign(locs)
    eta = np.zeros(locs.shape[0])
    for m, s in enumerate(locs):
        col = 0
        for layer in ctx.bases.layers:
            for u in layer.knots:
                eta[m] += bisquare(s, u, layer.gamma) * state.gamma[col]
                col += 1
        k = list(ctx.bases.labels).index(labels[m])
        part = state.partitions[k]
        eta[m] += part.beta[0] + X[m] @ part.beta[1:]
        if part.r:
            knots = ctx.bases.candidates[k][list(part.knots)]
            eta[m] += (oracles.rbf_design(s[None], knots, part.epsilon) @ part.delta)[0]
    return eta


@pytest.fixture(scope="module")
def toy_chain():
    cfg = ModelConfig(K=2, iterations=300, burn_in=50, thin=5, global_basis_resolutions=(4, 16), seed=4)
    ctx = two_partition_context(cfg=cfg)
    return ctx, run_chain(ctx)


def test_zero_draws_give_zero_summary():
    ctx = two_partition_context()
    zero = ModelState(tuple(PartitionState(np.zeros(3), (), [], 1.0, 1.0) for _ in range(2)),
                      np.zeros(ctx.bases.G), 1.0)
    s = posterior_predict(make_draws([zero] * 5, ctx), ctx.data.coords[:7], np.zeros((7, 2)))
    assert np.all(s.eta_mean == 0) and np.all(s.eta_sd == 0)
    assert np.all(s.resp_mean == 1.0) and np.all(s.resp_sd == 0)


def test_single_knot_at_prediction_site():
    locs = np.array([[0.2, 0.3], [1.1, 1.4]])
    bounds = Bounds(0, 2, 0, 2)
    data = SpatialDataset(locs, [0, 1], np.zeros((2, 0)), "poisson", bounds)
    cfg = ModelConfig(K=1, fit_intercept=False, global_basis_resolutions=())
    ctx = FitContext(data, single_partition(locs), ModelBases((1,), (locs[1:].copy(),), (), bounds), cfg)
    state = ModelState((PartitionState([], (0,), [2.0], 0.9, 1.0),), [], 1.0)
    s = posterior_predict(make_draws([state], ctx), locs[1:])
    assert s.eta_mean[0] == 2.0 and s.eta_sd[0] == 0.0


def test_summary_matches_per_draw_recomputation(toy_chain):
    ctx, draws = toy_chain
    assert len(draws) == 50
    rng = np.random.default_rng(0)
    locs = rng.uniform(0, 2, (12, 2))
    X = rng.uniform(-0.5, 0.5, (12, 2))
    s = posterior_predict(draws, locs, X, level=0.8)
    eta = np.array([dense_eta(st_, ctx, locs, X) for st_ in draws.states])
    np.testing.assert_allclose(s.eta_mean, eta.mean(0), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(s.eta_sd, eta.std(0, ddof=1), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(s.resp_mean, np.exp(eta).mean(0), rtol=1e-12)
    np.testing.assert_allclose(s.resp_sd, np.exp(eta).std(0, ddof=1), rtol=1e-10)
    np.testing.assert_allclose(s.lower, np.quantile(eta, 0.1, axis=0), rtol=1e-12)
    np.testing.assert_allclose(s.upper, np.quantile(eta, 0.9, axis=0), rtol=1e-12)
    assert np.all(s.resp_mean > 0) and np.all(s.eta_sd >= 0)


def test_sd_invariant_to_draw_order(toy_chain):
    ctx, draws = toy_chain
    locs = ctx.data.coords[:9]
    X = ctx.data.X[:9]
    a = posterior_predict(draws, locs, X)
    perm = np.random.default_rng(1).permutation(len(draws))
    shuffled = make_draws([draws.states[i] for i in perm], ctx)
    b = posterior_predict(shuffled, locs, X)
    np.testing.assert_allclose(a.eta_sd, b.eta_sd, rtol=1e-12)
    np.testing.assert_allclose(a.eta_mean, b.eta_mean, rtol=1e-12)


def test_prediction_errors(toy_chain):
    ctx, draws = toy_chain
    with pytest.raises(MissingCovariates):
        posterior_predict(draws, ctx.data.coords[:3])
    with pytest.raises(MissingCovariates):
        posterior_predict(draws, ctx.data.coords[:3], np.zeros((3, 1)))
    with pytest.raises(EmptyDraws):
        posterior_predict(make_draws([], ctx), ctx.data.coords[:3], np.zeros((3, 2)))


def test_bernoulli_response_scale():
    eta = np.random.default_rng(2).normal(size=(20, 4))
    s = summarize_draws(eta, "bernoulli")
    np.testing.assert_allclose(s.resp_mean, expit(eta).mean(0))
    assert np.all((s.resp_mean > 0) & (s.resp_mean < 1))


def test_rcvmspe():
    assert rcvmspe([1, 2, 3], [1, 2, 3]) == 0.0
    assert rcvmspe([1, 2], [1, 3]) == pytest.approx(math.sqrt(0.5), abs=1e-15)
    with pytest.raises(LengthMismatch):
        rcvmspe([1, 2], [1])


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=30), st.floats(-10, 10))
def test_rcvmspe_sign_symmetry(z, e):
    z = np.array(z)
    assert rcvmspe(z + e, z) == pytest.approx(rcvmspe(z - e, z), rel=1e-12, abs=1e-12)


def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert auc([0.9, 0.4, 0.35, 0.8], [1, 0, 1, 0]) == 0.5
    with pytest.raises(DegenerateLabels):
        auc([0.1, 0.2], [1, 1])


@given(st.integers(0, 2**32 - 1))
def test_auc_monotone_invariance_and_pairwise_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 30))
    labels = rng.integers(0, 2, n)
    labels[:2] = (0, 1)
    scores = np.round(rng.normal(size=n), 1)
    pos, neg = scores[labels == 1], scores[labels == 0]
    pairs = np.mean([1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg])
    assert auc(scores, labels) == pytest.approx(pairs, abs=1e-12)
    assert auc(np.exp(3 * scores) + 1, labels) == pytest.approx(pairs, abs=1e-12)


def test_interval_coverage():
    s = summarize_draws(np.array([[0.0, 1.0], [1.0, 2.0], [2.0, 3.0]]), "poisson", level=0.5)
    assert interval_coverage(s, [1.0, 10.0]) == 0.5


def test_surface_zero_and_single_cell():
    ctx = two_partition_context()
    zero = ModelState(tuple(PartitionState(np.zeros(3), (), [], 1.0, 1.0) for _ in range(2)),
                      np.zeros(ctx.bases.G), 1.0)
    surf = surface_summary(make_draws([zero, zero], ctx), GridSpec(4, 3, Bounds(0, 2, 0, 2)))
    assert surf.as_grid(surf.mean).shape == (3, 4)
    assert not np.any(surf.mean) and not np.any(surf.sd)


def test_surface_matches_pointwise_predictions(toy_chain):
    ctx, draws = toy_chain
    one = surface_summary(draws, GridSpec(1, 1, Bounds(0, 2, 0, 2)))
    point = posterior_predict(draws, [[1.0, 1.0]], np.zeros((1, 2)))
    assert one.mean[0] == pytest.approx(point.eta_mean[0], rel=1e-14)
    grid = GridSpec(5, 5, Bounds(0, 2, 0, 2))
    surf = surface_summary(draws, grid, covariates=[0.1, -0.2])
    for i, pt in enumerate(grid.points()):
        single = posterior_predict(draws, pt[None], np.array([[0.1, -0.2]]), level=None)
        assert surf.mean[i] == pytest.approx(single.eta_mean[0], rel=1e-12, abs=1e-12)
        assert surf.sd[i] == pytest.approx(single.eta_sd[0], rel=1e-10, abs=1e-12)
        assert surf.resp_mean[i] == pytest.approx(single.resp_mean[0], rel=1e-12)
