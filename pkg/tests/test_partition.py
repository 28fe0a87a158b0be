import itertools
import math

import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptbases.core import Bounds, SpatialDataset
from adaptbases.exceptions import DegenerateInput, DisconnectedGraph, NonSquareLattice
from adaptbases.partition import (
    NeighborGraph,
    SpatialPartitioner,
    agglomerative_cluster,
    aggregate_to_lattice,
    assign_observations,
    cluster_dissimilarity,
    fit_nonspatial_glm,
    partition_dataset,
    regular_lattice,
    voronoi_neighbors,
)
from adaptbases.simulate import SimulationRecipe, synthesize_dataset


def data1d(z, family, X=None):
    n = len(z)
    locs = np.column_stack([np.arange(n) + 0.5, np.full(n, 0.5)])
    X = np.zeros((n, 0)) if X is None else X
    return SpatialDataset(locs, z, X, family, Bounds(0, n, 0, 1))


# --------------------------------------------------------------------------
# GLM residuals


def test_saturated_intercept_poisson():
    fit = fit_nonspatial_glm(data1d([2, 2, 2], "poisson"))
    np.testing.assert_allclose(fit.mu, 2.0, rtol=1e-10)
    np.testing.assert_allclose(fit.residuals, 0.0, atol=1e-10)


def test_symmetric_bernoulli():
    fit = fit_nonspatial_glm(data1d([1, 0], "bernoulli"))
    np.testing.assert_allclose(fit.mu, 0.5, atol=1e-12)
    np.testing.assert_allclose(fit.residuals, [1.0, -1.0], atol=1e-12)


@pytest.mark.parametrize("family", ["poisson", "bernoulli"])
def test_glm_matches_statsmodels(family):
    rng = np.random.default_rng(5)
    X = rng.uniform(-1, 1, (50, 1))
    eta = 0.4 + 0.8 * X[:, 0]
    z = rng.poisson(np.exp(eta)) if family == "poisson" else (rng.uniform(size=50) < 1 / (1 + np.exp(-eta)))
    fit = fit_nonspatial_glm(data1d(z.astype(float), family, X))
    fam = sm.families.Poisson() if family == "poisson" else sm.families.Binomial()
    ref = sm.GLM(z.astype(float), sm.add_constant(X), family=fam).fit(tol=1e-12)
    np.testing.assert_allclose(fit.coef, ref.params, atol=1e-6)
    np.testing.assert_allclose(fit.residuals, ref.resid_pearson, atol=1e-6)


# --------------------------------------------------------------------------
# lattice aggregation


def test_identity_aggregation():
    rng = np.random.default_rng(0)
    locs = rng.uniform(0, 1, (30, 2))
    res = rng.normal(size=30)
    agg = aggregate_to_lattice(locs, res, lattice=locs)
    np.testing.assert_array_equal(agg.values, res)
    np.testing.assert_array_equal(agg.counts, 1)


def test_full_pooling():
    res = np.array([1.0, 2.0, 3.0, 10.0])
    agg = aggregate_to_lattice(np.random.default_rng(1).uniform(0, 1, (4, 2)), res, 1, Bounds(0, 1, 0, 1))
    assert agg.values.tolist() == [4.0] and agg.coords.tolist() == [[0.5, 0.5]]


def test_lattice_drops_empty_cells_and_checks_square():
    locs = np.array([[0.1, 0.1], [0.2, 0.15], [0.9, 0.9]])
    agg = aggregate_to_lattice(locs, [1.0, 3.0, 5.0], 4, Bounds(0, 1, 0, 1))
    assert agg.values.tolist() == [2.0, 5.0] and agg.counts.tolist() == [2, 1]
    assert regular_lattice(Bounds.square(), 400).shape == (400, 2)
    with pytest.raises(NonSquareLattice):
        regular_lattice(Bounds.square(), 10)


# --------------------------------------------------------------------------
# Voronoi neighbours


def brute_force_delaunay(pts):
    """Edges of triangles whose circumcircle holds no other point."""
    edges = set()
    for i, j, k in itertools.combinations(range(len(pts)), 3):
        a, b, c = pts[i], pts[j], pts[k]
        d = 2 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
        if abs(d) < 1e-14:
            continue
        ux = ((a @ a) * (b[1] - c[1]) + (b @ b) * (c[1] - a[1]) + (c @ c) * (a[1] - b[1])) / d
        uy = ((a @ a) * (c[0] - b[0]) + (b @ b) * (a[0] - c[0]) + (c @ c) * (b[0] - a[0])) / d
        centre = np.array([ux, uy])
        r2 = np.sum((a - centre) ** 2)
        others = [m for m in range(len(pts)) if m not in (i, j, k)]
        if all(np.sum((pts[m] - centre) ** 2) > r2 for m in others):
            edges |= {(i, j), (i, k), (j, k)}
    return edges


def test_small_graphs():
    tri = voronoi_neighbors([[0, 0], [1, 0], [0.3, 1]])
    assert tri.edges == {(0, 1), (0, 2), (1, 2)}
    assert voronoi_neighbors([[0, 0], [1, 1]]).edges == {(0, 1)}
    line = voronoi_neighbors([[0, 0], [2, 0], [1, 0]])
    assert line.edges == {(0, 2), (1, 2)}
    with pytest.raises(DegenerateInput):
        voronoi_neighbors([[0, 0]])
    with pytest.raises(DegenerateInput):
        voronoi_neighbors([[0, 0], [0, 0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_points_match_empty_circumcircle_oracle(seed):
    pts = np.random.default_rng(seed).uniform(0, 1, (10, 2))
    graph = voronoi_neighbors(pts)
    assert graph.edges == brute_force_delaunay(pts)
    assert graph.is_connected_subset(range(10))
    assert all(i < j for i, j in graph.edges)


def test_regular_lattice_uses_rook_adjacency():
    pts = regular_lattice(Bounds(0, 3, 0, 3), 9)
    graph = voronoi_neighbors(pts)
    # corners of a lattice square are co-circular; their Voronoi cells meet only at a point
    assert len(graph.edges) == 12
    for i, j in graph.edges:
        assert np.linalg.norm(pts[i] - pts[j]) == pytest.approx(1.0)


# --------------------------------------------------------------------------
# dissimilarity and merging


def pair_graph(d=2.0):
    return NeighborGraph(np.array([[0.0, 0.0], [d, 0.0]]), frozenset({(0, 1)}))


def test_dissimilarity_examples():
    g = pair_graph(2.0)
    assert cluster_dissimilarity([0], [1], np.array([1.0, 3.0]), g) == pytest.approx(1.0)
    assert cluster_dissimilarity([0], [1], np.array([2.0, 2.0]), g) == 0.0
    far = NeighborGraph(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), frozenset({(0, 1), (1, 2)}))
    assert cluster_dissimilarity([0], [2], np.zeros(3), far) == math.inf


def grid_graph(n=5, seed=0):
    pts = regular_lattice(Bounds(0, n, 0, n), n * n)
    return pts, voronoi_neighbors(pts), np.random.default_rng(seed).normal(size=n * n)


def test_trivial_cluster_counts():
    _, g, vals = grid_graph(4)
    cs = agglomerative_cluster(vals, g, 16)
    assert cs.assignment.tolist() == list(range(1, 17))
    one = agglomerative_cluster(vals, g, 1)
    assert set(one.assignment) == {1} and one.sizes.tolist() == [16]


def test_two_triplets_match_exhaustive_optimum():
    pts = np.array([[0, 0], [1, 0], [0.5, 0.9], [6, 0], [7, 0], [6.5, 0.9]], dtype=float)
    vals = np.array([0, 0, 0, 5, 5, 5], dtype=float)
    g = voronoi_neighbors(pts)
    cs = agglomerative_cluster(vals, g, 2)

    best, best_cost = None, math.inf
    for mask in range(1, 2**6 - 1):
        a = [i for i in range(6) if mask >> i & 1]
        b = [i for i in range(6) if not mask >> i & 1]
        if not (g.is_connected_subset(a) and g.is_connected_subset(b)):
            continue
        cost = sum(((vals[c] - vals[c].mean()) ** 2).sum() for c in (a, b))
        if cost < best_cost - 1e-12:
            best, best_cost = {frozenset(a), frozenset(b)}, cost
    assert {frozenset(m.tolist()) for m in cs.members} == best
    assert best == {frozenset({0, 1, 2}), frozenset({3, 4, 5})}


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_merges_are_minimal_and_clusters_contiguous(seed, K):
    _, g, vals = grid_graph(4, seed)
    cs = agglomerative_cluster(vals, g, K)
    assert cs.K == K and sorted(set(cs.assignment)) == list(range(1, K + 1))
    assert sum(cs.sizes) == 16
    for m in cs.members:
        assert g.is_connected_subset(m)
    # replay the merge trace, rescanning every cluster pair at each step
    clusters = {i + 1: [i] for i in range(16)}
    for keep, drop, d in cs.merge_trace:
        scan = {(a, b): cluster_dissimilarity(clusters[a], clusters[b], vals, g)
                for a, b in itertools.combinations(sorted(clusters), 2)}
        assert d == pytest.approx(min(scan.values()), rel=1e-12, abs=1e-15)
        assert scan[(keep, drop)] == pytest.approx(d, rel=1e-12, abs=1e-15)
        clusters[keep] += clusters.pop(drop)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_scale_invariance(seed, c):
    _, g, vals = grid_graph(4, seed)
    a = agglomerative_cluster(vals, g, 4)
    b = agglomerative_cluster(c * vals, g, 4)
    assert np.array_equal(a.assignment, b.assignment)
    for (_, _, d1), (_, _, d2) in zip(a.merge_trace, b.merge_trace):
        assert d2 == pytest.approx(c * c * d1, rel=1e-9, abs=1e-15)


def test_disconnected_graph_reports_achievable():
    g = NeighborGraph(np.array([[0, 0], [1, 0], [5, 5], [6, 5]], dtype=float), frozenset({(0, 1), (2, 3)}))
    with pytest.raises(DisconnectedGraph) as err:
        agglomerative_cluster(np.zeros(4), g, 1)
    assert err.value.achievable == 2


# --------------------------------------------------------------------------
# observation labels


def test_assign_observations_nearest_with_low_index_ties():
    lattice = np.array([[0.0, 0.0], [2.0, 0.0]])
    part = assign_observations(np.array([[0.0, 0.0], [1.0, 0.0], [1.9, 0.1]]), lattice, [3, 7])
    assert part.labels.tolist() == [3, 3, 7]


def test_simulated_partition_has_every_label():
    fit, _, _ = synthesize_dataset(SimulationRecipe(n_fit=5000, n_validate=1, seed=21))
    part, agg, graph, clusters = partition_dataset(fit, 9, 400, return_details=True)
    assert sorted(set(part.labels)) == list(range(1, 10))
    assert np.all(np.bincount(part.labels)[1:] > 0)
    d2 = ((fit.coords[:, None, :] - agg.coords[None, :, :]) ** 2).sum(-1)
    np.testing.assert_array_equal(part.labels, clusters.assignment[np.argmin(d2, axis=1)])
    for m in clusters.members:
        assert graph.is_connected_subset(m)


def test_partitioner_estimator():
    fit, val, _ = synthesize_dataset(SimulationRecipe(n_fit=800, n_validate=50, seed=2))
    X = np.column_stack([fit.coords, fit.X])
    est = SpatialPartitioner(n_partitions=4, lattice_size=100, bounds=(0, 5, 0, 5)).fit(X, fit.z)
    assert sorted(set(est.labels_)) == [1, 2, 3, 4]
    assert np.array_equal(est.predict(X), est.labels_)
    assert set(est.predict(val.coords)) <= {1, 2, 3, 4}
    assert est.get_params()["n_partitions"] == 4
