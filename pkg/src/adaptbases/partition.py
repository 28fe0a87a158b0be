"""Contiguous spatial partitioning by agglomerative clustering of GLM residuals.

Pipeline: nonspatial GLM fit -> Pearson residuals -> aggregation onto a
regular lattice -> Voronoi-neighbour graph of the occupied lattice points ->
greedy merging of neighbouring clusters -> nearest-lattice-point labels for
the original observations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import Delaunay, QhullError
from scipy.special import expit
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from .basis import _cell_centres, nearest_index
from .core import Bounds, Family, SpatialDataset
from .exceptions import (
    DegenerateInput,
    DisconnectedGraph,
    NonSquareLattice,
    SeparationOrDivergence,
    ValidationError,
)

# --------------------------------------------------------------------------
# nonspatial GLM


@dataclass(frozen=True, eq=False)
class GLMFit:
    coef: np.ndarray          # intercept first
    mu: np.ndarray
    residuals: np.ndarray     # Pearson
    deviance: float
    n_iter: int


def _deviance(z, mu, family):
    if family is Family.POISSON:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(z > 0, z * np.log(z / mu), 0.0)
        return float(2.0 * np.sum(t - (z - mu)))
    mu = np.clip(mu, 1e-300, 1 - 1e-16)
    return float(-2.0 * np.sum(z * np.log(mu) + (1 - z) * np.log1p(-mu)))


def fit_nonspatial_glm(data: SpatialDataset, tol: float = 1e-8, max_iter: int = 50,
                       intercept: bool = True) -> GLMFit:
    """Canonical-link GLM (intercept prepended by default), fitted by IRLS.

    Stops once ``|dev - dev_old| / (|dev| + 0.1) < tol``; failing to do so
    within ``max_iter`` steps raises :class:`SeparationOrDivergence`.
    """
    z = np.asarray(data.z, dtype=float)
    A = np.column_stack([np.ones(data.n), data.X]) if intercept else np.asarray(data.X)
    family = data.family
    if A.shape[1] == 0:
        mu = np.ones(data.n) if family is Family.POISSON else np.full(data.n, 0.5)
        var = mu if family is Family.POISSON else mu * (1 - mu)
        return GLMFit(np.zeros(0), mu, (z - mu) / np.sqrt(var), _deviance(z, mu, family), 0)
    if family is Family.POISSON:
        mu = z + 0.5
        eta = np.log(mu)
    else:
        mu = (z + 0.5) / 2.0
        eta = np.log(mu / (1 - mu))
    dev = _deviance(z, mu, family)
    for it in range(1, max_iter + 1):
        w = mu if family is Family.POISSON else mu * (1 - mu)
        work = eta + (z - mu) / w
        sw = np.sqrt(w)
        coef, *_ = np.linalg.lstsq(A * sw[:, None], work * sw, rcond=None)
        eta = A @ coef
        if not np.all(np.isfinite(eta)):
            raise SeparationOrDivergence(f"IRLS produced non-finite predictors at iteration {it}")
        mu = np.exp(eta) if family is Family.POISSON else expit(eta)
        dev_new = _deviance(z, mu, family)
        if abs(dev_new - dev) / (abs(dev_new) + 0.1) < tol:
            var = mu if family is Family.POISSON else mu * (1 - mu)
            resid = (z - mu) / np.sqrt(var)
            return GLMFit(coef, mu, resid, dev_new, it)
        dev = dev_new
    raise SeparationOrDivergence(
        f"IRLS did not converge in {max_iter} iterations (deviance {dev:.6g}); "
        "the data may be separable")


# --------------------------------------------------------------------------
# lattice aggregation


@dataclass(frozen=True, eq=False)
class LatticeAggregate:
    coords: np.ndarray        # occupied lattice points
    values: np.ndarray        # mean residual per occupied point
    counts: np.ndarray
    obs_to_node: np.ndarray   # index into ``coords`` for every observation
    lattice_index: np.ndarray  # position of each occupied point in the full grid


def regular_lattice(bounds: Bounds, L: int) -> np.ndarray:
    side = math.isqrt(L)
    if L < 1 or side * side != L:
        raise NonSquareLattice(f"lattice size {L} is not a perfect square")
    return _cell_centres(bounds, side, side)


def aggregate_to_lattice(coords, residuals, L: int | None = None, bounds: Bounds | None = None,
                         lattice=None) -> LatticeAggregate:
    """Average residuals over the observations nearest to each lattice point.

    Either ``L`` (a perfect square; a regular cell-centred grid over
    ``bounds``) or explicit ``lattice`` points are given. Empty lattice points
    are dropped.
    """
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    residuals = np.asarray(residuals, dtype=float).ravel()
    if lattice is None:
        if L is None:
            raise ValidationError("give either L or lattice")
        if bounds is None:
            bounds = Bounds.from_coords(coords)
        lattice = regular_lattice(bounds, L)
    lattice = np.asarray(lattice, dtype=float).reshape(-1, 2)
    node = nearest_index(coords, lattice)
    counts_full = np.bincount(node, minlength=lattice.shape[0])
    sums_full = np.bincount(node, weights=residuals, minlength=lattice.shape[0])
    occupied = np.flatnonzero(counts_full)
    remap = np.full(lattice.shape[0], -1)
    remap[occupied] = np.arange(occupied.size)
    counts = counts_full[occupied]
    return LatticeAggregate(lattice[occupied], sums_full[occupied] / counts, counts,
                            remap[node], occupied)


# --------------------------------------------------------------------------
# Voronoi neighbours


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    nodes: np.ndarray
    edges: frozenset

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def edge_array(self) -> np.ndarray:
        return np.array(sorted(self.edges), dtype=np.intp).reshape(-1, 2)

    def adjacency(self) -> list[set[int]]:
        adj: list[set[int]] = [set() for _ in range(self.n_nodes)]
        for i, j in self.edges:
            adj[i].add(j)
            adj[j].add(i)
        return adj

    def is_connected_subset(self, members) -> bool:
        members = set(int(m) for m in members)
        if not members:
            return False
        adj = self.adjacency()
        start = next(iter(members))
        seen = {start}
        stack = [start]
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if w in members and w not in seen:
                    seen.add(w)
                    stack.append(w)
        return seen == members


def _circumcentres(pts: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    a, b, c = pts[simplices[:, 0]], pts[simplices[:, 1]], pts[simplices[:, 2]]
    b = b - a
    c = c - a
    d = 2.0 * (b[:, 0] * c[:, 1] - b[:, 1] * c[:, 0])
    bb = (b**2).sum(1)
    cc = (c**2).sum(1)
    ux = (c[:, 1] * bb - b[:, 1] * cc) / d
    uy = (b[:, 0] * cc - c[:, 0] * bb) / d
    return a + np.column_stack([ux, uy])


def voronoi_neighbors(locs) -> NeighborGraph:
    """Pairs of locations whose Voronoi cells share a boundary of positive length.

    Built from the Delaunay triangulation. An interior Delaunay edge whose
    two triangles share a circumcentre (co-circular points, e.g. the corners
    of a lattice square) only touches at a point and is dropped, which makes
    the result independent of the triangulator's arbitrary diagonal choice.
    """
    pts = np.asarray(locs, dtype=float).reshape(-1, 2)
    n = pts.shape[0]
    if n < 2:
        raise DegenerateInput("need at least two locations")
    if np.unique(pts, axis=0).shape[0] != n:
        raise DegenerateInput("locations must be distinct")
    centred = pts - pts.mean(axis=0)
    scale = float(np.abs(centred).max())
    if n == 2 or np.linalg.matrix_rank(centred, tol=1e-12 * scale) < 2:
        # collinear: cells are parallel strips, consecutive points touch
        direction = centred[np.argmax(np.abs(centred).sum(1))]
        order = np.argsort(centred @ direction, kind="stable")
        edges = {tuple(sorted((int(order[i]), int(order[i + 1])))) for i in range(n - 1)}
        return NeighborGraph(pts, frozenset(edges))
    try:
        tri = Delaunay(pts)
    except QhullError as exc:  # pragma: no cover - guarded by the rank test
        raise DegenerateInput(f"triangulation failed: {exc}")
    simplices = tri.simplices
    cc = _circumcentres(pts, simplices)
    tol = 1e-9 * max(scale, 1.0)
    edges = set()
    for s, simplex in enumerate(simplices):
        for e in range(3):
            i, j = int(simplex[(e + 1) % 3]), int(simplex[(e + 2) % 3])
            other = tri.neighbors[s, e]
            if other == -1 or np.linalg.norm(cc[s] - cc[other]) > tol:
                edges.add((min(i, j), max(i, j)))
    return NeighborGraph(pts, frozenset(edges))


# --------------------------------------------------------------------------
# clustering


def cluster_dissimilarity(c1, c2, values, graph: NeighborGraph) -> float:
    """Size-weighted squared mean difference divided by the mean neighbour distance.

    ``c1`` and ``c2`` are node-index collections; ``values`` holds the
    (aggregated) residual at every node. Only neighbour pairs spanning the
    two clusters enter the mean distance; with none the result is ``inf``.
    """
    c1 = [int(i) for i in c1]
    c2 = [int(i) for i in c2]
    s1, s2 = set(c1), set(c2)
    if s1 & s2:
        raise ValidationError("clusters must be disjoint")
    values = np.asarray(values, dtype=float)
    dists = [np.linalg.norm(graph.nodes[i] - graph.nodes[j]) for i, j in graph.edges
             if (i in s1 and j in s2) or (i in s2 and j in s1)]
    if not dists:
        return math.inf
    n1, n2 = len(c1), len(c2)
    diff = values[c1].mean() - values[c2].mean()
    return (n1 * n2 / (n1 + n2)) * diff * diff / float(np.mean(dists))


@dataclass(frozen=True, eq=False)
class ClusterSet:
    assignment: np.ndarray            # node -> label in 1..K
    members: tuple[np.ndarray, ...]   # members[k-1] = node indices of label k
    residual_means: np.ndarray
    sizes: np.ndarray
    merge_trace: tuple[tuple[int, int, float], ...] = ()

    @property
    def K(self) -> int:
        return len(self.members)


def agglomerative_cluster(values, graph: NeighborGraph, K: int, criterion: str = "residual") -> ClusterSet:
    """Merge neighbouring clusters until ``K`` remain.

    Every node starts as its own cluster labelled ``index + 1``. Each step
    merges the pair with the smallest finite dissimilarity (ties: smallest
    ``(k1, k2)``) into the smaller label. ``criterion="pointwise"`` swaps the
    pooled residual criterion for the mean over spanning neighbour pairs of
    ``|v_i - v_j| / ||s_i - s_j||``. Final labels are renumbered ``1..K`` in
    order of surviving label.
    """
    values = np.asarray(values, dtype=float).ravel()
    n = graph.n_nodes
    if values.shape[0] != n:
        raise ValidationError("one value per graph node required")
    if not 1 <= K <= n:
        raise ValidationError(f"K={K} must lie in 1..{n}")
    if criterion not in ("residual", "pointwise"):
        raise ValidationError(f"unknown criterion {criterion!r}")

    size = {i + 1: 1 for i in range(n)}
    total = {i + 1: float(values[i]) for i in range(n)}
    members = {i + 1: [i] for i in range(n)}
    # adj[a][b] = [n_spanning_edges, sum_of_distances, sum_of_pointwise]
    adj: dict[int, dict[int, list[float]]] = {i + 1: {} for i in range(n)}
    for i, j in graph.edges:
        d = float(np.linalg.norm(graph.nodes[i] - graph.nodes[j]))
        pw = abs(values[i] - values[j]) / d
        adj[i + 1][j + 1] = [1, d, pw]
        adj[j + 1][i + 1] = [1, d, pw]

    def dissim(a, b, stats):
        cnt, dsum, pwsum = stats
        if criterion == "pointwise":
            return pwsum / cnt
        na, nb = size[a], size[b]
        diff = total[a] / na - total[b] / nb
        return (na * nb / (na + nb)) * diff * diff / (dsum / cnt)

    trace = []
    while len(size) > K:
        best = None
        for a in sorted(adj):
            for b, stats in adj[a].items():
                if b <= a:
                    continue
                cand = (dissim(a, b, stats), a, b)
                if best is None or cand < best:
                    best = cand
        if best is None:
            raise DisconnectedGraph(
                f"cannot merge below {len(size)} clusters: remaining clusters are not neighbours",
                achievable=len(size))
        d, a, b = best
        keep, drop = a, b   # a < b by construction
        trace.append((keep, drop, d))
        size[keep] += size.pop(drop)
        total[keep] += total.pop(drop)
        members[keep].extend(members.pop(drop))
        del adj[keep][drop]
        for c, stats in adj.pop(drop).items():
            if c == keep:
                continue
            del adj[c][drop]
            cur = adj[keep].get(c)
            if cur is None:
                merged = list(stats)
            else:
                merged = [cur[0] + stats[0], cur[1] + stats[1], cur[2] + stats[2]]
            adj[keep][c] = merged
            adj[c][keep] = list(merged)

    labels = sorted(size)
    assignment = np.empty(n, dtype=np.intp)
    member_arrays = []
    for new, old in enumerate(labels, start=1):
        idx = np.array(sorted(members[old]), dtype=np.intp)
        assignment[idx] = new
        member_arrays.append(idx)
    means = np.array([total[old] / size[old] for old in labels])
    sizes = np.array([size[old] for old in labels])
    return ClusterSet(assignment, tuple(member_arrays), means, sizes, tuple(trace))


@dataclass(frozen=True, eq=False)
class PartitionAssignment:
    labels: np.ndarray          # per observation, in 1..K
    lattice_coords: np.ndarray
    lattice_labels: np.ndarray

    @property
    def K(self) -> int:
        return int(np.unique(self.lattice_labels).size)

    def assign(self, coords) -> np.ndarray:
        return self.lattice_labels[nearest_index(coords, self.lattice_coords)]


def assign_observations(coords, lattice_coords, lattice_labels) -> PartitionAssignment:
    """Give every observation the label of its nearest labelled lattice point."""
    lattice_coords = np.asarray(lattice_coords, dtype=float).reshape(-1, 2)
    lattice_labels = np.asarray(lattice_labels, dtype=np.intp).ravel()
    labels = lattice_labels[nearest_index(coords, lattice_coords)]
    return PartitionAssignment(labels, lattice_coords, lattice_labels)


# --------------------------------------------------------------------------
# estimator


class SpatialPartitioner(ClusterMixin, BaseEstimator):
    """Partition a spatial domain into ``n_partitions`` contiguous subregions.

    ``X`` passed to :meth:`fit` holds the two coordinates in its first
    columns followed by covariates; ``y`` holds the responses.

    Attributes set by ``fit``: ``labels_``, ``lattice_`` (the occupied
    lattice aggregate), ``graph_``, ``clusters_``, ``partition_``,
    ``glm_``.
    """

    def __init__(self, n_partitions=9, lattice_size=400, family="poisson",
                 criterion="residual", bounds=None):
        self.n_partitions = n_partitions
        self.lattice_size = lattice_size
        self.family = family
        self.criterion = criterion
        self.bounds = bounds

    def fit(self, X, y=None):
        from .estimator import split_design  # shared validation helper

        coords, covariates = split_design(X)
        if y is None:
            raise ValidationError("SpatialPartitioner.fit needs the responses y")
        bounds = Bounds(*self.bounds) if self.bounds is not None else Bounds.from_coords(coords)
        data = SpatialDataset(coords, y, covariates, Family.parse(self.family), bounds)
        self.partition_ = partition_dataset(data, self.n_partitions, self.lattice_size,
                                            criterion=self.criterion)
        self.labels_ = self.partition_.labels
        return self

    def predict(self, X):
        check_is_fitted(self, "partition_")
        from .estimator import split_design

        coords, _ = split_design(X, allow_missing_covariates=True)
        return self.partition_.assign(coords)


def partition_dataset(data: SpatialDataset, K: int, L: int = 400, criterion: str = "residual",
                      return_details: bool = False):
    """Run the whole clustering pipeline on ``data``."""
    if criterion == "residual":
        values = fit_nonspatial_glm(data).residuals
    else:
        values = np.asarray(data.z, dtype=float)
    agg = aggregate_to_lattice(data.coords, values, L, data.bounds)
    if agg.coords.shape[0] < K:
        from .exceptions import PartitionCountExceedsData

        raise PartitionCountExceedsData(
            f"K={K} exceeds the {agg.coords.shape[0]} occupied lattice cells")
    graph = voronoi_neighbors(agg.coords)
    clusters = agglomerative_cluster(agg.values, graph, K, criterion=criterion)
    assignment = assign_observations(data.coords, agg.coords, clusters.assignment)
    if return_details:
        return assignment, agg, graph, clusters
    return assignment


def single_partition(coords) -> PartitionAssignment:
    """Every location in partition 1 (the global-basis baseline uses this)."""
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    centre = coords.mean(axis=0, keepdims=True) if coords.shape[0] else np.zeros((1, 2))
    return PartitionAssignment(np.ones(coords.shape[0], dtype=np.intp), centre,
                               np.ones(1, dtype=np.intp))
