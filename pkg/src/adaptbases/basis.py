"""Gaussian radial bases for the adaptive part and bisquare bases for the global part."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .core import Bounds
from .exceptions import EmptyPartition, ValidationError


def gaussian_rbf(s, u, eps: float):
    """``exp(-eps * ||s - u||^2)`` for a pair of points (or broadcastable arrays)."""
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    sq = np.sum((s - u) ** 2, axis=-1)
    out = np.exp(-eps * sq)
    return float(out) if np.ndim(out) == 0 else out


def adaptive_basis_matrix(locs, knots, eps: float) -> np.ndarray:
    """``N x r`` matrix of Gaussian bases; column ``m`` belongs to ``knots[m]``."""
    locs = np.asarray(locs, dtype=float).reshape(-1, 2)
    knots = np.asarray(knots, dtype=float).reshape(-1, 2)
    if knots.shape[0] == 0:
        return np.zeros((locs.shape[0], 0))
    return np.exp(-eps * cdist(locs, knots, "sqeuclidean"))


def bisquare(s, u, gamma: float):
    """Compactly supported bisquare ``(1 - (d/gamma)^2)^2`` for ``d < gamma``, else 0."""
    if not gamma > 0:
        raise ValidationError(f"bisquare bandwidth must be > 0, got {gamma}")
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    d = np.sqrt(np.sum((s - u) ** 2, axis=-1))
    out = _bisquare_of_distance(d, gamma)
    return float(out) if np.ndim(out) == 0 else out


def _bisquare_of_distance(d, gamma):
    t = np.asarray(d) / gamma
    return np.where(t < 1.0, (1.0 - t * t) ** 2, 0.0)


@dataclass(frozen=True, eq=False)
class BisquareLayerSpec:
    """One resolution of the global basis: knot centres and shared bandwidth."""

    resolution: int
    knots: np.ndarray
    gamma: float

    @classmethod
    def regular(cls, resolution: int, n_knots: int, bounds: Bounds,
                bandwidth_factor: float = 1.5) -> "BisquareLayerSpec":
        """Cell-centred ``sqrt(n) x sqrt(n)`` grid over ``bounds``.

        Cell centres of nested quad-tree refinements never coincide, so the
        layers do not share knots.
        """
        side = math.isqrt(n_knots)
        if side * side != n_knots or side < 1:
            raise ValidationError(f"layer knot count {n_knots} is not a perfect square")
        knots = _cell_centres(bounds, side, side)
        if n_knots > 1:
            d = cdist(knots, knots)
            np.fill_diagonal(d, np.inf)
            spacing = float(d.min())
        else:
            spacing = max(bounds.xmax - bounds.xmin, bounds.ymax - bounds.ymin)
        knots.setflags(write=False)
        return cls(resolution, knots, bandwidth_factor * spacing)

    @property
    def n_knots(self) -> int:
        return self.knots.shape[0]


def default_layers(bounds: Bounds, resolutions: Sequence[int] = (4, 16, 64)) -> list[BisquareLayerSpec]:
    return [BisquareLayerSpec.regular(i + 1, n, bounds) for i, n in enumerate(resolutions)]


def global_basis_matrix(locs, layers: Sequence[BisquareLayerSpec]) -> np.ndarray:
    """``N x G`` bisquare matrix, columns ordered layer by layer."""
    locs = np.asarray(locs, dtype=float).reshape(-1, 2)
    if not layers:
        return np.zeros((locs.shape[0], 0))
    blocks = [_bisquare_of_distance(cdist(locs, layer.knots), layer.gamma) for layer in layers]
    return np.hstack(blocks)


def _cell_centres(bounds: Bounds, nx: int, ny: int) -> np.ndarray:
    xs = bounds.xmin + (np.arange(nx) + 0.5) * (bounds.xmax - bounds.xmin) / nx
    ys = bounds.ymin + (np.arange(ny) + 0.5) * (bounds.ymax - bounds.ymin) / ny
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass(frozen=True, eq=False)
class CandidateKnotGrid:
    partition: int
    knots: np.ndarray

    @property
    def R(self) -> int:
        return self.knots.shape[0]


def candidate_knot_grid(coords, labels, k: int, target_R: int = 25) -> CandidateKnotGrid:
    """Equidistant candidate knots for partition ``k``.

    A ``ceil(sqrt(R)) x ceil(sqrt(R))`` cell-centred grid is laid over the
    bounding box of the partition's observations; a grid point is kept when
    its nearest observation (over all partitions) belongs to ``k``.
    """
    if target_R < 1:
        raise ValidationError("target_R must be >= 1")
    coords = np.asarray(coords, dtype=float)
    labels = np.asarray(labels)
    mine = labels == k
    if not np.any(mine):
        raise EmptyPartition(f"partition {k} has no observations")
    pts = coords[mine]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    side = math.ceil(math.sqrt(target_R))
    if np.any(hi <= lo):
        # degenerate extent (one point or a line): widen symmetrically
        span = np.where(hi > lo, hi - lo, 1e-6)
        lo, hi = lo - np.where(hi > lo, 0, span / 2), hi + np.where(hi > lo, 0, span / 2)
    grid = _cell_centres(Bounds(lo[0], hi[0], lo[1], hi[1]), side, side)
    nearest = nearest_index(grid, coords)
    keep = labels[nearest] == k
    if not np.any(keep):
        raise EmptyPartition(f"no candidate knot of partition {k} lies nearest to its own data")
    knots = grid[keep]
    knots.setflags(write=False)
    return CandidateKnotGrid(k, knots)


def nearest_index(points, targets, chunk: int = 2048) -> np.ndarray:
    """Index of the nearest target for each point; ties go to the lowest index."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    targets = np.asarray(targets, dtype=float).reshape(-1, 2)
    out = np.empty(points.shape[0], dtype=np.intp)
    for start in range(0, points.shape[0], chunk):
        d = cdist(points[start:start + chunk], targets, "sqeuclidean")
        out[start:start + chunk] = np.argmin(d, axis=1)
    return out
