"""Posterior prediction, gridded surfaces and hold-out metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit
from scipy.stats import rankdata

from .basis import global_basis_matrix
from .core import Bounds, Family
from .exceptions import (
    DegenerateLabels,
    DimensionMismatch,
    EmptyDraws,
    LengthMismatch,
    MissingCovariates,
    ValidationError,
)
from .sampler import PosteriorDraws, design_matrix

# cap on the number of (draw, location) cells evaluated at once
_CHUNK_CELLS = 4_000_000


@dataclass(frozen=True, eq=False)
class PredictiveSummary:
    """Per-location posterior summaries of the linear predictor and the mean response."""

    locations: np.ndarray
    eta_mean: np.ndarray
    eta_sd: np.ndarray
    resp_mean: np.ndarray
    resp_sd: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    level: float | None = None

    def __len__(self):
        return self.locations.shape[0]


def _sd(a: np.ndarray) -> np.ndarray:
    if a.shape[0] < 2:
        return np.zeros(a.shape[1])
    return a.std(axis=0, ddof=1)


def predictive_eta_draws(draws: PosteriorDraws, new_locs, X_new=None, partition_map=None,
                         bases=None) -> np.ndarray:
    """``(S, M)`` matrix of linear-predictor draws at ``new_locs``."""
    if len(draws) == 0:
        raise EmptyDraws("no retained posterior draws")
    locs = np.asarray(new_locs, dtype=float).reshape(-1, 2)
    M = locs.shape[0]
    partition_map = partition_map or draws.partition
    bases = bases or draws.bases
    p = draws.p
    if X_new is None:
        if p > 0:
            raise MissingCovariates(f"model has {p} covariates but none were supplied")
        X_new = np.zeros((M, 0))
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim == 1:
        X_new = X_new.reshape(M, -1) if M else X_new.reshape(0, p)
    if X_new.shape != (M, p):
        raise MissingCovariates(f"covariates have shape {X_new.shape}, expected ({M}, {p})")
    A = design_matrix(X_new, draws.cfg.fit_intercept)
    H = global_basis_matrix(locs, bases.layers)
    labels = partition_map.assign(locs) if M else np.zeros(0, dtype=np.intp)
    index = {lab: i for i, lab in enumerate(bases.labels)}
    unknown = set(np.unique(labels).tolist()) - set(index)
    if unknown:
        raise ValidationError(f"prediction locations fall in partitions {sorted(unknown)} with no fitted state")
    groups = [(i, np.flatnonzero(labels == lab)) for lab, i in index.items()]
    D2 = [cdist(locs[rows], bases.candidates[i], "sqeuclidean") for i, rows in groups]

    S = len(draws)
    out = np.empty((S, M))
    for s, state in enumerate(draws.states):
        if state.gamma.shape[0] != H.shape[1]:
            raise DimensionMismatch("draw gamma does not match the global basis")
        eta = H @ state.gamma if H.shape[1] else np.zeros(M)
        for (i, rows), d2 in zip(groups, D2):
            if rows.size == 0:
                continue
            part = state.partitions[i]
            eta[rows] += A[rows] @ part.beta
            if part.r:
                eta[rows] += np.exp(-part.epsilon * d2[:, list(part.knots)]) @ part.delta
        out[s] = eta
    return out


def summarize_draws(eta_draws: np.ndarray, family: Family, locations=None,
                    level: float | None = 0.9) -> PredictiveSummary:
    eta_draws = np.atleast_2d(np.asarray(eta_draws, dtype=float))
    if eta_draws.shape[0] == 0:
        raise EmptyDraws("no retained posterior draws")
    resp = np.exp(eta_draws) if Family.parse(family) is Family.POISSON else expit(eta_draws)
    lo = hi = None
    if level is not None:
        if not 0 < level < 1:
            raise ValidationError(f"interval level must be in (0, 1), got {level}")
        lo, hi = np.quantile(eta_draws, [(1 - level) / 2, (1 + level) / 2], axis=0)
    if locations is None:
        locations = np.zeros((eta_draws.shape[1], 2))
    return PredictiveSummary(np.asarray(locations, dtype=float).reshape(-1, 2),
                             eta_draws.mean(axis=0), _sd(eta_draws), resp.mean(axis=0), _sd(resp),
                             lo, hi, level)


def posterior_predict(draws: PosteriorDraws, new_locs, X_new=None, partition_map=None, bases=None,
                      level: float | None = 0.9) -> PredictiveSummary:
    """Summaries of ``eta(s*)`` over the retained draws, each evaluated with its own knots.

    Locations go to the partition of their nearest labelled lattice point.
    """
    locs = np.asarray(new_locs, dtype=float).reshape(-1, 2)
    M = locs.shape[0]
    S = max(len(draws), 1)
    step = max(1, _CHUNK_CELLS // S)
    if X_new is not None:
        X_new = np.asarray(X_new, dtype=float).reshape(M, -1)
    parts = []
    for start in range(0, max(M, 1), step):
        sl = slice(start, min(start + step, M))
        xs = X_new[sl] if X_new is not None else None
        eta = predictive_eta_draws(draws, locs[sl], xs, partition_map, bases)
        parts.append(summarize_draws(eta, draws.family, locs[sl], level))
    if len(parts) == 1:
        return parts[0]

    def cat(name):
        vals = [getattr(p, name) for p in parts]
        return None if vals[0] is None else np.concatenate(vals)

    return PredictiveSummary(locs, cat("eta_mean"), cat("eta_sd"), cat("resp_mean"), cat("resp_sd"),
                             cat("lower"), cat("upper"), level)


def rcvmspe(predicted, observed) -> float:
    """Root mean squared prediction error ``sqrt(mean((Z - Zhat)^2))``."""
    predicted = np.asarray(predicted, dtype=float).ravel()
    observed = np.asarray(observed, dtype=float).ravel()
    if predicted.shape != observed.shape or predicted.size == 0:
        raise LengthMismatch(f"need equal nonzero lengths, got {predicted.size} and {observed.size}")
    return float(np.sqrt(np.mean((observed - predicted) ** 2)))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(positive score > negative score), ties count one half."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise LengthMismatch(f"{scores.size} scores for {labels.size} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise DegenerateLabels("labels must be binary")
    pos = labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise DegenerateLabels("need at least one positive and one negative label")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def interval_coverage(summary: PredictiveSummary, truth) -> float:
    """Fraction of true values inside the summary's intervals."""
    if summary.lower is None:
        raise ValidationError("summary has no intervals")
    truth = np.asarray(truth, dtype=float).ravel()
    if truth.shape != summary.lower.shape:
        raise LengthMismatch(f"{truth.size} true values for {summary.lower.size} intervals")
    return float(np.mean((truth >= summary.lower) & (truth <= summary.upper)))


@dataclass(frozen=True)
class GridSpec:
    """``nx x ny`` cell-centred rectangular grid over ``bounds``."""

    nx: int
    ny: int
    bounds: Bounds

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValidationError("grid needs at least one cell in each direction")
        if not isinstance(self.bounds, Bounds):
            object.__setattr__(self, "bounds", Bounds(*self.bounds))

    def points(self) -> np.ndarray:
        b = self.bounds
        xs = b.xmin + (np.arange(self.nx) + 0.5) * (b.xmax - b.xmin) / self.nx
        ys = b.ymin + (np.arange(self.ny) + 0.5) * (b.ymax - b.ymin) / self.ny
        gx, gy = np.meshgrid(xs, ys, indexing="xy")
        return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass(frozen=True, eq=False)
class SurfaceSummary:
    grid: GridSpec
    points: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    resp_mean: np.ndarray
    resp_sd: np.ndarray

    def as_grid(self, values: np.ndarray) -> np.ndarray:
        """Reshape a per-point field to ``(ny, nx)`` with rows running along y."""
        return np.asarray(values).reshape(self.grid.ny, self.grid.nx)


def surface_summary(draws: PosteriorDraws, grid: GridSpec, covariates=None) -> SurfaceSummary:
    """Posterior mean and sd surfaces on link and response scales.

    Covariates are held at ``covariates`` (zeros by default) so the surface
    shows the intercept plus spatial effects.
    """
    pts = grid.points()
    p = draws.p
    if covariates is None:
        X = np.zeros((pts.shape[0], p))
    else:
        cov = np.asarray(covariates, dtype=float).ravel()
        if cov.size != p:
            raise MissingCovariates(f"need {p} covariate values for the surface, got {cov.size}")
        X = np.tile(cov, (pts.shape[0], 1))
    s = posterior_predict(draws, pts, X, level=None)
    return SurfaceSummary(grid, pts, s.eta_mean, s.eta_sd, s.resp_mean, s.resp_sd)
