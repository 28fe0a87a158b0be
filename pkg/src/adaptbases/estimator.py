"""scikit-learn style wrapper around clustering, sampling and prediction.

``X`` matrices follow one layout everywhere: the two coordinates first,
then the covariates.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import Bounds, Family, ModelConfig, SpatialDataset, validate_config
from .exceptions import MissingCovariates, ValidationError
from .inference import PredictiveSummary, posterior_predict
from .partition import PartitionAssignment, partition_dataset, single_partition
from .sampler import FitContext, PosteriorDraws, run_chain

BASELINE_FROZEN = ("knots", "epsilon", "delta", "tau2")


def split_design(X, n_covariates: int | None = None, allow_missing_covariates: bool = False):
    """Split ``[x, y, covariates...]`` into coordinates and covariates.

    With ``allow_missing_covariates`` a coordinates-only matrix is accepted
    and padded with zero covariates.
    """
    X = check_array(X, dtype=float, ensure_min_samples=1)
    if X.shape[1] < 2:
        raise ValidationError("X needs at least the two coordinate columns")
    coords, cov = X[:, :2], X[:, 2:]
    if n_covariates is not None and cov.shape[1] != n_covariates:
        if cov.shape[1] == 0 and allow_missing_covariates:
            cov = np.zeros((X.shape[0], n_covariates))
        else:
            raise MissingCovariates(f"expected {n_covariates} covariates, got {cov.shape[1]}")
    return coords, cov


def baseline_config(cfg: ModelConfig) -> ModelConfig:
    """The fixed-bisquare comparison model: one partition, no adaptive bases."""
    return cfg.replace(K=1, frozen=tuple(sorted(set(cfg.frozen) | set(BASELINE_FROZEN))),
                       coeff_proposal_sd=cfg.coeff_proposal_sd[:1])


def fit_model(data: SpatialDataset, cfg: ModelConfig, adaptive: bool = True,
              partition: PartitionAssignment | None = None, threads: int = 1):
    """Cluster (unless ``partition`` is given), build bases and run the chain.

    Returns ``(context, draws)``. ``adaptive=False`` fits the baseline.
    """
    if not adaptive:
        cfg = baseline_config(cfg)
        partition = single_partition(data.coords)
    validate_config(cfg, data)
    if partition is None:
        partition = partition_dataset(data, cfg.K, cfg.lattice_size)
    ctx = FitContext.build(data, partition, cfg, adaptive=adaptive)
    return ctx, run_chain(ctx, threads=threads)


class AdaptiveBasisSGLMM(RegressorMixin, BaseEstimator):
    """Partitioned adaptive-basis SGLMM fitted by reversible-jump MCMC.

    ``predict`` returns the posterior mean response (intensity or
    probability); :meth:`predict_summary` gives the full summary.
    ``adaptive=False`` fits the fixed global-basis baseline instead.
    Parameters left at ``None`` take their value from ``config`` (or the
    :class:`ModelConfig` defaults).
    """

    def __init__(self, family="poisson", n_partitions=None, adaptive=True, iterations=None,
                 burn_in=None, thin=None, random_state=None, n_threads=1, lam=None,
                 variance_prior_convention=None, shared_beta=None, bounds=None, config=None):
        self.family = family
        self.n_partitions = n_partitions
        self.adaptive = adaptive
        self.iterations = iterations
        self.burn_in = burn_in
        self.thin = thin
        self.random_state = random_state
        self.n_threads = n_threads
        self.lam = lam
        self.variance_prior_convention = variance_prior_convention
        self.shared_beta = shared_beta
        self.bounds = bounds
        self.config = config

    def _make_config(self) -> ModelConfig:
        base = self.config if self.config is not None else ModelConfig()
        changes = {"family": Family.parse(self.family)}
        for name, field in (("n_partitions", "K"), ("iterations", "iterations"),
                            ("burn_in", "burn_in"), ("thin", "thin"), ("random_state", "seed"),
                            ("lam", "lam"), ("shared_beta", "shared_beta"),
                            ("variance_prior_convention", "variance_prior_convention")):
            value = getattr(self, name)
            if value is not None:
                changes[field] = value
        return base.replace(**changes)

    def fit(self, X, y):
        coords, cov = split_design(X)
        y = check_array(np.asarray(y, dtype=float).reshape(-1, 1)).ravel()
        cfg = self._make_config()
        bounds = Bounds(*self.bounds) if self.bounds is not None else Bounds.from_coords(coords)
        data = SpatialDataset(coords, y, cov, cfg.family, bounds)
        self.context_, self.draws_ = fit_model(data, cfg, adaptive=self.adaptive,
                                               threads=self.n_threads)
        self.config_ = self.context_.cfg
        self.partition_ = self.context_.partition
        self.bases_ = self.context_.bases
        self.n_features_in_ = X.shape[1] if hasattr(X, "shape") else coords.shape[1] + cov.shape[1]
        return self

    def predict_summary(self, X, level: float | None = 0.9) -> PredictiveSummary:
        check_is_fitted(self, "draws_")
        coords, cov = split_design(X, self.draws_.p)
        return posterior_predict(self.draws_, coords, cov, level=level)

    def predict(self, X):
        return self.predict_summary(X, level=None).resp_mean

    def predict_eta(self, X):
        return self.predict_summary(X, level=None).eta_mean

    @property
    def posterior_(self) -> PosteriorDraws:
        check_is_fitted(self, "draws_")
        return self.draws_
