"""Reversible-jump MCMC for the partitioned adaptive-basis SGLMM.

One iteration, for every partition ``k`` given the global coefficients:

1. random-walk Metropolis updates of ``beta_k``, ``epsilon_k`` and (when
   enabled) the basis coefficients ``delta_k``;
2. a random-walk Metropolis update of the global coefficients ``gamma``
   (and of a shared ``beta`` when configured), which is a synchronisation
   point across partitions;
3. conjugate inverse-gamma draws of ``rho2`` and each ``tau2_k``;
4. one birth / death / move proposal on each partition's knot set.

Partition workers own independent random streams derived from the master
seed, so results are identical whether partitions run sequentially or on a
thread pool.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist
from scipy.special import gammaln, log_expit

from .basis import (
    BisquareLayerSpec,
    adaptive_basis_matrix,
    candidate_knot_grid,
    default_layers,
    global_basis_matrix,
)
from .core import (
    Bounds,
    Family,
    ModelConfig,
    ModelState,
    PartitionState,
    SpatialDataset,
    as_generator,
    substreams,
)
from .exceptions import (
    DimensionMismatch,
    EmptyPartition,
    FamilyMismatch,
    InvalidProposal,
    NonFiniteLogPosterior,
    OutOfRange,
    SeparationOrDivergence,
    ValidationError,
)
from .partition import PartitionAssignment, fit_nonspatial_glm

LOG_2PI = math.log(2.0 * math.pi)
BIRTH, DEATH, MOVE = "birth", "death", "move"


def log_normal_pdf(x, var: float):
    return -0.5 * (LOG_2PI + math.log(var) + np.square(x) / var)


# --------------------------------------------------------------------------
# likelihood and predictor


def log_likelihood(data: SpatialDataset | np.ndarray, eta, family: Family | str | None = None) -> float:
    """Full log-likelihood of the responses given the linear predictor.

    ``data`` may be a :class:`SpatialDataset` or a plain response vector, in
    which case ``family`` is required.
    """
    if isinstance(data, SpatialDataset):
        z = data.z
        fam = data.family
        if family is not None and Family.parse(family) is not fam:
            raise FamilyMismatch(f"dataset family is {fam.value}, got {family}")
    else:
        if family is None:
            raise FamilyMismatch("family is required when passing a bare response vector")
        z = np.asarray(data, dtype=float)
        fam = Family.parse(family)
    eta = np.asarray(eta, dtype=float)
    if eta.shape != z.shape:
        raise DimensionMismatch(f"eta has shape {eta.shape}, responses {z.shape}")
    const = -float(gammaln(z + 1.0).sum()) if fam is Family.POISSON else 0.0
    return _loglik_kernel(z, eta, fam) + const


def _loglik_kernel(z, eta, family) -> float:
    """Log-likelihood without the Poisson ``-log z!`` constant."""
    if family is Family.POISSON:
        return float(np.dot(z, eta) - np.exp(eta).sum())
    # z*eta - log(1 + e^eta) == (z-1)*eta + log_expit(eta), stable for large |eta|
    return float(np.dot(z - 1.0, eta) + log_expit(eta).sum())


def _loglik_terms(z, eta, family) -> np.ndarray:
    if family is Family.POISSON:
        return z * eta - np.exp(eta)
    return (z - 1.0) * eta + log_expit(eta)


def design_matrix(X, fit_intercept: bool = True) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if X.size else np.zeros((0, 0))
    if fit_intercept:
        return np.column_stack([np.ones(X.shape[0]), X])
    return X


# --------------------------------------------------------------------------
# bases and fit context


@dataclass(frozen=True, eq=False)
class ModelBases:
    """Candidate knot grids per partition plus the global bisquare layers.

    ``labels[i]`` is the partition label whose state sits at
    ``ModelState.partitions[i]``.
    """

    labels: tuple[int, ...]
    candidates: tuple[np.ndarray, ...]
    layers: tuple[BisquareLayerSpec, ...]
    domain: Bounds | None = None

    @property
    def R(self) -> tuple[int, ...]:
        return tuple(c.shape[0] for c in self.candidates)

    @property
    def G(self) -> int:
        return sum(layer.n_knots for layer in self.layers)


def build_bases(data: SpatialDataset, partition: PartitionAssignment, cfg: ModelConfig,
                adaptive: bool = True) -> ModelBases:
    """Candidate grids for every occupied partition and the global layers.

    When filtering leaves no candidate for a partition, the grid is refined
    (4x the points) up to three times before giving up.
    """
    labels = np.asarray(partition.labels)
    present = tuple(int(v) for v in np.unique(labels))
    cands = []
    for lab in present:
        if not adaptive:
            cands.append(np.zeros((0, 2)))
            continue
        target = cfg.candidate_grid_per_partition
        for attempt in range(4):
            try:
                grid = candidate_knot_grid(data.coords, labels, lab, target)
                break
            except EmptyPartition:
                if attempt == 3:
                    raise
                target *= 4
        cands.append(grid.knots)
    bounds = Bounds(*cfg.domain) if cfg.domain is not None else data.bounds
    layers = tuple(default_layers(bounds, cfg.global_basis_resolutions))
    return ModelBases(present, tuple(cands), layers, bounds)


@dataclass(frozen=True, eq=False)
class FitContext:
    """Everything the sampler conditions on: data, partition, bases, config."""

    data: SpatialDataset
    partition: PartitionAssignment
    bases: ModelBases
    cfg: ModelConfig

    @classmethod
    def build(cls, data, partition, cfg, bases=None, adaptive=True) -> "FitContext":
        if bases is None:
            bases = build_bases(data, partition, cfg, adaptive=adaptive)
        return cls(data, partition, bases, cfg)


def linear_predictor(state: ModelState, ctx: FitContext) -> np.ndarray:
    """``X beta_k + Phi_k delta_k + H gamma`` for every observation, in data order."""
    data, bases, cfg = ctx.data, ctx.bases, ctx.cfg
    A = design_matrix(data.X, cfg.fit_intercept)
    if state.K != len(bases.labels):
        raise DimensionMismatch(f"state has {state.K} partitions, bases {len(bases.labels)}")
    H = global_basis_matrix(data.coords, bases.layers)
    if state.gamma.shape[0] != H.shape[1]:
        raise DimensionMismatch(f"gamma has length {state.gamma.shape[0]}, expected {H.shape[1]}")
    eta = H @ state.gamma if H.shape[1] else np.zeros(data.n)
    labels = np.asarray(ctx.partition.labels)
    for i, lab in enumerate(bases.labels):
        part = state.partitions[i]
        rows = labels == lab
        if part.beta.shape[0] != A.shape[1]:
            raise DimensionMismatch(f"beta has length {part.beta.shape[0]}, expected {A.shape[1]}")
        eta[rows] += A[rows] @ part.beta
        if part.r:
            knots = bases.candidates[i][list(part.knots)]
            eta[rows] += adaptive_basis_matrix(data.coords[rows], knots, part.epsilon) @ part.delta
    return eta


# --------------------------------------------------------------------------
# priors and move bookkeeping


def truncated_poisson_log_prior_ratio(r: int, r_new: int, lam: float, R: int) -> float:
    """``log p(r_new) - log p(r)`` under Poisson(lam) truncated to ``0..R``."""
    if not (0 <= r <= R and 0 <= r_new <= R):
        raise OutOfRange(f"knot counts ({r}, {r_new}) outside 0..{R}")
    return (r_new - r) * math.log(lam) + math.lgamma(r + 1) - math.lgamma(r_new + 1)


@dataclass(frozen=True)
class MoveProbabilities:
    """Birth/death/move probabilities at knot count ``r`` out of ``R`` candidates."""

    R: int

    def __call__(self, r: int) -> tuple[float, float, float]:
        R = self.R
        if not 0 <= r <= R:
            raise OutOfRange(f"r={r} outside 0..{R}")
        if R == 0:
            return (0.0, 0.0, 0.0)
        if r == 0:
            return (1.0, 0.0, 0.0)
        if r == R:
            return (0.0, 1.0, 0.0)
        return (1 / 3, 1 / 3, 1 / 3)

    def birth(self, r: int) -> float:
        return self(r)[0]

    def death(self, r: int) -> float:
        return self(r)[1]

    def move(self, r: int) -> float:
        return self(r)[2]


@dataclass(frozen=True)
class KnotProposal:
    """A proposed change to one partition's knot set.

    ``added`` is a candidate-grid index (birth, move); ``removed`` is the
    position ``J`` in the current knot list (death, move). ``log_forward``
    is the log density of every random choice made to build the proposal.
    """

    move: str
    partition: int
    added: int | None = None
    removed: int | None = None
    delta_new: float | None = None
    log_forward: float = 0.0


def draw_knot_proposal(k: int, knots: Sequence[int], R: int, sigma: float,
                       rng: np.random.Generator) -> KnotProposal | None:
    r = len(knots)
    b, d, m = MoveProbabilities(R)(r)
    if R == 0:
        return None
    u = rng.random()
    if u < b:
        move, pmove = BIRTH, b
    elif u < b + d:
        move, pmove = DEATH, d
    else:
        move, pmove = MOVE, m
    logf = math.log(pmove)
    added = removed = delta_new = None
    if move in (DEATH, MOVE):
        removed = int(rng.integers(r))
        logf -= math.log(r)
    if move in (BIRTH, MOVE):
        occupied = set(knots)
        vacant = [j for j in range(R) if j not in occupied]
        added = vacant[int(rng.integers(len(vacant)))]
        delta_new = float(rng.normal(0.0, sigma))
        logf += -math.log(len(vacant)) + float(log_normal_pdf(delta_new, sigma * sigma))
    return KnotProposal(move, k, added, removed, delta_new, logf)


def knot_log_ratio_components(move: str, r: int, R: int, lam: float, tau2: float, sigma: float,
                              delta_new: float | None = None, delta_old: float | None = None,
                              normalize_coefficient_prior: bool = False) -> tuple[float, float]:
    """Log prior ratio and log proposal ratio of a knot move (Jacobian is 1).

    Birth from ``r``: prior ``p(r+1)/p(r) * (r+1)/(R-r) * N(d*; 0, tau2) / N(0; 0, tau2)``
    and proposal ``d_{r+1} (R-r) / (b_r (r+1)) / N(d*; 0, sigma^2)``. Death is the
    exact inverse of the matching birth; a move swaps one coefficient for
    another. The move-type probabilities make the boundary cases come out as
    ``R/(3 N(d*))`` at ``r = 0`` and ``R N(d_J)/3`` at ``r = R``.

    With ``normalize_coefficient_prior`` the ``N(0; 0, tau2)`` factor is
    dropped so that the coefficient prior is a proper density.
    """
    probs = MoveProbabilities(R)
    s2 = sigma * sigma
    log_n0 = 0.0 if normalize_coefficient_prior else float(log_normal_pdf(0.0, tau2))
    if move == BIRTH:
        if not 0 <= r < R:
            raise InvalidProposal(f"birth needs r < R, got r={r}, R={R}")
        lp = (truncated_poisson_log_prior_ratio(r, r + 1, lam, R)
              + math.log((r + 1) / (R - r))
              + float(log_normal_pdf(delta_new, tau2)) - log_n0)
        lq = (math.log(probs.death(r + 1) / probs.birth(r))
              + math.log((R - r) / (r + 1))
              - float(log_normal_pdf(delta_new, s2)))
    elif move == DEATH:
        if not 0 < r <= R:
            raise InvalidProposal(f"death needs r > 0, got r={r}")
        lp = (truncated_poisson_log_prior_ratio(r, r - 1, lam, R)
              + math.log((R - r + 1) / r)
              + log_n0 - float(log_normal_pdf(delta_old, tau2)))
        lq = (math.log(probs.birth(r - 1) / probs.death(r))
              + math.log(r / (R - r + 1))
              + float(log_normal_pdf(delta_old, s2)))
    elif move == MOVE:
        if not 0 < r < R:
            raise InvalidProposal(f"move needs 0 < r < R, got r={r}, R={R}")
        lp = float(log_normal_pdf(delta_new, tau2)) - float(log_normal_pdf(delta_old, tau2))
        lq = float(log_normal_pdf(delta_old, s2)) - float(log_normal_pdf(delta_new, s2))
    else:
        raise InvalidProposal(f"unknown move type {move!r}")
    return lp, lq


def variance_posterior(coeffs, prior: tuple[float, float],
                       convention: str = "shape_scale") -> tuple[float, float]:
    """Shape and scale of the inverse-gamma full conditional of a coefficient variance.

    ``convention="precision_gamma"`` reads ``prior`` as a gamma on the
    precision with (shape, scale), i.e. an inverse gamma with scale ``1/b``.
    """
    a, b = prior
    if convention == "precision_gamma":
        b = 1.0 / b
    elif convention != "shape_scale":
        raise ValidationError(f"unknown variance prior convention {convention!r}")
    coeffs = np.asarray(coeffs, dtype=float)
    return a + coeffs.size / 2.0, b + float(np.dot(coeffs, coeffs)) / 2.0


def gibbs_update_variance(coeffs, prior: tuple[float, float], rng=None,
                          convention: str = "shape_scale") -> float:
    """Draw from ``IG(a + n/2, b + ||coeffs||^2 / 2)``."""
    rng = as_generator(rng)
    shape, scale = variance_posterior(coeffs, prior, convention)
    return float(scale / rng.gamma(shape))


def random_walk_step(x, log_target: Callable[[np.ndarray], float], chol, rng,
                     current: float | None = None):
    """One Gaussian random-walk Metropolis step ``x + chol @ z``.

    Returns ``(new_x, new_log_target, accepted)``.
    """
    x = np.asarray(x, dtype=float)
    if current is None:
        current = log_target(x)
    chol = np.atleast_2d(chol)
    prop = x + chol @ rng.standard_normal(x.shape[0])
    lp = log_target(prop)
    if math.log(rng.random()) < lp - current:
        return prop, lp, True
    return x, current, False


def _mh_accept(log_ratio: float, rng) -> bool:
    u = rng.random()
    return bool(math.log(u) < log_ratio) if u > 0 else True


def _cov_factor(precision: np.ndarray) -> np.ndarray:
    """Lower factor ``L`` with ``L L^T = precision^{-1}``."""
    d = precision.shape[0]
    if d == 0:
        return np.zeros((0, 0))
    c = linalg.cholesky(precision, lower=True)
    return linalg.solve_triangular(c, np.eye(d), lower=True).T


# --------------------------------------------------------------------------
# engine


class _PartitionWorker:
    """Mutable per-partition sampler state with cached basis columns."""

    def __init__(self, chain: "_Chain", i: int, sl: slice, rng: np.random.Generator,
                 part: PartitionState):
        self.chain = chain
        self.i = i
        self.sl = sl
        self.rng = rng
        self.z = chain.z[sl]
        self.A = chain.A[sl]
        self.w0 = chain.w0[sl]
        self.D2 = chain.D2[i]
        self.R = self.D2.shape[1]
        self.xb = chain.xb[sl]
        self.phid = chain.phid[sl]
        self.hg = chain.hg[sl]
        cfg = chain.cfg
        self.sigma = cfg.proposal_sd_for(i)
        self.scale = {"beta": cfg.rw_proposal_sds[0], "epsilon": cfg.rw_proposal_sds[1],
                      "delta": cfg.rw_proposal_sds[3]}
        self.counts = {key: [0, 0] for key in ("beta", "epsilon", "delta", BIRTH, DEATH, MOVE)}
        self.window = {key: [0, 0] for key in ("beta", "epsilon", "delta")}
        self.beta_factor = chain.beta_factors[i]
        self.set_state(part)

    # state -----------------------------------------------------------------
    def set_state(self, part: PartitionState):
        self.beta = np.array(part.beta, dtype=float)
        self.knots = list(part.knots)
        self.delta = np.array(part.delta, dtype=float)
        self.eps = part.epsilon
        self.tau2 = part.tau2
        if self.knots and max(self.knots) >= self.R:
            raise DimensionMismatch(f"knot index beyond the {self.R} candidates")
        self.Phi = self._columns(self.knots, self.eps)
        self.xb[:] = self.A @ self.beta
        self.phid[:] = self.Phi @ self.delta if self.knots else 0.0

    def snapshot(self) -> PartitionState:
        return PartitionState(self.beta.copy(), tuple(self.knots), self.delta.copy(),
                              self.eps, self.tau2)

    def _columns(self, knots, eps) -> np.ndarray:
        if not knots:
            return np.zeros((self.z.shape[0], 0))
        return np.exp(-eps * self.D2[:, knots])

    def loglik(self, eta=None) -> float:
        if eta is None:
            eta = self.xb + self.phid + self.hg
        return _loglik_kernel(self.z, eta, self.chain.family) + self.chain.const[self.i]

    def refresh_loglik(self):
        self.ll = self.loglik()

    def _record(self, key, accepted):
        c = self.counts[key]
        c[1] += 1
        c[0] += accepted
        if key in self.window:
            w = self.window[key]
            w[1] += 1
            w[0] += accepted

    # within-model updates -----------------------------------------------
    def update_beta(self, rng=None):
        rng = rng or self.rng
        d = self.beta.shape[0]
        if d == 0:
            return
        step = (self.scale["beta"] / math.sqrt(d)) * (self.beta_factor @ rng.standard_normal(d))
        prop = self.beta + step
        xb_new = self.A @ prop
        ll_new = self.loglik(xb_new + self.phid + self.hg)
        v = self.chain.cfg.beta_prior_variance
        lr = ll_new - self.ll - 0.5 * (np.dot(prop, prop) - np.dot(self.beta, self.beta)) / v
        acc = _mh_accept(lr, rng)
        if acc:
            self.beta = prop
            self.xb[:] = xb_new
            self.ll = ll_new
        self._record("beta", acc)

    def update_epsilon(self, rng=None):
        rng = rng or self.rng
        lo, hi = self.chain.cfg.epsilon_prior
        prop = self.eps + self.scale["epsilon"] * rng.standard_normal()
        u = rng.random()
        if not lo < prop < hi:
            self._record("epsilon", False)
            return
        if self.knots:
            Phi_new = self._columns(self.knots, prop)
            phid_new = Phi_new @ self.delta
            ll_new = self.loglik(self.xb + phid_new + self.hg)
        else:
            Phi_new, phid_new, ll_new = self.Phi, None, self.ll
        acc = u == 0 or math.log(u) < ll_new - self.ll
        if acc:
            self.eps = prop
            self.Phi = Phi_new
            if phid_new is not None:
                self.phid[:] = phid_new
            self.ll = ll_new
        self._record("epsilon", acc)

    def update_delta(self, rng=None):
        rng = rng or self.rng
        r = len(self.knots)
        if r == 0:
            return
        precision = (self.Phi.T * self.w0) @ self.Phi
        precision[np.diag_indices(r)] += 1.0 / self.tau2 + 1.0
        chol = linalg.cholesky(precision, lower=True, check_finite=False)
        # C^{-T} z has covariance precision^{-1}
        step = linalg.solve_triangular(chol, rng.standard_normal(r), lower=True, trans="T",
                                       check_finite=False)
        prop = self.delta + (self.scale["delta"] / math.sqrt(r)) * step
        phid_new = self.Phi @ prop
        ll_new = self.loglik(self.xb + phid_new + self.hg)
        lr = ll_new - self.ll - 0.5 * (np.dot(prop, prop) - np.dot(self.delta, self.delta)) / self.tau2
        acc = _mh_accept(lr, rng)
        if acc:
            self.delta = prop
            self.phid[:] = phid_new
            self.ll = ll_new
        self._record("delta", acc)

    def update_tau2(self, rng=None):
        rng = rng or self.rng
        cfg = self.chain.cfg
        self.tau2 = gibbs_update_variance(self.delta, cfg.tau2_prior, rng,
                                          cfg.variance_prior_convention)

    # trans-dimensional update ---------------------------------------------
    def propose(self, rng=None) -> KnotProposal | None:
        return draw_knot_proposal(self.i, self.knots, self.R, self.sigma, rng or self.rng)

    def evaluate(self, prop: KnotProposal):
        """Log acceptance ratio of ``prop`` plus the candidate state it leads to."""
        cfg = self.chain.cfg
        r = len(self.knots)
        knots = list(self.knots)
        delta = self.delta
        Phi = self.Phi
        delta_old = None
        if prop.move == BIRTH:
            if prop.added in knots:
                raise InvalidProposal("birth of an already active knot")
            col = self._columns([prop.added], self.eps)
            knots.append(prop.added)
            Phi = np.hstack([Phi, col])
            delta = np.append(delta, prop.delta_new)
        elif prop.move == DEATH:
            J = prop.removed
            if not 0 <= J < r:
                raise InvalidProposal(f"death position {J} outside 0..{r - 1}")
            delta_old = float(delta[J])
            del knots[J]
            Phi = np.delete(Phi, J, axis=1)
            delta = np.delete(delta, J)
        else:
            J = prop.removed
            if not 0 <= J < r or prop.added in knots:
                raise InvalidProposal("move needs an active knot to drop and a vacant one to add")
            delta_old = float(delta[J])
            knots[J] = prop.added
            Phi = Phi.copy()
            Phi[:, J] = self._columns([prop.added], self.eps)[:, 0]
            delta = delta.copy()
            delta[J] = prop.delta_new
        phid = Phi @ delta if knots else np.zeros_like(self.phid)
        ll_new = self.loglik(self.xb + phid + self.hg)
        lp, lq = knot_log_ratio_components(
            prop.move, r, self.R, cfg.lam, self.tau2, self.sigma, prop.delta_new, delta_old,
            cfg.normalize_coefficient_prior)
        return ll_new - self.ll + lp + lq, (knots, delta, Phi, phid, ll_new)

    def commit(self, candidate):
        knots, delta, Phi, phid, ll_new = candidate
        self.knots, self.delta, self.Phi = knots, delta, Phi
        self.phid[:] = phid
        self.ll = ll_new

    def knot_step(self, rng=None):
        rng = rng or self.rng
        prop = self.propose(rng)
        if prop is None:
            return
        log_ratio, candidate = self.evaluate(prop)
        acc = _mh_accept(log_ratio, rng)
        if acc:
            self.commit(candidate)
        self._record(prop.move, acc)

    # phases ---------------------------------------------------------------
    def phase_within(self):
        frozen = self.chain.frozen
        if not self.chain.cfg.shared_beta and "beta" not in frozen:
            self.update_beta()
        if "epsilon" not in frozen:
            self.update_epsilon()
        if self.chain.cfg.update_delta and "delta" not in frozen:
            self.update_delta()

    def phase_knots(self):
        frozen = self.chain.frozen
        if "tau2" not in frozen:
            self.update_tau2()
        if "knots" not in frozen:
            self.knot_step()

    def adapt(self):
        for key, w in self.window.items():
            if w[1] >= 20:
                rate = w[0] / w[1]
                if rate < 0.2:
                    self.scale[key] *= 0.8
                elif rate > 0.4:
                    self.scale[key] *= 1.25
                w[0] = w[1] = 0


class _Chain:
    """Sorted-by-partition data layout shared by the partition workers."""

    def __init__(self, ctx: FitContext, state: ModelState | None = None, seed: int | None = None):
        self.ctx = ctx
        data, partition, bases, cfg = ctx.data, ctx.partition, ctx.bases, ctx.cfg
        self.cfg = cfg
        self.family = data.family
        self.frozen = frozenset(cfg.frozen)
        labels = np.asarray(partition.labels)
        if labels.shape[0] != data.n:
            raise DimensionMismatch(f"{labels.shape[0]} partition labels for {data.n} observations")
        order = np.argsort(labels, kind="stable")
        self.order = order
        sorted_labels = labels[order]
        lab_arr = np.asarray(bases.labels)
        if not np.array_equal(np.unique(labels), lab_arr):
            raise DimensionMismatch("bases do not match the partition labels")
        starts = np.searchsorted(sorted_labels, lab_arr, side="left")
        ends = np.searchsorted(sorted_labels, lab_arr, side="right")
        self.starts = starts
        self.slices = [slice(int(s), int(e)) for s, e in zip(starts, ends)]
        self.K = len(self.slices)
        self.z = data.z[order].copy()
        self.A = design_matrix(data.X[order], cfg.fit_intercept)
        coords = data.coords[order]
        self.coords = coords
        self.H = global_basis_matrix(coords, bases.layers)
        if self.family is Family.POISSON:
            lz = gammaln(self.z + 1.0)
            self.const = [-float(lz[sl].sum()) for sl in self.slices]
        else:
            self.const = [0.0] * self.K
        self.D2 = [cdist(coords[sl], cand, "sqeuclidean") if cand.shape[0] else
                   np.zeros((sl.stop - sl.start, 0)) for sl, cand in zip(self.slices, bases.candidates)]

        glm_beta, mu = self._initial_glm(data, cfg)
        self.glm_beta = glm_beta
        w0 = mu if self.family is Family.POISSON else mu * (1.0 - mu)
        self.w0 = np.maximum(w0[order], 1e-6)

        p = self.A.shape[1]
        prior_prec = np.eye(p) / cfg.beta_prior_variance
        self.beta_factors = [_cov_factor((self.A[sl].T * self.w0[sl]) @ self.A[sl] + prior_prec)
                             for sl in self.slices]
        self.beta_factor_shared = _cov_factor((self.A.T * self.w0) @ self.A + prior_prec)
        G = self.H.shape[1]
        self.gamma_factor = _cov_factor((self.H.T * self.w0) @ self.H + np.eye(G)) if G else None
        self.gamma_scale = cfg.rw_proposal_sds[2]
        self.shared_beta_scale = cfg.rw_proposal_sds[0]

        self.xb = np.zeros(data.n)
        self.phid = np.zeros(data.n)
        self.hg = np.zeros(data.n)
        if state is None:
            state = self.initial_state()
        self._check_state(state)
        seed = cfg.seed if seed is None else seed
        self.master_rng, prngs = substreams(seed, self.K)
        self.workers = [_PartitionWorker(self, i, sl, prngs[i], state.partitions[i])
                        for i, sl in enumerate(self.slices)]
        self.gamma = np.array(state.gamma, dtype=float)
        self.rho2 = state.rho2
        self.hg[:] = self.H @ self.gamma if G else 0.0
        for w in self.workers:
            w.refresh_loglik()
        self.counts = {"gamma": [0, 0], "shared_beta": [0, 0]}
        self.window = {"gamma": [0, 0], "shared_beta": [0, 0]}

    def _initial_glm(self, data, cfg):
        try:
            fit = fit_nonspatial_glm(data, intercept=cfg.fit_intercept)
            return fit.coef, fit.mu
        except SeparationOrDivergence:
            p = data.p + (1 if cfg.fit_intercept else 0)
            mu = np.full(data.n, max(data.z.mean(), 1e-3) if self.family is Family.POISSON else 0.5)
            return np.zeros(p), mu

    def initial_state(self) -> ModelState:
        cfg = self.cfg
        eps0 = 0.5 * (cfg.epsilon_prior[0] + cfg.epsilon_prior[1])
        parts = tuple(PartitionState(self.glm_beta.copy(), (), np.zeros(0), eps0, 1.0)
                      for _ in range(self.K))
        return ModelState(parts, np.zeros(self.H.shape[1]), 1.0)

    def _check_state(self, state: ModelState):
        if state.K != self.K:
            raise DimensionMismatch(f"state has {state.K} partitions, model {self.K}")
        if state.gamma.shape[0] != self.H.shape[1]:
            raise DimensionMismatch(f"gamma has length {state.gamma.shape[0]}, expected {self.H.shape[1]}")
        for part in state.partitions:
            if part.beta.shape[0] != self.A.shape[1]:
                raise DimensionMismatch(
                    f"beta has length {part.beta.shape[0]}, expected {self.A.shape[1]}")

    # global blocks --------------------------------------------------------
    def _partition_logliks(self, eta) -> np.ndarray:
        terms = _loglik_terms(self.z, eta, self.family)
        return np.add.reduceat(terms, self.starts) + np.asarray(self.const)

    def _record(self, key, acc):
        for store in (self.counts, self.window):
            store[key][1] += 1
            store[key][0] += acc

    def update_gamma(self, rng=None):
        rng = rng or self.master_rng
        G = self.gamma.shape[0]
        if G == 0:
            return
        step = (self.gamma_scale / math.sqrt(G)) * (self.gamma_factor @ rng.standard_normal(G))
        prop = self.gamma + step
        hg_new = self.H @ prop
        lls = self._partition_logliks(self.xb + self.phid + hg_new)
        ll_old = sum(w.ll for w in self.workers)
        lr = float(lls.sum()) - ll_old - 0.5 * (np.dot(prop, prop) - np.dot(self.gamma, self.gamma)) / self.rho2
        acc = _mh_accept(lr, rng)
        if acc:
            self.gamma = prop
            self.hg[:] = hg_new
            for w, ll in zip(self.workers, lls):
                w.ll = float(ll)
        self._record("gamma", acc)

    def update_shared_beta(self, rng=None):
        rng = rng or self.master_rng
        beta = self.workers[0].beta
        d = beta.shape[0]
        if d == 0:
            return
        step = (self.shared_beta_scale / math.sqrt(d)) * (self.beta_factor_shared @ rng.standard_normal(d))
        prop = beta + step
        xb_new = self.A @ prop
        lls = self._partition_logliks(xb_new + self.phid + self.hg)
        ll_old = sum(w.ll for w in self.workers)
        v = self.cfg.beta_prior_variance
        lr = float(lls.sum()) - ll_old - 0.5 * (np.dot(prop, prop) - np.dot(beta, beta)) / v
        acc = _mh_accept(lr, rng)
        if acc:
            self.xb[:] = xb_new
            for w, ll in zip(self.workers, lls):
                w.beta = prop.copy()
                w.ll = float(ll)
        self._record("shared_beta", acc)

    def update_rho2(self, rng=None):
        rng = rng or self.master_rng
        if self.gamma.shape[0] == 0:
            return
        self.rho2 = gibbs_update_variance(self.gamma, self.cfg.rho2_prior, rng,
                                          self.cfg.variance_prior_convention)

    # iteration ------------------------------------------------------------
    def step(self, pool=None):
        run = (lambda fn: list(pool.map(fn, self.workers))) if pool else \
            (lambda fn: [fn(w) for w in self.workers])
        run(_PartitionWorker.phase_within)
        if "gamma" not in self.frozen:
            self.update_gamma()
        if self.cfg.shared_beta and "beta" not in self.frozen:
            self.update_shared_beta()
        if "rho2" not in self.frozen:
            self.update_rho2()
        run(_PartitionWorker.phase_knots)

    def adapt(self):
        for w in self.workers:
            w.adapt()
        for key, attr in (("gamma", "gamma_scale"), ("shared_beta", "shared_beta_scale")):
            win = self.window[key]
            if win[1] >= 20:
                rate = win[0] / win[1]
                if rate < 0.2:
                    setattr(self, attr, getattr(self, attr) * 0.8)
                elif rate > 0.4:
                    setattr(self, attr, getattr(self, attr) * 1.25)
                win[0] = win[1] = 0

    def total_loglik(self) -> float:
        return float(sum(w.ll for w in self.workers))

    def state(self) -> ModelState:
        return ModelState(tuple(w.snapshot() for w in self.workers), self.gamma.copy(), self.rho2)

    def acceptance(self) -> dict[str, tuple[int, int]]:
        out = {}
        for key in ("beta", "epsilon", "delta", BIRTH, DEATH, MOVE):
            acc = sum(w.counts[key][0] for w in self.workers)
            att = sum(w.counts[key][1] for w in self.workers)
            out[key] = (acc, att)
        for key in ("gamma", "shared_beta"):
            out[key] = tuple(self.counts[key])
        return out


# --------------------------------------------------------------------------
# functional surface over the engine


def initial_state(ctx: FitContext) -> ModelState:
    """GLM coefficients, epsilon at its prior midpoint, empty knot sets, unit variances."""
    return _Chain(ctx).initial_state()


def propose_knot_move(state: ModelState, k: int, ctx: FitContext, rng=None) -> KnotProposal | None:
    """Draw a birth/death/move proposal for partition ``k`` (``None`` when ``R_k = 0``)."""
    R = ctx.bases.R[k]
    return draw_knot_proposal(k, state.partitions[k].knots, R, ctx.cfg.proposal_sd_for(k),
                              as_generator(rng))


def knot_acceptance_log_ratio(state: ModelState, proposal: KnotProposal, ctx: FitContext) -> float:
    """``log(L * A * P)`` for ``proposal`` with the likelihood over the full dataset."""
    k = proposal.partition
    part = state.partitions[k]
    R = ctx.bases.R[k]
    cfg = ctx.cfg
    r = part.r
    delta_old = None
    if proposal.move in (DEATH, MOVE):
        if proposal.removed is None or not 0 <= proposal.removed < r:
            raise InvalidProposal("proposal removes a knot that is not active")
        delta_old = float(part.delta[proposal.removed])
    lp, lq = knot_log_ratio_components(proposal.move, r, R, cfg.lam, part.tau2,
                                       cfg.proposal_sd_for(k), proposal.delta_new, delta_old,
                                       cfg.normalize_coefficient_prior)
    new_state = apply_knot_move(state, proposal, True)
    ll_new = log_likelihood(ctx.data, linear_predictor(new_state, ctx))
    ll_old = log_likelihood(ctx.data, linear_predictor(state, ctx))
    return ll_new - ll_old + lp + lq


def apply_knot_move(state: ModelState, proposal: KnotProposal | None, accept: bool) -> ModelState:
    """Apply an accepted proposal: births append, deaths drop position ``J``, moves replace it."""
    if not accept or proposal is None:
        return state
    k = proposal.partition
    part = state.partitions[k]
    knots = list(part.knots)
    delta = np.array(part.delta)
    if proposal.move == BIRTH:
        if proposal.added in knots:
            raise InvalidProposal("birth of an already active knot")
        knots.append(proposal.added)
        delta = np.append(delta, proposal.delta_new)
    elif proposal.move == DEATH:
        J = proposal.removed
        if J is None or not 0 <= J < len(knots):
            raise InvalidProposal("death position out of range")
        del knots[J]
        delta = np.delete(delta, J)
    elif proposal.move == MOVE:
        J = proposal.removed
        if J is None or not 0 <= J < len(knots) or proposal.added in knots:
            raise InvalidProposal("invalid move proposal")
        knots[J] = proposal.added
        delta[J] = proposal.delta_new
    else:
        raise InvalidProposal(f"unknown move {proposal.move!r}")
    return state.with_partition(k, part.replace(knots=tuple(knots), delta=delta))


MH_BLOCKS = ("beta", "epsilon", "gamma", "delta")


def mh_update_block(state: ModelState, block: str, ctx: FitContext, rng=None, k: int = 0) -> ModelState:
    """One random-walk Metropolis update of ``block`` (for partition ``k`` where relevant)."""
    if block not in MH_BLOCKS:
        raise ValidationError(f"block must be one of {MH_BLOCKS}")
    rng = as_generator(rng)
    chain = _Chain(ctx, state)
    w = chain.workers[k]
    if block == "beta":
        if ctx.cfg.shared_beta:
            chain.update_shared_beta(rng)
        else:
            w.update_beta(rng)
    elif block == "epsilon":
        w.update_epsilon(rng)
    elif block == "delta":
        w.update_delta(rng)
    else:
        chain.update_gamma(rng)
    return chain.state()


# --------------------------------------------------------------------------
# chain driver


@dataclass(eq=False)
class PosteriorDraws:
    """Thinned snapshots, per-iteration traces and acceptance counts of one chain."""

    states: list[ModelState]
    iterations: np.ndarray
    trace_r: np.ndarray
    trace_epsilon: np.ndarray
    trace_tau2: np.ndarray
    trace_loglik: np.ndarray
    acceptance: dict[str, tuple[int, int]]
    seed: int
    config_fingerprint: str
    bases: ModelBases
    partition: PartitionAssignment
    cfg: ModelConfig
    p: int

    def __len__(self):
        return len(self.states)

    @property
    def family(self) -> Family:
        return self.cfg.family

    def acceptance_rates(self) -> dict[str, float]:
        return {k: (a / n if n else float("nan")) for k, (a, n) in self.acceptance.items()}


def config_fingerprint(cfg: ModelConfig) -> str:
    return hashlib.sha256(cfg.to_text().encode("utf-8")).hexdigest()


def run_chain(ctx: FitContext, threads: int = 1, state: ModelState | None = None,
              monitor: Callable[[int, ModelState], None] | None = None) -> PosteriorDraws:
    """Run ``cfg.iterations`` RJMCMC iterations and keep every ``thin``-th post-burn-in state.

    ``monitor(iteration, state)`` is called after every iteration when given.
    """
    cfg = ctx.cfg
    chain = _Chain(ctx, state)
    B, K = cfg.iterations, chain.K
    tr_r = np.zeros((B, K), dtype=np.int64)
    tr_eps = np.zeros((B, K))
    tr_tau = np.zeros((B, K))
    tr_ll = np.zeros(B)
    states, its = [], []
    ll0 = chain.total_loglik()
    if not math.isfinite(ll0):
        raise NonFiniteLogPosterior("initial state has a non-finite log-likelihood", iteration=0)
    pool = ThreadPoolExecutor(threads) if threads and threads > 1 and K > 1 else None
    try:
        for it in range(1, B + 1):
            chain.step(pool)
            ll = chain.total_loglik()
            if not math.isfinite(ll):
                raise NonFiniteLogPosterior(f"non-finite log-likelihood at iteration {it}", iteration=it)
            if cfg.adapt_steps and it <= cfg.burn_in and it % 50 == 0:
                chain.adapt()
            for j, w in enumerate(chain.workers):
                tr_r[it - 1, j] = len(w.knots)
                tr_eps[it - 1, j] = w.eps
                tr_tau[it - 1, j] = w.tau2
            tr_ll[it - 1] = ll
            if it > cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
                states.append(chain.state())
                its.append(it)
            if monitor is not None:
                monitor(it, chain.state())
    finally:
        if pool is not None:
            pool.shutdown()
    return PosteriorDraws(states, np.array(its, dtype=np.int64), tr_r, tr_eps, tr_tau, tr_ll,
                          chain.acceptance(), cfg.seed, config_fingerprint(cfg), ctx.bases,
                          ctx.partition, cfg, ctx.data.p)
