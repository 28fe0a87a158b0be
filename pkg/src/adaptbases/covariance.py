"""Matérn and kernel-blended nonstationary covariance functions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special
from scipy.spatial.distance import cdist

from .exceptions import NonPositiveParameter, SpecMismatch

MATERN = "matern"
EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class CovarianceSpec:
    """Stationary isotropic covariance ``sill * M_nu(d / range)``.

    ``family="exponential"`` fixes ``nu = 0.5``.
    """

    family: str = MATERN
    nu: float = 0.5
    range: float = 1.0
    sill: float = 1.0
    nugget: float = 1e-8

    def __post_init__(self):
        fam = str(self.family).lower()
        if fam not in (MATERN, EXPONENTIAL):
            raise ValueError(f"unknown covariance family {self.family!r}")
        object.__setattr__(self, "family", fam)
        if fam == EXPONENTIAL:
            object.__setattr__(self, "nu", 0.5)
        for name in ("nu", "range", "sill"):
            if not getattr(self, name) > 0:
                raise NonPositiveParameter(f"{name} must be > 0, got {getattr(self, name)}")
        if not self.nugget >= 0:
            raise NonPositiveParameter(f"nugget must be >= 0, got {self.nugget}")


def matern_correlation(d, nu: float, range: float):
    """Matérn correlation with the ``sqrt(2 nu) d / range`` scaling.

    Accepts scalar or array ``d`` and returns the same shape. Exactly 1 at
    ``d = 0``.
    """
    if not nu > 0 or not range > 0:
        raise NonPositiveParameter(f"nu and range must be > 0, got nu={nu}, range={range}")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise NonPositiveParameter("distances must be nonnegative")
    t = np.sqrt(2.0 * nu) * d / range
    out = np.ones_like(t)
    pos = t > 0
    if nu == 0.5:
        out[pos] = np.exp(-t[pos])
    else:
        tp = t[pos]
        with np.errstate(over="ignore", invalid="ignore"):
            vals = (2.0 ** (1.0 - nu) / special.gamma(nu)) * tp**nu * special.kv(nu, tp)
        # K_nu underflows to 0 for large arguments; the limit is 0 as well
        vals[~np.isfinite(vals)] = 0.0
        out[pos] = vals
    return out if out.ndim else float(out)


def _as_coords(locs) -> np.ndarray:
    a = np.asarray(locs, dtype=float)
    return a.reshape(-1, 2)


def covariance_matrix(locs, spec: CovarianceSpec, nugget: bool = True) -> np.ndarray:
    """Dense covariance matrix; the nugget is added to the diagonal when requested."""
    coords = _as_coords(locs)
    if coords.shape[0] == 0:
        raise ValueError("need at least one location")
    d = cdist(coords, coords)
    cov = spec.sill * matern_correlation(d, spec.nu, spec.range)
    if nugget and spec.nugget:
        cov[np.diag_indices_from(cov)] += spec.nugget
    return cov


@dataclass(frozen=True)
class NonstationarySpec:
    """Locally stationary covariances blended with Gaussian-kernel weights."""

    subregion_specs: tuple[CovarianceSpec, ...]
    centers: np.ndarray
    eta: float = 6.0
    nugget: float = 1e-8

    def __post_init__(self):
        specs = tuple(self.subregion_specs)
        centers = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        if len(specs) != centers.shape[0]:
            raise SpecMismatch(
                f"{len(specs)} subregion covariances but {centers.shape[0]} centers")
        if not specs:
            raise SpecMismatch("need at least one subregion")
        if not self.eta > 0:
            raise NonPositiveParameter(f"eta must be > 0, got {self.eta}")
        centers.setflags(write=False)
        object.__setattr__(self, "subregion_specs", specs)
        object.__setattr__(self, "centers", centers)

    @classmethod
    def four_quadrants(cls, ranges: Sequence[float] = (0.5, 0.4, 0.3, 0.2), nu: float = 0.5,
                       sill: float = 1.0, eta: float = 6.0, lo: float = 0.0,
                       hi: float = 5.0) -> "NonstationarySpec":
        """Four quadrant subregions of ``[lo, hi]^2``.

        Order: lower-left, upper-right, upper-left, lower-right, matching the
        order of ``ranges``.
        """
        q1, q3 = lo + 0.25 * (hi - lo), lo + 0.75 * (hi - lo)
        centers = np.array([[q1, q1], [q3, q3], [q1, q3], [q3, q1]])
        specs = tuple(CovarianceSpec(MATERN, nu, r, sill, 0.0) for r in ranges)
        return cls(specs, centers, eta)


def nonstationary_weights(s, spec: NonstationarySpec) -> np.ndarray:
    """Normalised kernel weights of each subregion at ``s``.

    A single location gives a vector of length ``len(centers)``; an
    ``(N, 2)`` array gives an ``(N, len(centers))`` matrix.
    """
    pts = np.asarray(s, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    sq = cdist(pts, spec.centers, "sqeuclidean")
    logk = -sq / spec.eta
    # normalise in log space so distant points do not underflow to 0/0
    logk -= logk.max(axis=1, keepdims=True)
    w = np.exp(logk)
    w /= w.sum(axis=1, keepdims=True)
    return w[0] if single else w


def nonstationary_covariance_matrix(locs, spec: NonstationarySpec, nugget: bool = True) -> np.ndarray:
    """``C(s, t) = sum_i w_i(s) w_i(t) C_i(s, t)`` evaluated on ``locs``."""
    coords = _as_coords(locs)
    d = cdist(coords, coords)
    w = nonstationary_weights(coords, spec)
    cov = np.zeros_like(d)
    for i, sub in enumerate(spec.subregion_specs):
        part = sub.sill * matern_correlation(d, sub.nu, sub.range)
        part *= w[:, i][:, None]
        part *= w[:, i][None, :]
        cov += part
    if nugget and spec.nugget:
        cov[np.diag_indices_from(cov)] += spec.nugget
    return cov
