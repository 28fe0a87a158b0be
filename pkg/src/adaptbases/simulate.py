"""Synthetic SGLMM datasets: latent Gaussian field, uniform covariates, Poisson/Bernoulli draws."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import linalg
from scipy.special import expit

from .core import Bounds, Family, SpatialDataset, as_generator
from .covariance import (
    CovarianceSpec,
    NonstationarySpec,
    covariance_matrix,
    nonstationary_covariance_matrix,
)
from .exceptions import FactorizationFailure, ValidationError

FieldSpec = Union[CovarianceSpec, NonstationarySpec, None]

_JITTER = 1e-8


@dataclass(frozen=True)
class SimulationRecipe:
    n_fit: int = 5000
    n_validate: int = 1000
    field: FieldSpec = dataclasses.field(default_factory=NonstationarySpec.four_quadrants)
    family: Family = Family.POISSON
    beta_true: tuple[float, ...] = (1.0, 1.0)
    covariate_range: tuple[float, float] = (-0.5, 0.5)
    domain: Bounds = dataclasses.field(default_factory=Bounds.square)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        object.__setattr__(self, "beta_true", tuple(float(b) for b in self.beta_true))
        if not isinstance(self.domain, Bounds):
            object.__setattr__(self, "domain", Bounds(*self.domain))
        if self.n_fit < 1 or self.n_validate < 1:
            raise ValidationError("n_fit and n_validate must both be >= 1")
        lo, hi = self.covariate_range
        if not lo < hi:
            raise ValidationError(f"degenerate covariate range {self.covariate_range}")


@dataclass(frozen=True, eq=False)
class SimulatedTruth:
    coords: np.ndarray
    eta: np.ndarray
    w: np.ndarray
    is_fit: np.ndarray


def sample_gp_realization(cov, rng=None) -> np.ndarray:
    """Draw ``W ~ N(0, cov)`` via a lower Cholesky factor.

    A jitter of ``1e-8 * max(diag)`` is added before factorising. An all-zero
    matrix gives the zero vector.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValidationError("covariance must be a square matrix")
    rng = as_generator(rng)
    n = cov.shape[0]
    z = rng.standard_normal(n)
    scale = float(np.max(np.diag(cov))) if n else 0.0
    if scale == 0.0 and not np.any(cov):
        return np.zeros(n)
    a = cov + _JITTER * scale * np.eye(n)
    try:
        chol = linalg.cholesky(a, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise FactorizationFailure(f"covariance is not positive definite after jitter: {exc}")
    return chol @ z


def field_covariance(coords, spec: FieldSpec) -> np.ndarray | None:
    if spec is None:
        return None
    if isinstance(spec, NonstationarySpec):
        return nonstationary_covariance_matrix(coords, spec, nugget=False)
    return covariance_matrix(coords, spec, nugget=False)


def synthesize_dataset(recipe: SimulationRecipe):
    """Generate ``(fit, validate, truth)`` from one reproducible stream.

    The first ``n_fit`` sampled locations form the fitting set.
    """
    rng = np.random.default_rng(recipe.seed)
    n = recipe.n_fit + recipe.n_validate
    b = recipe.domain
    coords = np.column_stack([rng.uniform(b.xmin, b.xmax, n), rng.uniform(b.ymin, b.ymax, n)])
    lo, hi = recipe.covariate_range
    p = len(recipe.beta_true)
    X = rng.uniform(lo, hi, size=(n, p))
    cov = field_covariance(coords, recipe.field)
    w = np.zeros(n) if cov is None else sample_gp_realization(cov, rng)
    eta = X @ np.asarray(recipe.beta_true) + w
    if recipe.family is Family.POISSON:
        z = rng.poisson(np.exp(eta)).astype(float)
    else:
        z = (rng.uniform(size=n) < expit(eta)).astype(float)
    is_fit = np.zeros(n, dtype=bool)
    is_fit[: recipe.n_fit] = True
    full = SpatialDataset(coords, z, X, recipe.family, b)
    fit = full.subset(slice(0, recipe.n_fit))
    validate = full.subset(slice(recipe.n_fit, n))
    return fit, validate, SimulatedTruth(coords, eta, w, is_fit)


_RECIPE_KEYS = ("n_fit", "n_validate", "family", "beta_true", "covariate_range", "domain", "seed",
                "field", "ranges", "range", "nu", "sill", "kernel_eta")


def recipe_from_text(text: str) -> SimulationRecipe:
    """Parse a ``key = value`` recipe file.

    ``field`` is ``nonstationary`` (the default four-quadrant process, tuned
    by ``ranges``, ``nu``, ``sill`` and ``kernel_eta``), ``matern`` (tuned by
    ``range``, ``nu``, ``sill``) or ``none``.
    """
    vals: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"recipe line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _RECIPE_KEYS:
            raise ValidationError(f"recipe line {lineno}: unknown key {key!r}")
        vals[key] = value

    def floats(key, default):
        return tuple(float(x) for x in vals[key].split(",")) if key in vals else default

    try:
        nu = float(vals.get("nu", 0.5))
        sill = float(vals.get("sill", 1.0))
        kind = vals.get("field", "nonstationary").lower()
        if kind == "nonstationary":
            domain = floats("domain", (0.0, 5.0, 0.0, 5.0))
            if domain[0] != domain[2] or domain[1] != domain[3]:
                raise ValidationError("the four-quadrant field needs a square domain")
            fld = NonstationarySpec.four_quadrants(floats("ranges", (0.5, 0.4, 0.3, 0.2)), nu, sill,
                                                   float(vals.get("kernel_eta", 6.0)),
                                                   domain[0], domain[1])
        elif kind == "matern":
            fld = CovarianceSpec("matern", nu, float(vals.get("range", 1.0)), sill, 0.0)
        elif kind == "none":
            fld = None
        else:
            raise ValidationError(f"unknown field kind {kind!r}")
        kwargs = dict(field=fld)
        for key in ("n_fit", "n_validate", "seed"):
            if key in vals:
                kwargs[key] = int(vals[key])
        if "family" in vals:
            kwargs["family"] = Family.parse(vals["family"])
        for key in ("beta_true", "covariate_range"):
            if key in vals:
                kwargs[key] = floats(key, None)
        if "domain" in vals:
            kwargs["domain"] = Bounds(*floats("domain", None))
        return SimulationRecipe(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"bad recipe: {exc}")
