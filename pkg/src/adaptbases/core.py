"""Domain types, configuration and seeding shared across the package.

Locations are stored as ``(N, 2)`` float arrays throughout; :class:`Location`
exists for the few places where a single named point reads better.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Sequence

import numpy as np

from .exceptions import (
    EmptyDataset,
    InvalidPriorBounds,
    PartitionCountExceedsData,
    ValidationError,
)

BLOCKS = ("beta", "epsilon", "gamma", "delta", "tau2", "rho2", "knots")
VARIANCE_CONVENTIONS = ("shape_scale", "precision_gamma")


class Location(NamedTuple):
    x: float
    y: float


class Family(str, enum.Enum):
    POISSON = "poisson"
    BERNOULLI = "bernoulli"

    @classmethod
    def parse(cls, value: "Family | str") -> "Family":
        if isinstance(value, Family):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValidationError(f"unknown family {value!r}; expected 'poisson' or 'bernoulli'")


@dataclass(frozen=True)
class Bounds:
    """Axis-aligned rectangular domain."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        vals = (self.xmin, self.xmax, self.ymin, self.ymax)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError("domain bounds must be finite")
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValidationError(f"degenerate domain bounds {vals}")

    @classmethod
    def square(cls, lo: float = 0.0, hi: float = 5.0) -> "Bounds":
        return cls(lo, hi, lo, hi)

    @classmethod
    def from_coords(cls, coords: np.ndarray) -> "Bounds":
        coords = np.asarray(coords, dtype=float)
        lo = coords.min(axis=0)
        hi = coords.max(axis=0)
        # widen degenerate extents so single points still get a valid box
        pad = np.where(hi > lo, 0.0, 0.5)
        return cls(float(lo[0] - pad[0]), float(hi[0] + pad[0]),
                   float(lo[1] - pad[1]), float(hi[1] + pad[1]))

    def contains(self, coords: np.ndarray) -> np.ndarray:
        coords = np.atleast_2d(coords)
        return ((coords[:, 0] >= self.xmin) & (coords[:, 0] <= self.xmax)
                & (coords[:, 1] >= self.ymin) & (coords[:, 1] <= self.ymax))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.xmax, self.ymin, self.ymax)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SpatialDataset:
    """Observed responses ``z`` at ``coords`` with covariate matrix ``X``.

    ``X`` has shape ``(N, P)`` with ``P >= 0`` and never contains an
    intercept; models add one themselves.
    """

    coords: np.ndarray
    z: np.ndarray
    X: np.ndarray
    family: Family
    bounds: Bounds

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        z = np.asarray(self.z, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValidationError("coords must have shape (N, 2)")
        n = coords.shape[0]
        if X.ndim == 1 and X.size == 0:
            X = np.zeros((n, 0))
        if X.ndim != 2:
            raise ValidationError("X must be a 2-d matrix")
        if z.shape[0] != n or X.shape[0] != n:
            raise ValidationError(
                f"length mismatch: {n} locations, {z.shape[0]} responses, {X.shape[0]} covariate rows")
        if not (np.all(np.isfinite(coords)) and np.all(np.isfinite(z)) and np.all(np.isfinite(X))):
            raise ValidationError("dataset contains non-finite values")
        family = Family.parse(self.family)
        if family is Family.POISSON and np.any((z < 0) | (z != np.round(z))):
            raise ValidationError("Poisson responses must be nonnegative integers")
        if family is Family.BERNOULLI and np.any((z != 0) & (z != 1)):
            raise ValidationError("Bernoulli responses must be 0 or 1")
        bounds = self.bounds
        if bounds is None:
            bounds = Bounds.from_coords(coords) if n else Bounds.square()
        elif not isinstance(bounds, Bounds):
            bounds = Bounds(*bounds)
        if n and not np.all(bounds.contains(coords)):
            raise ValidationError("locations fall outside the declared domain bounds")
        if n > 1 and np.unique(coords, axis=0).shape[0] != n:
            raise ValidationError("dataset contains duplicate locations")
        object.__setattr__(self, "coords", _readonly(coords))
        object.__setattr__(self, "z", _readonly(z))
        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "bounds", bounds)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "SpatialDataset":
        return SpatialDataset(self.coords[idx], self.z[idx], self.X[idx], self.family, self.bounds)


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _fmt_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, enum.Enum):
        return str(v.value)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return _fmt_float(v)
    if v is None:
        return ""
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt_value(x) for x in v)
    return str(v)


def _parse_bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("true", "1", "yes", "on"):
        return True
    if s in ("false", "0", "no", "off"):
        return False
    raise ValidationError(f"cannot parse boolean from {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    s = s.strip()
    if not s:
        return ()
    return tuple(float(x) for x in s.split(","))


@dataclass(frozen=True)
class ModelConfig:
    """Sampler, prior and partitioning settings for one fit.

    ``rw_proposal_sds`` holds step scales for the (beta, epsilon, gamma,
    delta) random walks. The epsilon step is absolute; the other three
    multiply a curvature-preconditioned proposal whose covariance is
    ``(scale**2 / dim) * F^{-1}`` with ``F`` the Fisher information of the
    block at the initial nonspatial fit.
    """

    K: int = 9
    lam: float = 5.0
    epsilon_prior: tuple[float, float] = (0.01, 3.0)
    beta_prior_variance: float = 100.0
    tau2_prior: tuple[float, float] = (0.5, 2000.0)
    rho2_prior: tuple[float, float] = (0.5, 2000.0)
    variance_prior_convention: str = "shape_scale"
    coeff_proposal_sd: tuple[float, ...] = (0.5,)
    rw_proposal_sds: tuple[float, float, float, float] = (2.38, 0.2, 2.38, 2.38)
    iterations: int = 10000
    burn_in: int = 5000
    thin: int = 10
    seed: int = 0
    candidate_grid_per_partition: int = 25
    global_basis_resolutions: tuple[int, ...] = (4, 16, 64)
    shared_beta: bool = False
    family: Family = Family.POISSON
    lattice_size: int = 400
    fit_intercept: bool = True
    update_delta: bool = True
    adapt_steps: bool = False
    normalize_coefficient_prior: bool = False
    frozen: tuple[str, ...] = ()
    domain: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        # normalise container types so equality and serialisation are stable
        object.__setattr__(self, "family", Family.parse(self.family))
        sd = self.coeff_proposal_sd
        if np.isscalar(sd):
            sd = (sd,)
        object.__setattr__(self, "coeff_proposal_sd", tuple(float(x) for x in sd))
        for name in ("epsilon_prior", "tau2_prior", "rho2_prior", "rw_proposal_sds"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        object.__setattr__(self, "global_basis_resolutions",
                           tuple(int(x) for x in self.global_basis_resolutions))
        object.__setattr__(self, "frozen", tuple(str(b) for b in self.frozen))
        if self.domain is not None:
            object.__setattr__(self, "domain", tuple(float(x) for x in self.domain))
        for name in ("K", "iterations", "burn_in", "thin", "seed",
                     "candidate_grid_per_partition", "lattice_size"):
            object.__setattr__(self, name, int(getattr(self, name)))
        for name in ("lam", "beta_prior_variance"):
            object.__setattr__(self, name, float(getattr(self, name)))

    # field name -> key in the text file
    _KEY_ALIASES = {"lam": "lambda"}

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def proposal_sd_for(self, k: int) -> float:
        sds = self.coeff_proposal_sd
        return sds[k] if len(sds) > 1 else sds[0]

    @property
    def n_snapshots(self) -> int:
        return max(self.iterations - self.burn_in, 0) // self.thin

    def to_text(self) -> str:
        lines = ["# adaptbases model configuration"]
        for f in dataclasses.fields(self):
            key = self._KEY_ALIASES.get(f.name, f.name)
            lines.append(f"{key} = {_fmt_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        reverse = {v: k for k, v in cls._KEY_ALIASES.items()}
        types = {f.name: f for f in dataclasses.fields(cls)}
        kwargs: dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValidationError(f"config line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            name = reverse.get(key, key)
            if name not in types:
                raise ValidationError(f"config line {lineno}: unknown key {key!r}")
            try:
                kwargs[name] = _parse_field(name, value)
            except ValueError as exc:
                raise ValidationError(f"config line {lineno}: bad value for {key!r}: {exc}")
        return cls(**kwargs)

    @classmethod
    def read(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())


_INT_FIELDS = {"K", "iterations", "burn_in", "thin", "seed", "candidate_grid_per_partition",
               "lattice_size"}
_BOOL_FIELDS = {"shared_beta", "fit_intercept", "update_delta", "adapt_steps",
                "normalize_coefficient_prior"}


def _parse_field(name: str, value: str):
    if name in _INT_FIELDS:
        return int(value)
    if name in _BOOL_FIELDS:
        return _parse_bool(value)
    if name in ("lam", "beta_prior_variance"):
        return float(value)
    if name in ("family", "variance_prior_convention"):
        return value
    if name == "global_basis_resolutions":
        return tuple(int(x) for x in value.split(",")) if value.strip() else ()
    if name == "frozen":
        return tuple(x.strip() for x in value.split(",") if x.strip())
    if name == "domain":
        vals = _parse_floats(value)
        return vals if vals else None
    return _parse_floats(value)


def validate_config(cfg: ModelConfig, data: SpatialDataset | None = None) -> ModelConfig:
    """Check every configuration invariant; return ``cfg`` unchanged if valid.

    Raises the exception class of the first violation found, carrying the
    full list in ``.violations``.
    """
    problems: list[tuple[type, str]] = []

    def bad(kind, msg):
        problems.append((kind, msg))

    if data is not None and data.n == 0:
        bad(EmptyDataset, "dataset has no observations")
    if cfg.K < 1:
        bad(ValidationError, f"K must be >= 1, got {cfg.K}")
    if not cfg.lam > 0:
        bad(InvalidPriorBounds, f"lambda must be > 0, got {cfg.lam}")
    a, b = cfg.epsilon_prior
    if not (0 < a < b):
        bad(InvalidPriorBounds, f"epsilon prior needs 0 < alpha < beta, got ({a}, {b})")
    if not cfg.beta_prior_variance > 0:
        bad(InvalidPriorBounds, "beta_prior_variance must be > 0")
    for name in ("tau2_prior", "rho2_prior"):
        pr = getattr(cfg, name)
        if len(pr) != 2 or not (pr[0] > 0 and pr[1] > 0):
            bad(InvalidPriorBounds, f"{name} needs two positive hyperparameters, got {pr}")
    if cfg.variance_prior_convention not in VARIANCE_CONVENTIONS:
        bad(ValidationError, f"variance_prior_convention must be one of {VARIANCE_CONVENTIONS}")
    if not cfg.coeff_proposal_sd or not all(s > 0 for s in cfg.coeff_proposal_sd):
        bad(InvalidPriorBounds, "coeff_proposal_sd entries must be > 0")
    if len(cfg.coeff_proposal_sd) not in (1, cfg.K):
        bad(ValidationError, "coeff_proposal_sd must be a scalar or have one entry per partition")
    if len(cfg.rw_proposal_sds) != 4 or not all(s > 0 for s in cfg.rw_proposal_sds):
        bad(InvalidPriorBounds, "rw_proposal_sds needs four positive step sizes")
    if not (0 <= cfg.burn_in < cfg.iterations):
        bad(InvalidPriorBounds,
            f"need 0 <= burn_in < iterations, got burn_in={cfg.burn_in}, iterations={cfg.iterations}")
    if cfg.thin < 1:
        bad(InvalidPriorBounds, f"thin must be >= 1, got {cfg.thin}")
    if not (0 <= cfg.seed < 2**64):
        bad(ValidationError, "seed must be an unsigned 64-bit integer")
    if cfg.candidate_grid_per_partition < 1:
        bad(ValidationError, "candidate_grid_per_partition must be >= 1")
    for res in cfg.global_basis_resolutions:
        if res < 1 or math.isqrt(res) ** 2 != res:
            bad(ValidationError, f"global basis resolution {res} is not a positive perfect square")
    root = math.isqrt(max(cfg.lattice_size, 0))
    if cfg.lattice_size < 1 or root * root != cfg.lattice_size:
        bad(ValidationError, f"lattice_size {cfg.lattice_size} is not a perfect square")
    unknown = set(cfg.frozen) - set(BLOCKS)
    if unknown:
        bad(ValidationError, f"unknown frozen blocks {sorted(unknown)}")
    if cfg.domain is not None:
        try:
            Bounds(*cfg.domain)
        except (TypeError, ValidationError) as exc:
            bad(ValidationError, f"bad domain: {exc}")
    if cfg.K > cfg.lattice_size:
        bad(PartitionCountExceedsData,
            f"K={cfg.K} exceeds the {cfg.lattice_size} aggregation lattice cells")
    if data is not None and data.n and cfg.K > data.n:
        bad(PartitionCountExceedsData, f"K={cfg.K} exceeds the {data.n} observations")
    if data is not None and data.family is not cfg.family:
        bad(ValidationError, f"dataset family {data.family.value} != config family {cfg.family.value}")

    if problems:
        kind, msg = problems[0]
        raise kind(msg if len(problems) == 1 else f"{msg} (+{len(problems) - 1} more)",
                   [m for _, m in problems])
    return cfg


# --------------------------------------------------------------------------
# model state


@dataclass(frozen=True, eq=False)
class PartitionState:
    """Parameters owned by one partition.

    ``knots`` are indices into the partition's candidate grid, in insertion
    order; ``delta[m]`` is the coefficient of ``knots[m]``.
    """

    beta: np.ndarray
    knots: tuple[int, ...]
    delta: np.ndarray
    epsilon: float
    tau2: float

    def __post_init__(self):
        object.__setattr__(self, "beta", _readonly(np.asarray(self.beta, dtype=float).ravel()))
        object.__setattr__(self, "delta", _readonly(np.asarray(self.delta, dtype=float).ravel()))
        object.__setattr__(self, "knots", tuple(int(k) for k in self.knots))
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "tau2", float(self.tau2))
        if len(self.knots) != self.delta.shape[0]:
            raise ValidationError("dimension mismatch: |delta| != number of knots")
        if len(set(self.knots)) != len(self.knots):
            raise ValidationError("knot indices must be distinct")

    @property
    def r(self) -> int:
        return len(self.knots)

    def replace(self, **changes) -> "PartitionState":
        return dataclasses.replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, PartitionState):
            return NotImplemented
        return (self.knots == other.knots and self.epsilon == other.epsilon
                and self.tau2 == other.tau2 and np.array_equal(self.beta, other.beta)
                and np.array_equal(self.delta, other.delta))


@dataclass(frozen=True, eq=False)
class ModelState:
    partitions: tuple[PartitionState, ...]
    gamma: np.ndarray
    rho2: float

    def __post_init__(self):
        object.__setattr__(self, "partitions", tuple(self.partitions))
        object.__setattr__(self, "gamma", _readonly(np.asarray(self.gamma, dtype=float).ravel()))
        object.__setattr__(self, "rho2", float(self.rho2))

    @property
    def K(self) -> int:
        return len(self.partitions)

    @property
    def r(self) -> tuple[int, ...]:
        return tuple(p.r for p in self.partitions)

    def with_partition(self, k: int, part: PartitionState) -> "ModelState":
        parts = list(self.partitions)
        parts[k] = part
        return dataclasses.replace(self, partitions=tuple(parts))

    def replace(self, **changes) -> "ModelState":
        return dataclasses.replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, ModelState):
            return NotImplemented
        return (self.rho2 == other.rho2 and np.array_equal(self.gamma, other.gamma)
                and self.partitions == other.partitions)


# --------------------------------------------------------------------------
# seeding


def derive_seeds(master_seed: int, n: int) -> list[int]:
    """Derive ``n`` independent 64-bit seeds from one master seed."""
    children = np.random.SeedSequence(int(master_seed)).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def substreams(master_seed: int, n: int) -> tuple[np.random.Generator, list[np.random.Generator]]:
    """A master generator plus ``n`` per-partition generators.

    Partition ``k`` always receives the same stream for a given master seed,
    independent of how many workers later consume them.
    """
    seq = np.random.SeedSequence(int(master_seed))
    master, *children = seq.spawn(n + 1)
    return np.random.default_rng(master), [np.random.default_rng(c) for c in children]


def as_generator(seed: "int | np.random.Generator | None") -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
