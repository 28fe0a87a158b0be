import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from adaptbases.core import Bounds, ModelConfig, ModelState, PartitionState, SpatialDataset  # noqa: E402
from adaptbases.partition import single_partition  # noqa: E402
from adaptbases.sampler import FitContext, ModelBases  # noqa: E402

# criterion number -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")


def toy_context(n=20, R=2, seed=11, p=0, family="poisson", G=(), cfg=None, eps=1.0):
    """Small one-partition model on [0, 2]^2 with hand-placed candidate knots."""
    rng = np.random.default_rng(seed)
    locs = rng.uniform(0, 2, (n, 2))
    cand = rng.uniform(0, 2, (R, 2)) if R != 2 else np.array([[0.5, 0.5], [1.5, 1.5]])
    X = rng.uniform(-0.5, 0.5, (n, p))
    eta = 0.3 + X.sum(axis=1) + 1.2 * np.exp(-eps * ((locs - cand[0]) ** 2).sum(1))
    if family == "poisson":
        z = rng.poisson(np.exp(eta)).astype(float)
    else:
        z = (rng.uniform(size=n) < 1 / (1 + np.exp(-eta))).astype(float)
    bounds = Bounds(0, 2, 0, 2)
    data = SpatialDataset(locs, z, X, family, bounds)
    cfg = cfg or ModelConfig(K=1, global_basis_resolutions=G, family=family, iterations=10,
                             burn_in=0, thin=1)
    from adaptbases.basis import default_layers

    bases = ModelBases((1,), (cand,), tuple(default_layers(bounds, G)), bounds)
    return FitContext(data, single_partition(locs), bases, cfg)


def random_state(ctx: FitContext, rng, r=None) -> ModelState:
    """A random valid state for a one-or-more-partition context."""
    parts = []
    p = ctx.data.p + int(ctx.cfg.fit_intercept)
    lo, hi = ctx.cfg.epsilon_prior
    for R in ctx.bases.R:
        rr = int(rng.integers(0, R + 1)) if r is None else min(r, R)
        knots = tuple(int(k) for k in rng.permutation(R)[:rr])
        parts.append(PartitionState(rng.normal(0, 0.3, p), knots, rng.normal(0, 0.5, rr),
                                    rng.uniform(lo, hi), rng.uniform(0.2, 3.0)))
    return ModelState(tuple(parts), rng.normal(0, 0.2, ctx.bases.G), rng.uniform(0.2, 2.0))


@pytest.fixture
def toy():
    return toy_context()
