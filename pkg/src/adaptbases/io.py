"""CSV/JSON persistence for datasets, partitions, posterior draws and manifests.

Numbers are written with 17 significant digits so every double round-trips.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import re
import tempfile
from pathlib import Path

import numpy as np

from .basis import default_layers
from .core import Bounds, Family, ModelConfig, ModelState, PartitionState, SpatialDataset
from .exceptions import ValidationError
from .partition import PartitionAssignment
from .sampler import ModelBases, PosteriorDraws

FMT = "%.17g"


def fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return FMT % float(v)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_rows(path, header, rows) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_columns(path, header, columns) -> None:
    cols = [np.asarray(c).ravel() for c in columns]
    write_rows(path, header, zip(*cols) if cols else [])


def read_table(path) -> tuple[list[str], np.ndarray]:
    """Header and float matrix of a numeric CSV (empty fields become NaN)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file")
        rows = []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(x) if x.strip() else np.nan for x in row])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}")
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return header, data


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# --------------------------------------------------------------------------
# datasets

_COV_RE = re.compile(r"x(\d+)$")


def write_dataset(path, data: SpatialDataset) -> None:
    header = ["x", "y", "z"] + [f"x{j + 1}" for j in range(data.p)]
    cols = [data.coords[:, 0], data.coords[:, 1], data.z] + [data.X[:, j] for j in range(data.p)]
    write_columns(path, header, cols)


def read_dataset(path, family: Family | str = Family.POISSON, bounds: Bounds | None = None) -> SpatialDataset:
    """Load ``x,y,z[,x1..xP]``; ``bounds`` default to the data's bounding box."""
    header, data = read_table(path)
    if header[:3] != ["x", "y", "z"]:
        raise ValidationError(f"{path}: header must start with x,y,z, got {header[:3]}")
    for j, name in enumerate(header[3:], 1):
        if name != f"x{j}":
            raise ValidationError(f"{path}: covariate column {j} must be named x{j}, got {name!r}")
    if data.shape[0] == 0:
        raise ValidationError(f"{path}: dataset has no rows")
    coords = data[:, :2]
    return SpatialDataset(coords, data[:, 2], data[:, 3:], Family.parse(family),
                          bounds if bounds is not None else Bounds.from_coords(coords))


def read_locations(path, p: int):
    """Coordinates, optional covariates and optional responses of a target file."""
    header, data = read_table(path)
    if header[:2] != ["x", "y"]:
        raise ValidationError(f"{path}: header must start with x,y")
    z = data[:, header.index("z")] if "z" in header else None
    cov_cols = [i for i, h in enumerate(header) if _COV_RE.match(h)]
    X = data[:, cov_cols] if cov_cols else None
    if X is not None and X.shape[1] != p:
        raise ValidationError(f"{path}: expected {p} covariate columns, got {X.shape[1]}")
    return data[:, :2], X, z


# --------------------------------------------------------------------------
# partitions


def write_partition(out_dir, data: SpatialDataset, part: PartitionAssignment,
                    lattice_values=None) -> None:
    out_dir = Path(out_dir)
    write_columns(out_dir / "partition.csv", ["x", "y", "label"],
                  [data.coords[:, 0], data.coords[:, 1], part.labels])
    vals = (np.full(part.lattice_labels.shape[0], np.nan) if lattice_values is None
            else np.asarray(lattice_values, dtype=float))
    rows = [(x, y, int(lab), (None if np.isnan(v) else v))
            for (x, y), lab, v in zip(part.lattice_coords, part.lattice_labels, vals)]
    write_rows(out_dir / "lattice.csv", ["x", "y", "label", "eps_bar"], rows)


def read_partition(directory, data: SpatialDataset | None = None) -> PartitionAssignment:
    directory = Path(directory)
    _, lat = read_table(directory / "lattice.csv")
    lattice_coords = lat[:, :2]
    lattice_labels = lat[:, 2].astype(np.intp)
    header, obs = read_table(directory / "partition.csv")
    labels = obs[:, 2].astype(np.intp)
    if data is not None:
        if obs.shape[0] != data.n:
            raise ValidationError(f"partition has {obs.shape[0]} rows but the dataset has {data.n}")
        if not np.array_equal(obs[:, :2], data.coords):
            raise ValidationError("partition locations do not match the dataset")
    return PartitionAssignment(labels, lattice_coords, lattice_labels)


# --------------------------------------------------------------------------
# posterior draws

DRAW_HEADER = ["block", "partition", "index", "x", "y", "value"]


def _draw_rows(state: ModelState, bases: ModelBases):
    rows = []
    for i, (lab, part) in enumerate(zip(bases.labels, state.partitions)):
        rows += [("beta", lab, j, None, None, v) for j, v in enumerate(part.beta)]
        rows.append(("epsilon", lab, 0, None, None, part.epsilon))
        rows.append(("tau2", lab, 0, None, None, part.tau2))
        for knot, d in zip(part.knots, part.delta):
            x, y = bases.candidates[i][knot]
            rows.append(("knot", lab, knot, x, y, d))
    rows += [("gamma", 0, j, None, None, v) for j, v in enumerate(state.gamma)]
    rows.append(("rho2", 0, 0, None, None, state.rho2))
    return rows


def _format_draw(rows) -> str:
    lines = [",".join(DRAW_HEADER)]
    for block, *rest in rows:
        lines.append(",".join([block] + [fmt(v) for v in rest]))
    return "\n".join(lines) + "\n"


def write_trace(path, draws: PosteriorDraws) -> None:
    labels = draws.bases.labels
    header = (["iteration"] + [f"r_{k}" for k in labels] + [f"eps_{k}" for k in labels]
              + [f"tau2_{k}" for k in labels] + ["loglik"])
    B = draws.trace_loglik.shape[0]
    cols = ([np.arange(1, B + 1)] + [draws.trace_r[:, i] for i in range(len(labels))]
            + [draws.trace_epsilon[:, i] for i in range(len(labels))]
            + [draws.trace_tau2[:, i] for i in range(len(labels))] + [draws.trace_loglik])
    lines = [",".join(header)]
    ints = set(range(0, 1 + len(labels)))
    for t in range(B):
        lines.append(",".join(str(int(c[t])) if j in ints else FMT % c[t] for j, c in enumerate(cols)))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_draws(out_dir, draws: PosteriorDraws) -> list[str]:
    """Persist a fitted chain; returns the written paths relative to ``out_dir``."""
    out_dir = Path(out_dir)
    ddir = out_dir / "draws"
    ddir.mkdir(parents=True, exist_ok=True)
    for old in ddir.glob("draw_*.csv"):
        old.unlink()
    written = ["trace.csv", "candidates.csv", "model.json", "acceptance.json", "lattice.csv"]
    write_trace(out_dir / "trace.csv", draws)
    bases = draws.bases
    rows = [(lab, j, x, y) for lab, cand in zip(bases.labels, bases.candidates)
            for j, (x, y) in enumerate(cand)]
    write_rows(out_dir / "candidates.csv", ["partition", "index", "x", "y"], rows)
    for it, state in zip(draws.iterations, draws.states):
        name = f"draw_{int(it):08d}.csv"
        atomic_write_text(ddir / name, _format_draw(_draw_rows(state, bases)))
        written.append(f"draws/{name}")
    part = draws.partition
    write_rows(out_dir / "lattice.csv", ["x", "y", "label", "eps_bar"],
               [(x, y, int(lab), None) for (x, y), lab in zip(part.lattice_coords, part.lattice_labels)])
    layers = bases.layers
    domain = list(bases.domain.as_tuple()) if bases.domain is not None else None
    model = {
        "family": draws.family.value,
        "p": draws.p,
        "fit_intercept": draws.cfg.fit_intercept,
        "labels": list(bases.labels),
        "global_basis_resolutions": [layer.n_knots for layer in layers],
        "domain": domain,
        "layer_bandwidths": [layer.gamma for layer in layers],
        "seed": draws.seed,
        "config_fingerprint": draws.config_fingerprint,
        "config": draws.cfg.to_text(),
        "snapshots": len(draws),
    }
    write_json(out_dir / "model.json", model)
    acc = {k: {"accepted": a, "attempted": n, "rate": (a / n if n else None)}
           for k, (a, n) in draws.acceptance.items()}
    write_json(out_dir / "acceptance.json", acc)
    return written


def read_draws(directory) -> PosteriorDraws:
    """Rebuild a :class:`PosteriorDraws` (snapshots only; traces are left empty)."""
    directory = Path(directory)
    model = read_json(directory / "model.json")
    cfg = ModelConfig.from_text(model["config"])
    labels = [int(v) for v in model["labels"]]
    _, cand = read_table(directory / "candidates.csv")
    candidates = []
    for lab in labels:
        rows = cand[cand[:, 0] == lab] if cand.size else np.zeros((0, 4))
        order = np.argsort(rows[:, 1], kind="stable")
        candidates.append(np.ascontiguousarray(rows[order][:, 2:4]))
    res = model["global_basis_resolutions"]
    layers = tuple(default_layers(Bounds(*model["domain"]), res)) if res else ()
    bases = ModelBases(tuple(labels), tuple(candidates), layers,
                       Bounds(*model["domain"]) if model["domain"] else None)
    _, lat = read_table(directory / "lattice.csv")
    partition = PartitionAssignment(np.zeros(0, dtype=np.intp), lat[:, :2], lat[:, 2].astype(np.intp))
    index = {lab: i for i, lab in enumerate(labels)}
    files = sorted((directory / "draws").glob("draw_*.csv"))
    states, its = [], []
    for path in files:
        its.append(int(path.stem.split("_")[1]))
        states.append(_parse_draw(path, index, model["p"] + int(model["fit_intercept"]), sum(res)))
    K = len(labels)
    empty = np.zeros((0, K))
    return PosteriorDraws(states, np.array(its, dtype=np.int64), empty.astype(np.int64), empty,
                          empty, np.zeros(0), {}, int(model["seed"]), model["config_fingerprint"],
                          bases, partition, cfg, int(model["p"]))


def _parse_draw(path, index, n_beta, G) -> ModelState:
    K = len(index)
    beta = [np.zeros(n_beta) for _ in range(K)]
    eps = [0.0] * K
    tau2 = [1.0] * K
    knots = [[] for _ in range(K)]
    delta = [[] for _ in range(K)]
    gamma = np.zeros(G)
    rho2 = 1.0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for block, part, idx, _x, _y, value in reader:
            v = float(value)
            j = int(idx)
            if block in ("gamma", "rho2"):
                if block == "gamma":
                    gamma[j] = v
                else:
                    rho2 = v
                continue
            i = index[int(part)]
            if block == "beta":
                beta[i][j] = v
            elif block == "epsilon":
                eps[i] = v
            elif block == "tau2":
                tau2[i] = v
            elif block == "knot":
                knots[i].append(j)
                delta[i].append(v)
            else:
                raise ValidationError(f"{path}: unknown block {block!r}")
    parts = tuple(PartitionState(beta[i], tuple(knots[i]), np.array(delta[i]), eps[i], tau2[i])
                  for i in range(K))
    return ModelState(parts, gamma, rho2)
