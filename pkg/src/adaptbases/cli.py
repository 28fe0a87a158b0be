"""Command-line pipeline: simulate -> cluster -> fit -> predict -> evaluate -> surface.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 lineage
mismatch, 5 disconnected neighbour graph during clustering.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import Bounds, Family, ModelConfig, derive_seeds, validate_config
from .estimator import fit_model
from .exceptions import (
    AdaptBasesError,
    DisconnectedGraph,
    LineageMismatch,
    NumericalError,
    ValidationError,
)
from .inference import GridSpec, auc, interval_coverage, posterior_predict, rcvmspe, surface_summary
from .io import (
    read_dataset,
    read_draws,
    read_json,
    read_locations,
    read_partition,
    read_table,
    sha256_file,
    write_columns,
    write_dataset,
    write_draws,
    write_json,
    write_partition,
)
from .partition import partition_dataset
from .simulate import recipe_from_text, synthesize_dataset

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_LINEAGE, EXIT_DISCONNECTED = 0, 2, 3, 4, 5


# --------------------------------------------------------------------------
# manifests and lineage


def _rel(path, root) -> str:
    return os.path.relpath(Path(path).resolve(), Path(root).resolve()).replace(os.sep, "/")


def write_manifest(out_dir, command, args, config_text, outputs, inputs, lineage, started, extra=None):
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "config": config_text,
        "inputs": {name: {"path": _rel(p, out_dir), "sha256": sha256_file(p)}
                   for name, p in inputs.items()},
        "outputs": sorted(outputs),
        "lineage": lineage,
        "duration_seconds": round(time.monotonic() - started, 3),
    }
    if extra:
        manifest.update(extra)
    write_json(out_dir / "manifest.json", manifest)


def _file_lineage(path) -> str | None:
    """Lineage id recorded by the command that produced ``path``, if any."""
    path = Path(path)
    manifest = (path if path.is_dir() else path.parent) / "manifest.json"
    if not manifest.exists():
        return None
    m = read_json(manifest)
    if path.is_file() and path.name not in m.get("outputs", []):
        return None
    return m.get("lineage")


def _check_lineage(a, b, what, force):
    if a is not None and b is not None and a != b and not force:
        raise LineageMismatch(f"{what} come from different pipeline runs (use --force to override)")


def _load_config(args, **overrides) -> ModelConfig:
    cfg = ModelConfig.read(args.config) if getattr(args, "config", None) else ModelConfig()
    changes = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    return cfg.replace(**changes) if changes else cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    started = time.monotonic()
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    recipe = recipe_from_text(text)
    if args.seed is not None:
        recipe = dataclasses.replace(recipe, seed=args.seed)
    out = _out_dir(args)
    reps = args.replicates or 1
    if reps < 1:
        raise ValidationError("--replicates must be >= 1")
    if reps == 1:
        targets = [(out, recipe)]
    else:
        seeds = derive_seeds(recipe.seed, reps)
        targets = [(out / f"rep_{i + 1:03d}", dataclasses.replace(recipe, seed=s))
                   for i, s in enumerate(seeds)]
    for target, rec in targets:
        target.mkdir(parents=True, exist_ok=True)
        fit, val, truth = synthesize_dataset(rec)
        write_dataset(target / "fit.csv", fit)
        write_dataset(target / "validate.csv", val)
        write_columns(target / "truth.csv", ["x", "y", "eta", "w", "is_fit"],
                      [truth.coords[:, 0], truth.coords[:, 1], truth.eta, truth.w,
                       truth.is_fit.astype(int)])
        outputs = ["fit.csv", "validate.csv", "truth.csv"]
        h = hashlib.sha256()
        for name in outputs:
            h.update(sha256_file(target / name).encode())
        extra = {"recipe_seed": rec.seed, "family": rec.family.value,
                 "domain": list(rec.domain.as_tuple())}
        write_manifest(target, "simulate", args, text, outputs, {}, h.hexdigest(), started, extra)
    return EXIT_OK


def _dataset_bounds(path) -> Bounds | None:
    manifest = Path(path).parent / "manifest.json"
    if manifest.exists():
        dom = read_json(manifest).get("domain")
        if dom:
            return Bounds(*dom)
    return None


def _read_dataset_arg(path, family):
    return read_dataset(path, family, _dataset_bounds(path))


def cmd_cluster(args) -> int:
    started = time.monotonic()
    cfg = _load_config(args, K=args.K, lattice_size=args.L,
                       family=Family.parse(args.family) if args.family else None)
    data = _read_dataset_arg(args.dataset, cfg.family)
    validate_config(cfg, data)
    part, agg, graph, clusters = partition_dataset(data, cfg.K, cfg.lattice_size, args.criterion,
                                                   return_details=True)
    out = _out_dir(args)
    write_partition(out, data, part, agg.values)
    write_manifest(out, "cluster", args, cfg.to_text(), ["partition.csv", "lattice.csv"],
                   {"dataset": args.dataset}, _file_lineage(args.dataset), started,
                   {"K": cfg.K, "L": cfg.lattice_size, "criterion": args.criterion})
    return EXIT_OK


def cmd_fit(args) -> int:
    started = time.monotonic()
    cfg = _load_config(args)
    data = _read_dataset_arg(args.dataset, cfg.family)
    lineage = _file_lineage(args.dataset)
    inputs = {"dataset": args.dataset}
    extra = {"baseline": bool(args.baseline), "threads": args.threads}
    partition = None
    if not args.baseline:
        if args.partition is None:
            raise ValidationError("fit needs --partition DIR (or --baseline)")
        pdir = Path(args.partition)
        pman = pdir / "manifest.json"
        if pman.exists():
            m = read_json(pman)
            _check_lineage(lineage, m.get("lineage"), "dataset and partition", args.force)
            recorded = m.get("inputs", {}).get("dataset", {}).get("sha256")
            if recorded is not None and recorded != sha256_file(args.dataset) and not args.force:
                raise LineageMismatch("partition was computed from a different dataset")
            extra["partition_manifest_sha256"] = sha256_file(pman)
        partition = read_partition(pdir, data)
        inputs["partition"] = pdir / "partition.csv"
        cfg = cfg.replace(K=int(np.unique(partition.labels).size))
    ctx, draws = fit_model(data, cfg, adaptive=not args.baseline, partition=partition,
                           threads=args.threads)
    out = _out_dir(args)
    outputs = write_draws(out, draws)
    write_manifest(out, "fit", args, ctx.cfg.to_text(), outputs, inputs, lineage, started, extra)
    return EXIT_OK


def _predict(args):
    draws = read_draws(args.fit)
    locs, X, z = read_locations(args.targets, draws.p)
    summary = posterior_predict(draws, locs, X, level=args.level)
    return draws, summary, z


def _write_predictions(path, s):
    header = ["x", "y", "eta_mean", "eta_sd", "resp_mean", "resp_sd"]
    cols = [s.locations[:, 0], s.locations[:, 1], s.eta_mean, s.eta_sd, s.resp_mean, s.resp_sd]
    if s.lower is not None:
        header += ["lo", "hi"]
        cols += [s.lower, s.upper]
    write_columns(path, header, cols)


def cmd_predict(args) -> int:
    started = time.monotonic()
    draws, summary, _ = _predict(args)
    out = _out_dir(args)
    _write_predictions(out / "predictions.csv", summary)
    write_manifest(out, "predict", args, draws.cfg.to_text(), ["predictions.csv"],
                   {"targets": args.targets, "model": Path(args.fit) / "model.json"},
                   _file_lineage(args.fit), started, {"level": args.level})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = time.monotonic()
    _check_lineage(_file_lineage(args.fit), _file_lineage(args.targets), "fit and targets", args.force)
    draws, summary, z = _predict(args)
    if z is None:
        raise ValidationError(f"{args.targets} has no z column to evaluate against")
    metrics = {"rcvmspe": rcvmspe(summary.resp_mean, z), "n": int(z.size)}
    if draws.family is Family.BERNOULLI:
        metrics["auc"] = auc(summary.resp_mean, z)
    inputs = {"targets": args.targets, "model": Path(args.fit) / "model.json"}
    if args.truth:
        header, truth = read_table(args.truth)
        eta_col = header.index("eta")
        lookup = {(x, y): e for x, y, e in zip(truth[:, 0], truth[:, 1], truth[:, eta_col])}
        try:
            eta_true = np.array([lookup[(x, y)] for x, y in summary.locations])
        except KeyError:
            raise ValidationError("truth file does not cover every target location")
        metrics["eta_interval_level"] = args.level
        metrics["eta_coverage"] = interval_coverage(summary, eta_true)
        inputs["truth"] = args.truth
    out = _out_dir(args)
    write_json(out / "metrics.json", metrics)
    _write_predictions(out / "predictions.csv", summary)
    write_manifest(out, "evaluate", args, draws.cfg.to_text(), ["metrics.json", "predictions.csv"],
                   inputs, _file_lineage(args.fit), started)
    return EXIT_OK


def cmd_surface(args) -> int:
    started = time.monotonic()
    draws = read_draws(args.fit)
    if args.domain:
        bounds = Bounds(*args.domain)
    elif draws.bases.domain is not None:
        bounds = draws.bases.domain
    else:
        raise ValidationError("surface needs --domain when the fit has no global basis domain")
    surf = surface_summary(draws, GridSpec(args.nx, args.ny, bounds))
    out = _out_dir(args)
    x, y = surf.points[:, 0], surf.points[:, 1]
    files = {"surface_mean.csv": surf.mean, "surface_sd.csv": surf.sd,
             "surface_resp_mean.csv": surf.resp_mean, "surface_resp_sd.csv": surf.resp_sd}
    for name, values in files.items():
        write_columns(out / name, ["x", "y", "value"], [x, y, values])
    write_manifest(out, "surface", args, draws.cfg.to_text(), list(files),
                   {"model": Path(args.fit) / "model.json"}, _file_lineage(args.fit), started,
                   {"nx": args.nx, "ny": args.ny})
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptbases", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="key = value configuration file")
        if seed:
            p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--force", action="store_true", help="ignore lineage mismatches")

    p = sub.add_parser("simulate", help="generate fit/validate datasets and the true field")
    common(p)
    p.add_argument("--replicates", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cluster", help="partition a dataset into K contiguous subregions")
    p.add_argument("dataset")
    common(p, seed=False)
    p.add_argument("--K", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--family", choices=[f.value for f in Family])
    p.add_argument("--criterion", choices=["residual", "pointwise"], default="residual")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("fit", help="run the reversible-jump sampler")
    p.add_argument("dataset")
    common(p)
    p.add_argument("--partition", help="directory written by 'cluster'")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--baseline", action="store_true", help="fit the fixed global-basis model")
    p.set_defaults(func=cmd_fit)

    for name, func, hlp in (("predict", cmd_predict, "posterior predictions at target locations"),
                            ("evaluate", cmd_evaluate, "hold-out metrics")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("fit", help="directory written by 'fit'")
        p.add_argument("targets", help="CSV with x,y[,z][,x1..xP]")
        common(p, seed=False)
        p.add_argument("--level", type=float, default=0.9)
        if name == "evaluate":
            p.add_argument("--truth", help="truth.csv from 'simulate' for eta interval coverage")
        p.set_defaults(func=func)

    p = sub.add_parser("surface", help="posterior mean and sd on a regular grid")
    p.add_argument("fit")
    common(p, seed=False)
    p.add_argument("--nx", type=int, default=50)
    p.add_argument("--ny", type=int, default=50)
    p.add_argument("--domain", type=float, nargs=4, metavar=("XMIN", "XMAX", "YMIN", "YMAX"))
    p.set_defaults(func=cmd_surface)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except LineageMismatch as exc:
        print(f"lineage error: {exc}", file=sys.stderr)
        return EXIT_LINEAGE
    except DisconnectedGraph as exc:
        print(f"clustering error: {exc}", file=sys.stderr)
        return EXIT_DISCONNECTED
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, AdaptBasesError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
