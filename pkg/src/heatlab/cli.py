"""Command-line experiment runner.

Each subcommand reads a JSON config (``--config``), applies ``--set
dotted.path=value`` overrides, runs one experiment and writes a JSON report,
CSV plot data and ``manifest.json`` into ``--out``.  Exit status: 0 when the
experiment's verdict passes (or it has none), 2 when it fails, 1 on errors.
The thread count of the numerical libraries is taken from ``HEATLAB_THREADS``.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__, embed, harmonic, ks, maps
from ._io import csv_text, dumps
from .mesh import icosphere, load_mesh, torus_grid
from .space import build_from_mesh, build_model_space, load_space, save_space, space_to_dict

logger = logging.getLogger("heatlab")

THREADS_ENV = "HEATLAB_THREADS"

EXPERIMENTS = {
    "spectrum": "spectrum",
    "embed": "embed",
    "distortion": "embed-distortion",
    "bilip": "bilipschitz",
    "energy": "energy",
    "ks": "ks-compare",
    "flow": "harmonic-flow",
    "takahashi": "takahashi",
}

DEFAULTS = {
    "seed": 0,
    "delta": 1e-8,
    "normalization": "A",
    "exponents": [1, 2],
    "t_schedule": [0.04, 0.02, 0.01],
}


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending entry."""

    def __init__(self, field, message):
        super().__init__(f"config field {field!r}: {message}")
        self.field = field


# --------------------------------------------------------------------------
# config handling
# --------------------------------------------------------------------------


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> None:
    """Set ``a.b.c=value`` in a nested dict; values are parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like dotted.path=value")
    path, value = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = config
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(path, "cannot descend into a non-object value")
    node[keys[-1]] = parse_value(value)


def load_config(path, overrides=()) -> dict:
    config = {}
    if path is not None:
        try:
            config = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from exc
        if not isinstance(config, dict):
            raise ConfigError("config", "top level must be a JSON object")
    for item in overrides:
        apply_override(config, item)
    merged = copy.deepcopy(DEFAULTS)
    merged.update(config)
    return merged


def _schedule(config, name, required=True):
    if name not in config:
        if required:
            raise ConfigError(name, "missing")
        return None
    try:
        return maps.check_schedule(config[name], name).tolist()
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from exc


def _positive(config, name, default=None, integer=False):
    value = config.get(name, default)
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not value > 0:
        raise ConfigError(name, f"must be a positive number (got {value!r})")
    if integer and int(value) != value:
        raise ConfigError(name, "must be an integer")
    return int(value) if integer else float(value)


def _build_space(entry, field="space"):
    if not isinstance(entry, dict):
        raise ConfigError(field, "must be an object")
    cache = entry.get("cache")
    if cache and Path(cache).exists():
        return load_space(cache)
    kind = entry.get("kind")
    L = entry.get("L", 40)
    try:
        if kind == "mesh":
            gen = entry.get("generator")
            if "path" in entry:
                mesh = load_mesh(entry["path"])
            elif gen == "icosphere":
                mesh = icosphere(int(entry.get("level", 3)), bool(entry.get("relaxed", False)))
            elif gen == "torus_grid":
                mesh = torus_grid(int(entry.get("n", 32)))
            else:
                raise ConfigError(f"{field}.generator", "expected 'icosphere', 'torus_grid' or a 'path'")
            space = build_from_mesh(mesh, int(L), entry.get("name", gen or "mesh"))
        else:
            space = build_model_space(kind, entry.get("params", {}), P=int(entry.get("P", 256)), L=int(L))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(field, str(exc)) from exc
    if cache:
        save_space(space, cache)
    return space


def _point_map(config, source):
    entry = config.get("map", {"name": "identity"})
    name = entry.get("name", "identity")
    target = _build_space(config["target"], "target") if "target" in config else source
    try:
        if name == "identity":
            if source is target:
                return maps.identity_map(source)
            return maps.analytic_map("identity", source, target)
        if name == "circle_power":
            return maps.circle_power_map(source, int(entry.get("k", 2)), target)
        if name == "constant":
            return maps.constant_map(source, target, int(entry.get("index", 0)))
    except maps.MapError as exc:
        raise ConfigError("map", str(exc)) from exc
    raise ConfigError("map.name", f"unknown map {name!r}")


def _sphere_map(config, source):
    entry = config.get("map", {})
    name = entry.get("name", "circle_power")
    if name == "circle_power":
        return harmonic.circle_power(source, int(entry.get("k", 1)))
    if name == "coordinates":
        return harmonic.coordinate_map(source)
    if name == "eigenmap":
        return harmonic.eigenmap(source, float(entry["lambda"]), int(entry.get("k", 1))).map
    raise ConfigError("map.name", f"unknown sphere map {name!r}")


# --------------------------------------------------------------------------
# experiments: each returns (report dict, csv header, csv rows, verdict or None)
# --------------------------------------------------------------------------


def run_spectrum(config):
    space = _build_space(config.get("space"))
    doc = space_to_dict(space)
    report = {
        "space": space.name,
        "n_samples": space.n_samples,
        "eigenvalues": space.eigenvalues,
        "clusters": [c.tolist() for c in space.clusters],
        "complete_cutoff": space.complete_cutoff(),
        "last_cluster_complete": space.last_cluster_complete,
        "schema_version": doc["schema_version"],
    }
    rows = [(i, lam) for i, lam in enumerate(space.eigenvalues)]
    return report, ["index", "eigenvalue"], rows, None


def _truncation(space, t, delta):
    try:
        return embed.choose_truncation(space, t, delta)
    except embed.TruncationError as exc:
        raise ConfigError("delta", str(exc)) from exc


def run_embed(config):
    space = _build_space(config.get("space"))
    ts = _schedule(config, "t_schedule")
    delta = _positive(config, "delta")
    entries, rows = [], []
    for t in ts:
        tr = _truncation(space, t, delta)
        coords = embed.embedding_coords(space, np.arange(space.n_samples), t, tr.l)
        entries.append({"t": t, "l": tr.l, "tail": tr.tail})
        rows += [(t, p, *coords[p]) for p in range(space.n_samples)]
    width = max(len(r) for r in rows) - 2
    rows = [r + ("",) * (width + 2 - len(r)) for r in rows]
    report = {"space": space.name, "schedule": entries}
    return report, ["t", "sample"] + [f"c{i + 1}" for i in range(width)], rows, None


def run_distortion(config):
    space = _build_space(config.get("space"))
    ts = _schedule(config, "t_schedule")
    exps = config.get("exponents", [1, 2])
    if not isinstance(exps, list) or not all(isinstance(p, (int, float)) and p >= 1 for p in exps):
        raise ConfigError("exponents", "must be a list of numbers >= 1")
    norm = config.get("normalization", "A")
    if norm not in ("A", "B"):
        raise ConfigError("normalization", "must be 'A' or 'B'")
    delta = config.get("delta")
    entries, rows = [], []
    for t in ts:
        l = _truncation(space, t, delta).l if delta else None
        rep = embed.distortion_report(space, t, l, norm, exps)
        entries.append(rep.to_dict())
        rows.append((t, rep.l, *[rep.norms[k] for k in sorted(rep.norms)]))
    header = ["t", "l"] + sorted(entries[0]["norms"])
    return {"space": space.name, "normalization": norm, "schedule": entries}, header, rows, None


def run_bilip(config):
    space = _build_space(config.get("space"))
    ts = _schedule(config, "t_schedule")
    rho = _positive(config, "rho", 0.1)
    n_pairs = _positive(config, "n_pairs", 2000, integer=True)
    seed = config.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed", "must be an integer")
    delta = config.get("delta")
    entries, rows = [], []
    for t in ts:
        l = _truncation(space, t, delta).l if delta else None
        rep = embed.bilipschitz_report(space, t, l, rho, n_pairs, seed)
        entries.append(rep.to_dict())
        rows.append((t, rep.l, rep.local_ratio_min, rep.local_ratio_max, rep.global_ratio_min, rep.global_ratio_max))
    header = ["t", "l", "local_min", "local_max", "global_min", "global_max"]
    return {"space": space.name, "seed": seed, "schedule": entries}, header, rows, None


def run_energy(config):
    space = _build_space(config.get("space"))
    f = _point_map(config, space)
    ts = _schedule(config, "t_schedule")
    res = maps.normalized_energy(f, ts, config.get("delta"))
    ug = maps.upper_gradient_estimate(f, ts[-1], int(res.l[-1]))
    report = {
        "map": f.to_dict() if f.kind == "analytic" else {"kind": "vertex"},
        "energy": res.to_dict(),
        "upper_gradient": {"min": float(ug.field.min()), "max": float(ug.field.max()), "t": ug.t},
        "isometry_defect": maps.isometry_defect(f, ts[-1], int(res.l[-1])),
    }
    return report, ["t", "normalized_energy_A", "normalized_energy_B"], res.csv_rows(), res.bounded


def run_ks(config):
    space = _build_space(config.get("space"))
    f = _point_map(config, space)
    ts = _schedule(config, "t_schedule")
    rs = _schedule(config, "r_schedule")
    try:
        rep = ks.ks_compare(f, ts, rs, config.get("delta"), config.get("tolerance", ks.RATIO_TOL))
    except ks.ResolutionError as exc:
        raise ConfigError("r_schedule", str(exc)) from exc
    rows = list(zip(rep.radii, rep.totals, rep.ratios))
    return rep.to_dict(), ["r", "ks_energy", "ratio"], rows, rep.passed


def run_flow(config):
    space = _build_space(config.get("space"))
    entry = config.get("flow", {})
    f0 = _sphere_map(config, space)
    amp = entry.get("perturbation", 0.0)
    if amp:
        f0 = harmonic.tangent_perturbation(f0, float(amp), int(config.get("seed", 0)))
    res = harmonic.harmonic_flow(
        f0, entry.get("eta"), int(entry.get("max_steps", 5000)), float(entry.get("tol", 1e-6))
    )
    report = {
        "converged": res.converged,
        "diverged": res.diverged,
        "steps": res.steps,
        "initial_energy": res.trace[0][1],
        "final_energy": res.trace[-1][1],
        "final_residual": res.trace[-1][2],
        "seed": config.get("seed", 0),
    }
    return report, ["step", "energy", "residual", "eta"], res.trace, res.converged


def run_takahashi(config):
    space = _build_space(config.get("space"))
    f = _sphere_map(config, space)
    ts = _schedule(config, "t_schedule")
    tol = None
    if "tolerances" in config:
        base = harmonic.TakahashiTolerances.for_space(space)
        try:
            tol = harmonic.TakahashiTolerances(**{**vars(base), **config["tolerances"]})
        except TypeError as exc:
            raise ConfigError("tolerances", str(exc)) from exc
    rep = harmonic.takahashi_check(f, ts, tol)
    rows = [(i, r, lam) for i, (r, lam) in enumerate(zip(rep.eigen_residuals, rep.fitted_eigenvalues))]
    return rep.to_dict(), ["coordinate", "eigen_residual", "fitted_eigenvalue"], rows, rep.passed


RUNNERS = {
    "spectrum": run_spectrum,
    "embed": run_embed,
    "distortion": run_distortion,
    "bilip": run_bilip,
    "energy": run_energy,
    "ks": run_ks,
    "flow": run_flow,
    "takahashi": run_takahashi,
}


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------


def _check_expectations(report, expect):
    """``expect`` maps top-level report keys to {"min": x, "max": y} or an exact value."""
    if expect is None:
        return None
    if not isinstance(expect, dict):
        raise ConfigError("expect", "must be an object")
    ok = True
    for key, rule in expect.items():
        if key not in report:
            raise ConfigError(f"expect.{key}", "not a report field")
        value = report[key]
        if isinstance(rule, dict):
            ok &= ("min" not in rule or value >= rule["min"]) and ("max" not in rule or value <= rule["max"])
        else:
            ok &= value == rule
    return bool(ok)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(command: str, config: dict, out_dir) -> int:
    """Run one experiment and write its artifacts; returns the exit status."""
    experiment = EXPERIMENTS[command]
    if config.get("experiment", experiment) != experiment:
        raise ConfigError("experiment", f"{config['experiment']!r} does not match subcommand {command!r}")
    config["experiment"] = experiment
    if not isinstance(config.get("seed", 0), int):
        raise ConfigError("seed", "must be an integer")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report, header, rows, verdict = RUNNERS[command](config)
    expected = _check_expectations(report, config.get("expect"))
    if expected is not None:
        verdict = expected if verdict is None else (verdict and expected)
    report = {
        "experiment": experiment,
        "seed": config.get("seed", 0),
        "verdict": None if verdict is None else ("PASS" if verdict else "FAIL"),
        "warnings": sorted({str(w.message) for w in caught}),
        "result": report,
    }
    stem = experiment.replace("-", "_")
    files = {f"{stem}.json": dumps(report), f"{stem}.csv": csv_text(header, rows)}
    for name, text in files.items():
        (out / name).write_text(text)
    manifest = {
        "config": config,
        "versions": {
            "heatlab": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "checksums": {name: _sha256(out / name) for name in sorted(files)},
    }
    (out / "manifest.json").write_text(dumps(manifest))
    return 0 if verdict is None or verdict else 2


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(THREADS_ENV, f"must be a positive integer (got {value!r})") from None
    if n < 1:
        raise ConfigError(THREADS_ENV, f"must be a positive integer (got {value!r})")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heatlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, experiment in EXPERIMENTS.items():
        p = sub.add_parser(name, help=f"run the {experiment} experiment")
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config, args.overrides)
        threads = _thread_limit()
        if threads is None:
            return run(args.command, config, args.out)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return run(args.command, config, args.out)
    except (ConfigError, ks.ResolutionError, embed.TruncationError, harmonic.EigenmapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
