"""Tabular ingestion, config handling, and bit-stable serialization.

File formats (all delimiter-separated with a header row; lines starting
with '#' are provenance comments and are skipped):

* covariate grid, long format: cell_id, coord_x, coord_y, area, then
  one column per raw covariate;
* survey table, wide format: site_id, cell_id, area, then one response
  column per species (empty or NA = missing);
* presence-only table, long format: species, cell_id;
* background table: cell_id, weight.

Floats are serialized with 17 significant digits so a written artifact
reloads to exactly the same values.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import yaml

from .data import (BackgroundSample, CoefficientSet, CovariateField,
                   DataBundle, PresenceOnlyDataset, SurveyDataset)
from .errors import ConfigError, DataError
from .simulate import SimulationConfig
from .solver import SolverOptions

__all__ = [
    "RunConfig",
    "load_config",
    "load_bundle",
    "save_fit",
    "load_fit",
    "write_table",
    "config_hash",
    "fmt_float",
]

_NA_TOKENS = {"", "na", "nan", "null", "none"}


def fmt_float(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "NA"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _parse_float(token: str, where: str) -> float:
    t = token.strip()
    if t.lower() in _NA_TOKENS:
        return math.nan
    if t == "inf":
        return math.inf
    if t == "-inf":
        return -math.inf
    try:
        return float(t)
    except ValueError:
        raise DataError(f"{where}: cannot parse {token!r} as a number")


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration; ``raw`` keeps the resolved dict for
    provenance hashing."""

    raw: dict
    seed: int
    output: str
    threads: int
    deterministic: bool
    species: list
    response_kind: str
    paths: dict               # covariates / pa / po / bg, or empty
    simulate: dict            # simulate block, or empty
    model: dict               # x, z, expand, interactions (raw names)
    solver: SolverOptions
    resample: dict
    compare: dict


def load_config(path: str, overrides: dict = None) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    return resolve_config(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def resolve_config(raw: dict, base_dir: str = ".") -> RunConfig:
    def section(name):
        block = raw.get(name) or {}
        if not isinstance(block, dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
        return block

    seed = int(raw.get("seed", 0))
    threads = int(raw.get("threads", 1))
    output = str(raw.get("output", "out"))
    response_kind = str(raw.get("response_kind", "binary"))
    if response_kind not in ("binary", "count"):
        raise ConfigError(f"response_kind must be binary or count, "
                          f"got {response_kind!r}")

    paths = {}
    for key in ("covariates", "pa", "po", "bg"):
        if raw.get(key):
            paths[key] = os.path.join(base_dir, str(raw[key])) \
                if not os.path.isabs(str(raw[key])) else str(raw[key])
    simulate_block = section("simulate")
    if not simulate_block and "covariates" not in paths:
        raise ConfigError("config needs either covariate/PA/PO/BG paths or a "
                          "simulate block")

    model = section("model")
    for col, degree in (model.get("expand") or {}).items():
        if int(degree) < 1:
            raise ConfigError(f"expansion degree for {col!r} must be >= 1")

    sb = section("solver")
    try:
        solver = SolverOptions(
            nu=float(sb.get("nu", 0.0)),
            max_iterations=int(sb.get("max_iterations", 100)),
            tol_objective=float(sb.get("tol_objective", 1e-10)),
            tol_gradient=float(sb.get("tol_gradient", 1e-6)),
            step_halving_limit=int(sb.get("step_halving_limit", 30)),
            deterministic_reduction=bool(raw.get("deterministic", True)),
            threads=threads,
        )
    except ValueError as exc:
        raise ConfigError(f"invalid solver options: {exc}")

    species = raw.get("species")
    if species is not None:
        species = [str(s) for s in species]
        if len(set(species)) != len(species):
            raise ConfigError("species labels must be unique")

    return RunConfig(raw=raw, seed=seed, output=output, threads=threads,
                     deterministic=bool(raw.get("deterministic", True)),
                     species=species, response_kind=response_kind,
                     paths=paths, simulate=simulate_block, model=model,
                     solver=solver, resample=section("resample"),
                     compare=section("compare"))


def config_hash(config: RunConfig) -> str:
    canon = json.dumps(config.raw, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# tabular reading

def _read_rows(path: str):
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise DataError(f"input file not found: {path}")
    with fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file")
        rows = list(reader)
    return [h.strip() for h in header], rows


def _column(header, name, path):
    try:
        return header.index(name)
    except ValueError:
        raise DataError(f"{path}: missing required column {name!r}")


def _expand_names(names, expand):
    out = []
    for name in names:
        degree = int((expand or {}).get(name, 1))
        out.append((name, 1))
        for d in range(2, degree + 1):
            out.append((name, d))
    return out


def load_field(path: str, model: dict) -> tuple:
    """CovariateField plus the expanded (x_names, z_names)."""
    header, rows = _read_rows(path)
    for req in ("cell_id", "coord_x", "coord_y", "area"):
        _column(header, req, path)
    x_cols = model.get("x") or [h for h in header
                                if h not in ("cell_id", "coord_x", "coord_y",
                                             "area")]
    z_cols = model.get("z") or []
    expand = model.get("expand") or {}
    for col in list(x_cols) + list(z_cols):
        _column(header, col, path)

    n = len(rows)
    cell_ids = np.empty(n, dtype=np.int64)
    locations = np.empty((n, 2))
    areas = np.empty(n)
    raw = {col: np.empty(n) for col in set(x_cols) | set(z_cols)}
    idx = {h: i for i, h in enumerate(header)}
    for i, row in enumerate(rows):
        where = f"{path} row {i + 2}"
        if len(row) != len(header):
            raise DataError(f"{where}: expected {len(header)} fields, "
                            f"got {len(row)}")
        try:
            cell_ids[i] = int(row[idx["cell_id"]])
        except ValueError:
            raise DataError(f"{where} column cell_id: not an integer")
        locations[i, 0] = _parse_float(row[idx["coord_x"]], where + " coord_x")
        locations[i, 1] = _parse_float(row[idx["coord_y"]], where + " coord_y")
        areas[i] = _parse_float(row[idx["area"]], where + " area")
        for col in raw:
            raw[col][i] = _parse_float(row[idx[col]], f"{where} column {col}")

    x_terms = _expand_names(x_cols, expand)
    z_terms = _expand_names(z_cols, expand)
    x = np.column_stack([raw[c] ** d for c, d in x_terms]) \
        if x_terms else np.zeros((n, 0))
    z = np.column_stack([raw[c] ** d for c, d in z_terms]) \
        if z_terms else np.zeros((n, 0))
    names = (tuple(c if d == 1 else f"{c}^{d}" for c, d in x_terms),
             tuple(c if d == 1 else f"{c}^{d}" for c, d in z_terms))
    try:
        field = CovariateField(cell_ids, locations, areas, x, z)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}")
    return field, names


def load_survey(path: str, species, response_kind: str) -> SurveyDataset:
    header, rows = _read_rows(path)
    idx = {h: i for i, h in enumerate(header)}
    for req in ("site_id", "cell_id", "area"):
        _column(header, req, path)
    missing = [s for s in species if s not in idx]
    if missing:
        raise DataError(f"{path}: missing species columns {missing}")
    n = len(rows)
    site_ids = np.empty(n, dtype=np.int64)
    cell_ids = np.empty(n, dtype=np.int64)
    areas = np.empty(n)
    responses = np.empty((n, len(species)))
    for i, row in enumerate(rows):
        where = f"{path} row {i + 2}"
        site_ids[i] = int(row[idx["site_id"]])
        cell_ids[i] = int(row[idx["cell_id"]])
        areas[i] = _parse_float(row[idx["area"]], where + " area")
        for j, s in enumerate(species):
            v = _parse_float(row[idx[s]], f"{where} column {s}")
            if not math.isnan(v):
                if response_kind == "binary" and v not in (0.0, 1.0):
                    raise DataError(f"{where} column {s}: binary response "
                                    f"must be 0 or 1, got {row[idx[s]]!r}")
                if response_kind == "count" and (v < 0 or v != int(v)):
                    raise DataError(f"{where} column {s}: count response "
                                    f"must be a non-negative integer")
            responses[i, j] = v
    try:
        return SurveyDataset(site_ids, cell_ids, areas, responses,
                             response_kind)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}")


def load_po(path: str, species) -> PresenceOnlyDataset:
    header, rows = _read_rows(path)
    idx = {h: i for i, h in enumerate(header)}
    _column(header, "species", path)
    _column(header, "cell_id", path)
    label_to_k = {s: k for k, s in enumerate(species, start=1)}
    cells = [[] for _ in species]
    for i, row in enumerate(rows):
        label = row[idx["species"]].strip()
        if label not in label_to_k:
            raise DataError(f"{path} row {i + 2}: unknown species {label!r}")
        cells[label_to_k[label] - 1].append(int(row[idx["cell_id"]]))
    return PresenceOnlyDataset(
        len(species), tuple(np.array(c, dtype=np.int64) for c in cells))


def load_bg(path: str) -> BackgroundSample:
    header, rows = _read_rows(path)
    idx = {h: i for i, h in enumerate(header)}
    _column(header, "cell_id", path)
    _column(header, "weight", path)
    cell_ids = np.array([int(r[idx["cell_id"]]) for r in rows], dtype=np.int64)
    weights = np.array([_parse_float(r[idx["weight"]], f"{path} row {i + 2}")
                        for i, r in enumerate(rows)])
    try:
        return BackgroundSample(cell_ids, weights)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}")


def _simulation_config(config: RunConfig) -> SimulationConfig:
    blk = config.simulate
    try:
        theta = CoefficientSet(
            alpha=blk["alpha"], beta=blk["beta"], gamma=blk["gamma"],
            delta=blk.get("delta", []),
        )
        return SimulationConfig(
            n_cells=int(blk["n_cells"]),
            covariance=np.asarray(blk["covariance"], dtype=float),
            true_theta=theta,
            cell_area=float(blk.get("cell_area", 1.0)),
            rng_seed=config.seed,
            grid_shape=tuple(blk["grid_shape"]) if blk.get("grid_shape") else None,
            n_pa_sites=int(blk.get("n_pa_sites", 500)),
            n_background=int(blk["n_background"])
            if blk.get("n_background") is not None else None,
            response_kind=config.response_kind,
        )
    except KeyError as exc:
        raise ConfigError(f"simulate block missing key {exc}")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid simulate block: {exc}")


def species_labels(config: RunConfig, m: int) -> list:
    if config.species:
        return list(config.species)
    return [f"sp{k}" for k in range(1, m + 1)]


def resolve_interactions(config: RunConfig, labels, z_names) -> tuple:
    """Map configured [species label, z column name] pairs to (k, j)."""
    pairs = []
    for item in config.model.get("interactions") or []:
        try:
            sp, zn = item
        except (TypeError, ValueError):
            raise ConfigError(f"interaction entry must be [species, z_column], "
                              f"got {item!r}")
        sp, zn = str(sp), str(zn)
        if sp not in labels:
            raise ConfigError(f"interaction species {sp!r} not in {labels}")
        if zn not in z_names:
            raise ConfigError(f"interaction column {zn!r} not among bias "
                              f"columns {list(z_names)}")
        pairs.append((labels.index(sp) + 1, z_names.index(zn)))
    return tuple(pairs)


def load_bundle(config: RunConfig):
    """(bundle, meta) from file paths, or from the simulate block."""
    if config.simulate and "covariates" not in config.paths:
        from .simulate import simulate_bundle
        sim = _simulation_config(config)
        bundle = simulate_bundle(sim)
        labels = species_labels(config, sim.m)
        x_names = tuple(f"x{i + 1}" for i in range(sim.true_theta.p))
        z_names = tuple(f"z{i + 1}" for i in range(sim.true_theta.r))
    else:
        field, (x_names, z_names) = load_field(config.paths["covariates"],
                                               config.model)
        if config.species is None:
            raise ConfigError("species labels are required with file inputs")
        labels = list(config.species)
        survey = po = bg = None
        if "pa" in config.paths:
            survey = load_survey(config.paths["pa"], labels,
                                 config.response_kind)
        if "po" in config.paths:
            po = load_po(config.paths["po"], labels)
        if "bg" in config.paths:
            bg = load_bg(config.paths["bg"])
        try:
            bundle = DataBundle(field, survey, po, bg)
        except (ValueError, KeyError) as exc:
            raise DataError(f"inconsistent bundle: {exc}")
    meta = {
        "species": labels,
        "x_names": tuple(x_names),
        "z_names": tuple(z_names),
        "interactions": resolve_interactions(config, labels, list(z_names)),
    }
    return bundle, meta


# ---------------------------------------------------------------------------
# artifacts

def _round17(obj):
    if isinstance(obj, float):
        if math.isnan(obj) or math.isinf(obj):
            return obj
        return float(format(obj, ".17g"))
    if isinstance(obj, dict):
        return {k: _round17(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round17(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return _round17(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _round17(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dump_json(path: str, payload: dict) -> None:
    text = json.dumps(_round17(payload), sort_keys=True, indent=1,
                      allow_nan=True)
    with open(path, "w") as fh:
        fh.write(text + "\n")


def save_fit(path: str, fit_result, meta: dict, provenance: dict) -> None:
    theta = fit_result.theta
    payload = {
        "provenance": provenance,
        "species": list(meta["species"]),
        "x_names": list(meta["x_names"]),
        "z_names": list(meta["z_names"]),
        "coefficients": {
            "alpha": theta.alpha,
            "beta": theta.beta,
            "gamma": theta.gamma,
            "delta": theta.delta,
            "interaction_pairs": [list(pr) for pr in theta.interaction_pairs],
            "interaction_values": theta.interaction_values,
        },
        "standard_errors": fit_result.standard_errors,
        "alpha_anchored": fit_result.alpha_anchored,
        "gamma_estimated": fit_result.gamma_estimated,
        "converged": bool(fit_result.converged),
        "iterations": int(fit_result.iterations),
        "negloglik": fit_result.negloglik,
        "objective": fit_result.objective,
        "gradient_norm": fit_result.gradient_norm,
        "nu": fit_result.nu,
        "message": fit_result.message,
    }
    dump_json(path, payload)


def load_fit(path: str):
    """(theta, payload) from a saved fit artifact."""
    with open(path) as fh:
        payload = json.load(fh)
    c = payload["coefficients"]
    theta = CoefficientSet(
        np.array(c["alpha"], dtype=float),
        np.array(c["beta"], dtype=float),
        np.array(c["gamma"], dtype=float),
        np.array(c["delta"], dtype=float),
        tuple(tuple(pr) for pr in c.get("interaction_pairs", [])),
        np.array(c.get("interaction_values", []), dtype=float),
    )
    return theta, payload


def write_table(path: str, header, rows, provenance: dict) -> None:
    """CSV with a provenance comment line; floats at 17 significant digits."""
    buf = _io.StringIO()
    prov = " ".join(f"{k}={v}" for k, v in sorted(provenance.items()))
    buf.write(f"# {prov}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt_float(v) if isinstance(v, (float, np.floating))
                         else v for v in row])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())
