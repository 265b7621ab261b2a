"""Command-line workflows: simulate, fit, predict, bootstrap, cv, compare.

All subcommands take --config (YAML); --seed, --threads, --out and
--deterministic override the corresponding config keys.  Artifacts are
deterministic given the seed and embed the config hash for provenance.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
failure; failures also emit a machine-readable JSON record on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import io as pio
from .data import DataBundle
from .errors import ConfigError, DataError, NumericalError
from .evaluate import (METHOD_KINDS, predict_intensity, predictive_loglik,
                       auc as compute_auc, run_comparison)
from .resample import (block_bootstrap, block_cv_folds, make_partition,
                       split_bundle)
from .simulate import simulate_bundle
from .solver import fit as fit_model

__all__ = ["main"]


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poolsdm",
        description="Joint thinned-Poisson-process species distribution "
                    "models pooling presence-only and survey data.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, hlp in [
        ("simulate", "generate a synthetic dataset"),
        ("fit", "fit the joint model and write coefficients"),
        ("predict", "write per-cell intensity and bias predictions"),
        ("bootstrap", "spatial block bootstrap percentile intervals"),
        ("cv", "block cross-validated predictive metrics"),
        ("compare", "method-comparison table over a downsampling grid"),
    ]:
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--threads", type=int, help="worker threads")
        p.add_argument("--out", help="override output directory")
        p.add_argument("--deterministic", action="store_true",
                       help="force bit-reproducible reductions")
        if name == "predict":
            p.add_argument("--fit", dest="fit_file",
                           help="reuse a saved coefficients.json instead of refitting")
    return parser


def _fail(code: int, kind: str, exc: Exception) -> int:
    record = {"error": kind, "message": str(exc), "exit_code": code}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    env_threads = os.environ.get("POOLSDM_THREADS")
    threads = args.threads
    if threads is None and env_threads:
        try:
            threads = int(env_threads)
        except ValueError:
            return _fail(2, "config", ConfigError(
                f"POOLSDM_THREADS={env_threads!r} is not an integer"))
    overrides = {
        "seed": args.seed,
        "threads": threads,
        "output": args.out,
        "deterministic": True if args.deterministic else None,
    }
    try:
        config = pio.load_config(args.config, overrides)
        os.makedirs(config.output, exist_ok=True)
        handler = {
            "simulate": cmd_simulate,
            "fit": cmd_fit,
            "predict": cmd_predict,
            "bootstrap": cmd_bootstrap,
            "cv": cmd_cv,
            "compare": cmd_compare,
        }[args.command]
        handler(config, args)
        return 0
    except ConfigError as exc:
        return _fail(2, "config", exc)
    except (DataError, FileNotFoundError, KeyError) as exc:
        return _fail(3, "data", exc)
    except NumericalError as exc:
        return _fail(4, "numerical", exc)


def _provenance(config: pio.RunConfig, **extra) -> dict:
    prov = {"config_hash": pio.config_hash(config), "seed": config.seed}
    prov.update(extra)
    return prov


def _out(config: pio.RunConfig, name: str) -> str:
    return os.path.join(config.output, name)


def coefficient_names(meta: dict, theta) -> list:
    labels = list(meta["species"])
    x_names = list(meta["x_names"])
    z_names = list(meta["z_names"])
    names = []
    for label in labels:
        names.append(f"alpha[{label}]")
        names.extend(f"beta[{label},{x}]" for x in x_names)
        names.append(f"gamma[{label}]")
    names.extend(f"delta[{z}]" for z in z_names)
    for k, j in theta.interaction_pairs:
        names.append(f"delta[{labels[k - 1]},{z_names[j]}]")
    return names


def _partition_from_config(config: pio.RunConfig, bundle: DataBundle):
    sides = config.resample.get("block_side", [1.0, 1.0])
    if np.isscalar(sides):
        sides = [sides, sides]
    return make_partition(bundle.field, float(sides[0]), float(sides[1]))


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(config: pio.RunConfig, args) -> None:
    if not config.simulate:
        raise ConfigError("simulate command needs a simulate block")
    sim = pio._simulation_config(config)
    bundle = simulate_bundle(sim)
    labels = pio.species_labels(config, sim.m)
    prov = _provenance(config)
    field = bundle.field
    p, r = field.p, field.r
    x_names = [f"x{i + 1}" for i in range(p)]
    z_names = [f"z{i + 1}" for i in range(r)]

    pio.write_table(
        _out(config, "grid.csv"),
        ["cell_id", "coord_x", "coord_y", "area"] + x_names + z_names,
        [[int(field.cell_ids[i]), float(field.locations[i, 0]),
          float(field.locations[i, 1]), float(field.areas[i])]
         + [float(v) for v in field.x[i]] + [float(v) for v in field.z[i]]
         for i in range(field.n_cells)],
        prov)
    survey = bundle.survey
    pio.write_table(
        _out(config, "pa.csv"),
        ["site_id", "cell_id", "area"] + labels,
        [[int(survey.site_ids[i]), int(survey.cell_ids[i]),
          float(survey.areas[i])] + [float(v) for v in survey.responses[i]]
         for i in range(survey.n_sites)],
        prov)
    po_rows = []
    for k in range(1, bundle.po.n_species + 1):
        po_rows.extend([labels[k - 1], int(c)] for c in bundle.po.cells(k))
    pio.write_table(_out(config, "po.csv"), ["species", "cell_id"], po_rows, prov)
    pio.write_table(
        _out(config, "bg.csv"), ["cell_id", "weight"],
        [[int(c), float(w)] for c, w in zip(bundle.bg.cell_ids,
                                            bundle.bg.weights)],
        prov)
    pio.dump_json(_out(config, "truth.json"), {
        "provenance": prov,
        "species": labels,
        "coefficients": {
            "alpha": sim.true_theta.alpha,
            "beta": sim.true_theta.beta,
            "gamma": sim.true_theta.gamma,
            "delta": sim.true_theta.delta,
        },
    })
    # ready-to-fit config for the files just written
    follow_up = {
        "seed": config.seed,
        "output": config.output,
        "species": labels,
        "response_kind": config.response_kind,
        "covariates": "grid.csv",
        "pa": "pa.csv",
        "po": "po.csv",
        "bg": "bg.csv",
        "model": {"x": x_names, "z": z_names},
        "solver": dict(config.raw.get("solver") or {}),
        "resample": dict(config.raw.get("resample") or {}),
    }
    with open(_out(config, "simulated_config.yaml"), "w") as fh:
        import yaml
        yaml.safe_dump(follow_up, fh, sort_keys=True)


def cmd_fit(config: pio.RunConfig, args) -> None:
    bundle, meta = pio.load_bundle(config)
    res = fit_model(bundle, config.solver, interactions=meta["interactions"])
    pio.save_fit(_out(config, "coefficients.json"), res, meta,
                 _provenance(config))


def cmd_predict(config: pio.RunConfig, args) -> None:
    bundle, meta = pio.load_bundle(config)
    fit_file = getattr(args, "fit_file", None)
    if fit_file:
        theta, payload = pio.load_fit(fit_file)
        anchored = np.array(payload["alpha_anchored"], dtype=bool)

        class _Shim:
            pass
        res = _Shim()
        res.theta = theta
        res.alpha_anchored = anchored
    else:
        res = fit_model(bundle, config.solver,
                        interactions=meta["interactions"])
    labels = meta["species"]
    field = bundle.field
    preds = [predict_intensity(res, field, k)
             for k in range(1, len(labels) + 1)]
    header = ["cell_id"]
    for label in labels:
        header += [f"intensity[{label}]", f"bias[{label}]"]
    rows = []
    for i in range(field.n_cells):
        row = [int(field.cell_ids[i])]
        for pred in preds:
            row += [float(pred.intensity[i]), float(pred.bias[i])]
        rows.append(row)
    pio.write_table(_out(config, "predictions.csv"), header, rows,
                    _provenance(config))
    pio.dump_json(_out(config, "predictions_meta.json"), {
        "provenance": _provenance(config),
        "relative_only": {label: bool(pred.relative_only)
                          for label, pred in zip(labels, preds)},
    })


def cmd_bootstrap(config: pio.RunConfig, args) -> None:
    bundle, meta = pio.load_bundle(config)
    partition = _partition_from_config(config, bundle)
    replicates = int(config.resample.get("bootstrap_replicates", 400))
    full = fit_model(bundle, config.solver, interactions=meta["interactions"])
    boot = block_bootstrap(bundle, partition, replicates, config.solver,
                           config.seed, interactions=meta["interactions"])
    names = coefficient_names(meta, full.theta)
    est = full.theta.flatten()
    rows = [[names[i], float(est[i]), float(boot.lower[i]),
             float(boot.upper[i])] for i in range(len(names))]
    pio.write_table(
        _out(config, "bootstrap.csv"),
        ["coefficient", "estimate", "lower_2.5", "upper_97.5"], rows,
        _provenance(config, replicates=boot.n_requested,
                    completed=boot.n_completed, failed=boot.n_failed,
                    blocks=partition.n_blocks))


def cmd_cv(config: pio.RunConfig, args) -> None:
    bundle, meta = pio.load_bundle(config)
    partition = _partition_from_config(config, bundle)
    n_folds = int(config.resample.get("cv_folds", 10))
    fold_of_block = block_cv_folds(partition, n_folds, config.seed)
    labels = meta["species"]
    rows = []
    sums = {}
    for fold in range(n_folds):
        train, test = split_bundle(bundle, partition, fold_of_block, fold)
        if train.survey is None or test.survey is None:
            continue
        res = fit_model(train, config.solver,
                        interactions=meta["interactions"])
        for k, label in enumerate(labels, start=1):
            mask = test.survey.observed_mask(k)
            if not mask.any():
                continue
            ll = predictive_loglik(res, test.survey, test.field, k) \
                if res.alpha_anchored[k - 1] else float("nan")
            y = test.survey.responses[mask, k - 1]
            frows = test.field.rows_of(test.survey.cell_ids[mask])
            mu = test.survey.areas[mask] * np.exp(
                res.theta.alpha[k - 1]
                + test.field.x[frows] @ res.theta.beta[k - 1])
            try:
                a = compute_auc(mu, y > 0)
            except DataError:
                a = float("nan")
            rows.append([label, fold, float(ll), float(a)])
            acc = sums.setdefault(label, [[], []])
            acc[0].append(ll)
            acc[1].append(a)
    pio.write_table(_out(config, "cv_metrics.csv"),
                    ["species", "fold", "heldout_loglik", "auc"], rows,
                    _provenance(config, folds=n_folds,
                                blocks=partition.n_blocks))
    summary = [[label,
                float(np.nanmean(v[0])) if np.isfinite(v[0]).any() else float("nan"),
                float(np.nanmean(v[1])) if np.isfinite(v[1]).any() else float("nan")]
               for label, v in ((lbl, (np.array(s[0]), np.array(s[1])))
                                for lbl, s in sorted(sums.items()))]
    pio.write_table(_out(config, "cv_summary.csv"),
                    ["species", "mean_heldout_loglik", "mean_auc"], summary,
                    _provenance(config, folds=n_folds))


def cmd_compare(config: pio.RunConfig, args) -> None:
    bundle, meta = pio.load_bundle(config)
    partition = _partition_from_config(config, bundle)
    n_folds = int(config.resample.get("cv_folds", 10))
    levels = [int(v) for v in
              config.resample.get("downsample_levels", [1000])]
    methods = config.compare.get("methods") or list(METHOD_KINDS)
    for mname in methods:
        if mname not in METHOD_KINDS:
            raise ConfigError(f"unknown comparison method {mname!r}; "
                              f"choose from {list(METHOD_KINDS)}")
    table = run_comparison(bundle, methods, partition, n_folds, levels,
                           config.seed, config.solver)
    labels = meta["species"]
    best = {}
    for row in table:
        key = (row.species, row.downsample)
        if np.isfinite(row.mean_auc):
            best[key] = max(best.get(key, -np.inf), row.mean_auc)
    out_rows = []
    for row in table:
        key = (row.species, row.downsample)
        within = (np.isfinite(row.mean_auc) and key in best
                  and row.mean_auc >= best[key] - 0.01)
        out_rows.append([labels[row.species - 1], row.downsample, row.method,
                         float(row.mean_loglik), float(row.mean_auc),
                         row.n_folds, str(bool(within)).lower(), row.note])
    pio.write_table(
        _out(config, "comparison.csv"),
        ["species", "downsample", "method", "mean_heldout_loglik",
         "mean_auc", "n_folds", "within_0.01_of_best", "note"],
        out_rows, _provenance(config, folds=n_folds, blocks=partition.n_blocks))
