"""Predictions, predictive metrics, and the method-comparison harness.

Six fitting strategies are compared on held-out survey data:

* ``PA_ONLY``       -- species k's survey rows alone;
* ``PO_UNADJUSTED`` -- species k's presence-only data, no bias terms
  (the fitted presence-only intensity is used as the species intensity);
* ``PO_ADJUSTED``   -- presence-only data with bias covariates, single
  species (the intensity scale stays unidentified);
* ``PA_PO_SINGLE``  -- survey + presence-only data for species k;
* ``POOLED_ALL``    -- everything for every species, shared bias slopes;
* ``TGB_ALL``       -- presence-only fit against a background restricted
  to cells where any species was sighted, no bias terms.

Predictive log-likelihood needs an absolute intensity, so it is
reported only when the fitted intercept is anchored (survey data was
seen, or the model has no bias component to confound it); AUC depends
only on the ordering of predictions and is always reported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import BackgroundSample, DataBundle, FitResult
from .errors import DataError, PoolsdmError
from .likelihood import pa_loglik
from .resample import (BlockPartition, block_cv_folds, downsample_pa,
                       split_bundle)
from .solver import SolverOptions, fit

__all__ = [
    "METHOD_KINDS",
    "MethodSpec",
    "IntensityPrediction",
    "predict_intensity",
    "presence_probability",
    "predictive_loglik",
    "auc",
    "relative_sampling_effort",
    "tgb_background",
    "MetricRow",
    "run_comparison",
]

METHOD_KINDS = ("PA_ONLY", "PO_UNADJUSTED", "PO_ADJUSTED", "PA_PO_SINGLE",
                "POOLED_ALL", "TGB_ALL")
_SINGLE_SPECIES_KINDS = ("PA_ONLY", "PO_UNADJUSTED", "PO_ADJUSTED",
                         "PA_PO_SINGLE")
_PA_FREE_KINDS = ("PO_UNADJUSTED", "PO_ADJUSTED", "TGB_ALL")


@dataclass(frozen=True)
class MethodSpec:
    """One comparison strategy; single-species kinds with species=None
    are expanded over every species under study."""

    kind: str
    species: int = None

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise DataError(f"unknown method kind {self.kind!r}")
        if self.species is not None and self.species < 1:
            raise DataError(f"invalid species id {self.species}")


@dataclass(frozen=True)
class IntensityPrediction:
    """Per-cell fitted intensity and observation probability.

    ``relative_only`` marks species whose intensity is identified only
    up to a constant factor (no survey data anchored the intercept).
    """

    intensity: np.ndarray
    bias: np.ndarray
    relative_only: bool


def predict_intensity(fit_result: FitResult, field, k: int
                      ) -> IntensityPrediction:
    theta = fit_result.theta
    lam = np.exp(theta.alpha[k - 1] + field.x @ theta.beta[k - 1])
    log_b = theta.gamma[k - 1] + field.z @ theta.delta
    for (ki, j), value in zip(theta.interaction_pairs, theta.interaction_values):
        if ki == k:
            log_b = log_b + value * field.z[:, j]
    with np.errstate(over="ignore"):
        bias = np.exp(log_b)
    return IntensityPrediction(lam, bias,
                               not bool(fit_result.alpha_anchored[k - 1]))


def presence_probability(fit_result: FitResult, field, k: int,
                         area: float = 1.0) -> np.ndarray:
    """P(count > 0) in a quadrat of the given area: 1 - exp(-area * intensity)."""
    lam = predict_intensity(fit_result, field, k).intensity
    return -np.expm1(-area * lam)


def predictive_loglik(fit_result: FitResult, heldout_survey, field, k: int
                      ) -> float:
    """Survey log-likelihood of held-out rows at the fitted coefficients."""
    return pa_loglik(fit_result.theta, heldout_survey, field, k)


def auc(scores, labels) -> float:
    """Area under the ROC curve: probability a random positive outranks a
    random negative, ties counted half (Mann-Whitney form)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels > 0
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC undefined: needs at least one positive and one "
                        "negative label")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def relative_sampling_effort(fit_result: FitResult) -> np.ndarray:
    """rho_k = exp(gamma_k) / min_k' exp(gamma_k'), requiring every
    bias intercept to have been estimated."""
    gamma = fit_result.theta.gamma
    if not fit_result.gamma_estimated.all() or not np.all(np.isfinite(gamma)):
        missing = [k + 1 for k in range(gamma.size)
                   if not fit_result.gamma_estimated[k]]
        raise DataError(f"bias intercept not estimated for species {missing}")
    effort = np.exp(gamma)
    return effort / effort.min()


def tgb_background(po, field, partition: BlockPartition = None
                   ) -> BackgroundSample:
    """Background restricted to where the target group was sighted.

    By default the granularity is the cell itself: every cell holding at
    least one presence record of any species becomes a background point
    with its own area as weight.  Passing a partition coarsens the
    granularity to whole blocks.
    """
    sighted_rows = set()
    for k in range(1, po.n_species + 1):
        cells = po.cells(k)
        if cells.size:
            sighted_rows.update(field.rows_of(cells).tolist())
    if not sighted_rows:
        raise DataError("target-group background undefined: no species was "
                        "sighted anywhere")
    rows = np.array(sorted(sighted_rows), dtype=np.int64)
    if partition is not None:
        blocks = np.unique(partition.block_of_cell[rows])
        rows = np.nonzero(np.isin(partition.block_of_cell, blocks))[0]
    return BackgroundSample(field.cell_ids[rows], field.areas[rows])


@dataclass(frozen=True)
class MetricRow:
    """One cell of the comparison table."""

    method: str
    species: int
    downsample: int
    mean_loglik: float       # NaN when only relative intensities are available
    mean_auc: float
    n_folds: int
    note: str = ""


def _method_training_bundle(kind: str, k: int, train: DataBundle,
                            level: int, seed: int):
    """(bundle, include_bias, species index within bundle) for one cell
    of the comparison grid; None when the cell cannot be fit."""
    def thin_pa(bundle, species, n_keep):
        if bundle.survey is None:
            return bundle
        avail = int(bundle.survey.observed_mask(species).sum())
        survey = downsample_pa(bundle.survey, species, min(n_keep, avail), seed)
        return DataBundle(bundle.field, survey, bundle.po, bundle.bg)

    if kind == "PA_ONLY":
        sub = train.species_subset([k])
        sub = DataBundle(sub.field, sub.survey)
        sub = thin_pa(sub, 1, level)
        if not sub.survey.observed_mask(1).any():
            return None
        return sub, True, 1
    if kind == "PO_UNADJUSTED":
        sub = train.species_subset([k])
        if sub.po is None or sub.po.n_records(1) == 0:
            return None
        return DataBundle(sub.field, None, sub.po, sub.bg), False, 1
    if kind == "PO_ADJUSTED":
        sub = train.species_subset([k])
        if sub.po is None or sub.po.n_records(1) == 0:
            return None
        return DataBundle(sub.field, None, sub.po, sub.bg), True, 1
    if kind == "PA_PO_SINGLE":
        sub = train.species_subset([k])
        sub = thin_pa(sub, 1, level)
        if sub.po is None or sub.po.n_records(1) == 0:
            return None
        if not sub.survey.observed_mask(1).any():
            sub = DataBundle(sub.field, None, sub.po, sub.bg)
        return sub, True, 1
    if kind == "POOLED_ALL":
        pooled = thin_pa(train, k, level)
        if pooled.survey is not None \
                and not pooled.survey.observed_mask(k).any() \
                and (pooled.po is None or pooled.po.n_records(k) == 0):
            return None
        return pooled, True, k
    if kind == "TGB_ALL":
        if train.po is None or train.po.n_records(k) == 0:
            return None
        bg = tgb_background(train.po, train.field)
        sub = train.species_subset([k])
        return DataBundle(sub.field, None, sub.po, bg), False, 1
    raise DataError(f"unknown method kind {kind!r}")


def run_comparison(bundle: DataBundle, methods, partition: BlockPartition,
                   n_folds: int, downsample_levels, seed: int,
                   options: SolverOptions = SolverOptions()) -> list:
    """Cross-validated metric table over method x species x downsample level.

    Within each fold the training data are refit per cell of the grid
    (species k's survey rows downsampled to the requested level) and
    scored on the held-out survey rows.  Metrics are averaged over the
    folds in which they were defined.
    """
    fold_of_block = block_cv_folds(partition, n_folds, seed)
    specs = []
    for item in methods:
        spec = item if isinstance(item, MethodSpec) else MethodSpec(str(item))
        if spec.kind in _SINGLE_SPECIES_KINDS + ("POOLED_ALL", "TGB_ALL"):
            targets = [spec.species] if spec.species else \
                range(1, bundle.m + 1)
            specs.extend((spec.kind, int(t)) for t in targets)
    specs = sorted(set(specs), key=lambda s: (METHOD_KINDS.index(s[0]), s[1]))
    levels = list(downsample_levels)

    cells = {}
    for fold in range(n_folds):
        train, test = split_bundle(bundle, partition, fold_of_block, fold)
        if test.survey is None or train.survey is None:
            continue
        pa_free_cache = {}
        for kind, k in specs:
            for level in levels:
                key = (kind, k, level)
                try:
                    if kind in _PA_FREE_KINDS:
                        if (kind, k) not in pa_free_cache:
                            pa_free_cache[(kind, k)] = _fit_cell(
                                kind, k, train, level, seed, options)
                        fitted = pa_free_cache[(kind, k)]
                    else:
                        fitted = _fit_cell(kind, k, train, level, seed, options)
                except PoolsdmError as exc:
                    cells.setdefault(key, []).append(
                        (np.nan, np.nan, f"fold {fold}: {exc}"))
                    continue
                if fitted is None:
                    cells.setdefault(key, []).append(
                        (np.nan, np.nan, f"fold {fold}: no training data"))
                    continue
                res, k_in = fitted
                ll, a, note = _score(res, k_in, k, test, fold)
                cells.setdefault(key, []).append((ll, a, note))

    rows = []
    for (kind, k), level in ((s, lv) for s in specs for lv in levels):
        vals = cells.get((kind, k, level), [])
        lls = np.array([v[0] for v in vals], dtype=float)
        aucs = np.array([v[1] for v in vals], dtype=float)
        notes = "; ".join(v[2] for v in vals if v[2])
        rows.append(MetricRow(
            method=kind, species=k, downsample=level,
            mean_loglik=float(np.nanmean(lls)) if np.isfinite(lls).any()
            else float("nan"),
            mean_auc=float(np.nanmean(aucs)) if np.isfinite(aucs).any()
            else float("nan"),
            n_folds=int(np.isfinite(aucs).sum()),
            note=notes,
        ))
    return rows


def _fit_cell(kind, k, train, level, seed, options):
    prepared = _method_training_bundle(kind, k, train, level, seed)
    if prepared is None:
        return None
    cell_bundle, include_bias, k_in = prepared
    res = fit(cell_bundle, options, include_bias=include_bias)
    return res, k_in


def _score(res: FitResult, k_in: int, k: int, test: DataBundle, fold: int):
    """Held-out (loglik, auc, note) for one fitted cell."""
    test_survey = test.survey
    field = test.field
    if res.theta.m == 1 and k_in == 1:
        test_survey = test.species_subset([k]).survey
        k_eval = 1
    else:
        k_eval = k
    mask = test_survey.observed_mask(k_eval)
    note = ""
    if not mask.any():
        return np.nan, np.nan, f"fold {fold}: no held-out rows"
    y = test_survey.responses[mask, k_eval - 1]
    rows = field.rows_of(test_survey.cell_ids[mask])
    theta = res.theta
    mu = test_survey.areas[mask] * np.exp(
        theta.alpha[k_eval - 1] + field.x[rows] @ theta.beta[k_eval - 1])
    if res.alpha_anchored[k_eval - 1]:
        ll = predictive_loglik(res, test_survey, field, k_eval)
    else:
        ll = np.nan
        note = f"fold {fold}: relative intensity only"
    try:
        a = auc(mu, y > 0)
    except DataError:
        a = np.nan
        note = (note + "; " if note else "") + f"fold {fold}: single-class holdout"
    return ll, a, note
