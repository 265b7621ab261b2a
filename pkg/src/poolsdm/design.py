"""Block-structured view of the joint model as one large GLM.

The logical design stacks, for every species k, the survey rows
(Bernoulli cloglog or Poisson, weight 1, offset log|A_i|) and one dummy
zero-response row per background point (weighted Poisson).  Presence
records only shift the objective linearly, so they are accumulated once
into the vector ``M``: the joint log-likelihood is

    sum over rows of the row family log-likelihood  +  theta' M.

The design is virtual: per-species covariate blocks are shared views,
never a dense m(n_PA + n_BG) x (m(p+2)+r) matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .data import CoefficientSet, DataBundle
from .errors import DataError
from .likelihood import checked_exp, log1mexp

__all__ = ["BlockDesign", "build_design", "linear_predictor_rows", "design_loglik"]


@dataclass(frozen=True)
class BlockDesign:
    """Materialized covariates, responses, weights, offsets and the
    presence linear term M for the joint GLM."""

    m: int
    p: int
    r: int
    interaction_pairs: tuple
    pa_x1: np.ndarray        # (n_pa, 1+p) columns [1, x]
    pa_offsets: np.ndarray   # (n_pa,) log quadrat areas
    pa_y: np.ndarray         # (n_pa, m), NaN = masked
    pa_kind: str
    bg_x1: np.ndarray        # (n_bg, 1+p)
    bg_z: np.ndarray         # (n_bg, r)
    bg_w: np.ndarray         # (n_bg,)
    M: np.ndarray            # (n_params,) presence-record linear term
    n_po: np.ndarray         # (m,) presence record counts

    @property
    def n_pa(self) -> int:
        return self.pa_x1.shape[0]

    @property
    def n_bg(self) -> int:
        return self.bg_x1.shape[0]

    @property
    def n_rows(self) -> int:
        return self.m * (self.n_pa + self.n_bg)

    @property
    def n_cols(self) -> int:
        return self.m * (self.p + 2) + self.r + len(self.interaction_pairs)

    def interaction_columns(self, k: int) -> list:
        """z columns with a species-k specific slope, in flat-order position."""
        return [j for (ki, j) in self.interaction_pairs if ki == k]


def build_design(bundle: DataBundle, interactions: tuple = ()) -> BlockDesign:
    """Resolve covariates and accumulate the presence term M.

    ``interactions`` lists (species id, z column) pairs whose bias slope
    is allowed to deviate from the shared delta.
    """
    pairs = tuple((int(k), int(j)) for k, j in interactions)
    if len(set(pairs)) != len(pairs):
        raise DataError(f"duplicate interaction pairs: {interactions}")
    field = bundle.field
    m, p, r = bundle.m, field.p, field.r
    for k, j in pairs:
        if not (1 <= k <= m) or not (0 <= j < r):
            raise DataError(f"interaction pair ({k}, {j}) out of range")

    if bundle.survey is not None:
        rows = field.rows_of(bundle.survey.cell_ids)
        pa_x1 = np.column_stack([np.ones(rows.size), field.x[rows]])
        pa_offsets = np.log(bundle.survey.areas)
        pa_y = bundle.survey.responses
        pa_kind = bundle.survey.response_kind
    else:
        pa_x1 = np.zeros((0, 1 + p))
        pa_offsets = np.zeros(0)
        pa_y = np.zeros((0, m))
        pa_kind = "binary"

    if bundle.bg is not None:
        rows = field.rows_of(bundle.bg.cell_ids)
        bg_x1 = np.column_stack([np.ones(rows.size), field.x[rows]])
        bg_z = field.z[rows]
        bg_w = bundle.bg.weights
    else:
        bg_x1 = np.zeros((0, 1 + p))
        bg_z = np.zeros((0, r))
        bg_w = np.zeros(0)

    d = p + 2
    n_params = m * d + r + len(pairs)
    M = np.zeros(n_params)
    n_po = np.zeros(m, dtype=np.int64)
    if bundle.po is not None:
        for k in range(1, m + 1):
            cells = bundle.po.cells(k)
            n_po[k - 1] = cells.size
            if not cells.size:
                continue
            prow = field.rows_of(cells)
            base = (k - 1) * d
            M[base] = cells.size
            M[base + 1:base + 1 + p] = field.x[prow].sum(axis=0)
            M[base + 1 + p] = cells.size
            zsum = field.z[prow].sum(axis=0)
            M[m * d:m * d + r] += zsum
            for i, (ki, j) in enumerate(pairs):
                if ki == k:
                    M[m * d + r + i] = zsum[j]

    return BlockDesign(m, p, r, pairs, pa_x1, pa_offsets, pa_y, pa_kind,
                       bg_x1, bg_z, bg_w, M, n_po)


def _species_eta(design: BlockDesign, theta: CoefficientSet, k: int):
    """(pa_eta, bg_eta) for species k; offsets included in pa_eta."""
    i = k - 1
    coef = np.concatenate([[theta.alpha[i]], theta.beta[i]])
    pa_eta = design.pa_x1 @ coef + design.pa_offsets
    bg_eta = design.bg_x1 @ coef
    if design.n_bg:
        bg_eta = bg_eta + theta.gamma[i] + design.bg_z @ theta.delta
        for (ki, j), value in zip(theta.interaction_pairs,
                                  theta.interaction_values):
            if ki == k:
                bg_eta = bg_eta + value * design.bg_z[:, j]
    return pa_eta, bg_eta


def linear_predictor_rows(design: BlockDesign, theta: CoefficientSet) -> np.ndarray:
    """Per-row linear predictor, species-major: for each k the PA rows
    (with area offsets) then the BG rows (with bias terms)."""
    if theta.interaction_pairs != design.interaction_pairs:
        raise DataError("theta and design disagree on interaction structure")
    parts = []
    for k in range(1, design.m + 1):
        pa_eta, bg_eta = _species_eta(design, theta, k)
        parts.append(pa_eta)
        parts.append(bg_eta)
    return np.concatenate(parts) if parts else np.zeros(0)


def pa_row_loglik(y: np.ndarray, mu: np.ndarray, kind: str) -> np.ndarray:
    """Per-row survey log-likelihood at mean mu (NaN-masked rows give 0)."""
    obs = ~np.isnan(y)
    y0 = np.where(obs, y, 0.0)
    if kind == "binary":
        terms = np.where(y0 > 0, log1mexp(mu), -mu)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            logmu = np.where(mu > 0, np.log(np.where(mu > 0, mu, 1.0)), -np.inf)
        terms = np.where(y0 > 0, y0 * logmu, 0.0) - mu - gammaln(y0 + 1)
    return np.where(obs, terms, 0.0)


def design_loglik(design: BlockDesign, theta: CoefficientSet,
                  skip_bg_species=()) -> float:
    """Joint log-likelihood assembled from design rows plus theta'M.

    Matches the likelihood-module value to floating-point roundoff.
    ``skip_bg_species`` drops the background rows of the named species
    (used by the solver for species whose bias component is not fit).
    """
    total = 0.0
    for k in range(1, design.m + 1):
        pa_eta, bg_eta = _species_eta(design, theta, k)
        if design.n_pa:
            y = design.pa_y[:, k - 1]
            obs = ~np.isnan(y)
            if obs.any():
                mu = checked_exp(pa_eta[obs], f"design pa species {k}")
                total += float(pa_row_loglik(y[obs], mu, design.pa_kind).sum())
        if design.n_bg and k not in skip_bg_species:
            total -= float(design.bg_w @ checked_exp(
                bg_eta, f"design bg species {k}"))
    # presence records enter only through the linear term
    flat = theta.flatten()
    finite = np.isfinite(flat)
    total += float(flat[finite] @ design.M[finite])
    return total
