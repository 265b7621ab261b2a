"""Synthetic data generation: covariate fields, species processes,
thinned presence-only records, and survey datasets.

Simulation is cell-based: the species process draws one Poisson count
per cell from area * exp(alpha_k + beta_k'x), and thinning keeps each
individual independently with probability exp(gamma_k + delta'z).
Covariates are i.i.d. multivariate normal across cells, which is all
the recovery experiments require.

Every stochastic step consumes a named Philox stream keyed off the
config seed, so replicates are reproducible and order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import (BackgroundSample, CoefficientSet, CovariateField,
                   DataBundle, PresenceOnlyDataset, SurveyDataset)
from .errors import DataError, NumericalError
from .likelihood import OVERFLOW_ETA
from .rng import stream

__all__ = [
    "SimulationConfig",
    "simulate_covariates",
    "simulate_species_process",
    "thin_process",
    "make_survey",
    "simulate_bundle",
]


@dataclass(frozen=True)
class SimulationConfig:
    """Recipe for one synthetic dataset.

    ``covariance`` is the joint (p+r) x (p+r) covariance of the
    environmental covariates x and bias covariates z; it must be
    symmetric positive-definite.  ``grid_shape`` fixes the cell layout
    (columns, rows); by default cells are laid out near-square.
    """

    n_cells: int
    covariance: np.ndarray
    true_theta: CoefficientSet
    cell_area: float = 1.0
    rng_seed: int = 0
    grid_shape: tuple = None
    n_pa_sites: int = 500
    n_background: int = None        # None: every cell, weight = its area
    response_kind: str = "binary"

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        dim = self.true_theta.p + self.true_theta.r
        if cov.shape != (dim, dim):
            raise DataError(
                f"covariance must be {dim}x{dim} for p={self.true_theta.p}, "
                f"r={self.true_theta.r}; got {cov.shape}")
        if not np.allclose(cov, cov.T):
            raise DataError("covariance must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise DataError("covariance must be positive-definite")
        if self.n_cells <= 0 or self.cell_area <= 0:
            raise DataError("n_cells and cell_area must be positive")
        object.__setattr__(self, "covariance", cov)
        if self.grid_shape is not None:
            nx, ny = self.grid_shape
            if nx * ny < self.n_cells:
                raise DataError("grid_shape too small for n_cells")
            object.__setattr__(self, "grid_shape", (int(nx), int(ny)))

    @property
    def m(self) -> int:
        return self.true_theta.m


def _grid_locations(n_cells: int, grid_shape, cell_area: float) -> np.ndarray:
    if grid_shape is None:
        nx = int(math.ceil(math.sqrt(n_cells)))
        grid_shape = (nx, int(math.ceil(n_cells / nx)))
    nx, _ = grid_shape
    spacing = math.sqrt(cell_area)
    idx = np.arange(n_cells)
    return np.column_stack([(idx % nx + 0.5) * spacing,
                            (idx // nx + 0.5) * spacing])


def simulate_covariates(config: SimulationConfig) -> CovariateField:
    """Draw the covariate field: cells on a grid, (x, z) i.i.d. normal."""
    rng = stream(config.rng_seed, "covariates")
    p, r = config.true_theta.p, config.true_theta.r
    chol = np.linalg.cholesky(config.covariance)
    draws = rng.standard_normal(size=(config.n_cells, p + r)) @ chol.T
    return CovariateField(
        cell_ids=np.arange(config.n_cells),
        locations=_grid_locations(config.n_cells, config.grid_shape,
                                  config.cell_area),
        areas=np.full(config.n_cells, config.cell_area),
        x=draws[:, :p],
        z=draws[:, p:],
    )


def simulate_species_process(field: CovariateField, theta: CoefficientSet,
                             k: int, rng: np.random.Generator) -> np.ndarray:
    """Per-cell counts of species k: Poisson(area * exp(alpha_k + beta_k'x))."""
    eta = theta.alpha[k - 1] + field.x @ theta.beta[k - 1]
    if np.max(eta, initial=-np.inf) > OVERFLOW_ETA:
        bad = int(field.cell_ids[int(np.argmax(eta))])
        raise NumericalError(
            f"species {k} intensity overflows at cell {bad} (eta={np.max(eta):.3g})")
    lam = field.areas * np.exp(eta)
    return rng.poisson(lam)


def thin_process(counts: np.ndarray, field: CovariateField,
                 theta: CoefficientSet, k: int,
                 rng: np.random.Generator) -> PresenceOnlyDataset:
    """Observed subset of the species process.

    Each individual is kept independently with probability
    b_k = exp(gamma_k + delta'z); a thinning probability above 1 on an
    occupied cell is refused rather than clamped.
    """
    counts = np.asarray(counts)
    log_b = theta.gamma[k - 1] + field.z @ theta.delta
    for (ki, j), value in zip(theta.interaction_pairs, theta.interaction_values):
        if ki == k:
            log_b = log_b + value * field.z[:, j]
    with np.errstate(over="ignore"):
        b = np.exp(log_b)
    occupied = counts > 0
    if np.any(b[occupied] > 1.0):
        bad = int(field.cell_ids[occupied][int(np.argmax(b[occupied]))])
        raise DataError(
            f"thinning probability exceeds 1 at occupied cell {bad}: "
            f"b={float(b[field.rows_of([bad])[0]]):.4g}")
    retained = np.zeros_like(counts)
    retained[occupied] = rng.binomial(counts[occupied], b[occupied])
    cells = np.repeat(field.cell_ids, retained)
    return PresenceOnlyDataset(1, (cells,))


def make_survey(field: CovariateField, counts_per_species, site_cells,
                kind: str = "binary") -> SurveyDataset:
    """Survey dataset over the chosen cells.

    Binary surveys record presence iff the species count in the cell is
    positive; count surveys copy the cell count.  Quadrat areas are the
    cell areas.
    """
    counts = np.atleast_2d(np.asarray(counts_per_species))
    site_cells = np.asarray(site_cells, dtype=np.int64)
    rows = field.rows_of(site_cells)
    values = counts[:, rows].T.astype(float)
    responses = (values > 0).astype(float) if kind == "binary" else values
    return SurveyDataset(np.arange(site_cells.size), site_cells,
                         field.areas[rows], responses, kind)


def simulate_bundle(config: SimulationConfig) -> DataBundle:
    """Full synthetic bundle: field, survey, thinned PO records, background."""
    field = simulate_covariates(config)
    theta = config.true_theta
    m = theta.m
    counts = np.empty((m, config.n_cells), dtype=np.int64)
    po_cells = []
    for k in range(1, m + 1):
        counts[k - 1] = simulate_species_process(
            field, theta, k, stream(config.rng_seed, "species_process", k))
        thinned = thin_process(counts[k - 1], field, theta, k,
                               stream(config.rng_seed, "thinning", k))
        po_cells.append(thinned.cells(1))
    po = PresenceOnlyDataset(m, tuple(po_cells))

    n_sites = min(config.n_pa_sites, config.n_cells)
    site_rows = stream(config.rng_seed, "survey_sites").choice(
        config.n_cells, size=n_sites, replace=False)
    survey = make_survey(field, counts, field.cell_ids[np.sort(site_rows)],
                         config.response_kind)

    if config.n_background is None:
        bg = BackgroundSample(field.cell_ids, field.areas.copy())
    else:
        n_bg = min(config.n_background, config.n_cells)
        rows = stream(config.rng_seed, "background").choice(
            config.n_cells, size=n_bg, replace=False)
        total_area = float(field.areas.sum())
        bg = BackgroundSample(field.cell_ids[np.sort(rows)],
                              np.full(n_bg, total_area / n_bg))
    return DataBundle(field, survey, po, bg)
