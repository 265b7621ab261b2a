"""Core domain types for multispecies point-process models.

Conventions used throughout the package:

* Species are identified by integer ids ``1..m``.  Arrays indexed by
  species use position ``k - 1`` for species ``k``.
* Environmental covariates ``x`` (length ``p``) drive the species
  intensity; bias covariates ``z`` (length ``r``) drive the observation
  probability of presence-only records.  Covariate columns are plain
  0-based array indices.
* All types are immutable after construction (arrays are marked
  read-only), so they can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "CovariateField",
    "SurveyDataset",
    "PresenceOnlyDataset",
    "BackgroundSample",
    "CoefficientSet",
    "InformationBlocks",
    "CovarianceBlocks",
    "FitResult",
    "DataBundle",
    "linear_predictor_species",
    "linear_predictor_bias",
]


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a)
    out.flags.writeable = False
    return out


def _as_float(a, name: str, ndim: int) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class CovariateField:
    """Discretized study domain: one row per cell.

    Each cell carries a 2-D location, a positive area, environmental
    covariates ``x`` (length p) and bias covariates ``z`` (length r).
    Presence records, survey sites and background points all resolve to
    cells of this field.
    """

    cell_ids: np.ndarray          # (n,) int
    locations: np.ndarray         # (n, 2) float
    areas: np.ndarray             # (n,) float, > 0
    x: np.ndarray                 # (n, p)
    z: np.ndarray                 # (n, r)
    _row_of: Mapping[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cell_ids = np.asarray(self.cell_ids, dtype=np.int64)
        if cell_ids.ndim != 1:
            raise ValueError("cell_ids must be 1-dimensional")
        n = cell_ids.size
        locations = _as_float(self.locations, "locations", 2)
        if locations.shape != (n, 2):
            raise ValueError(f"locations must have shape ({n}, 2)")
        areas = _as_float(self.areas, "areas", 1)
        if areas.shape != (n,):
            raise ValueError(f"areas must have shape ({n},)")
        if np.any(areas <= 0) or not np.all(np.isfinite(areas)):
            bad = int(cell_ids[np.argmin(areas)])
            raise ValueError(f"cell areas must be positive and finite (cell {bad})")
        x = _as_float(self.x, "x", 2)
        z = _as_float(self.z, "z", 2)
        if x.shape[0] != n or z.shape[0] != n:
            raise ValueError("x and z must have one row per cell")
        if len(np.unique(cell_ids)) != n:
            raise ValueError("cell_ids must be unique")
        object.__setattr__(self, "cell_ids", _freeze(cell_ids))
        object.__setattr__(self, "locations", _freeze(locations))
        object.__setattr__(self, "areas", _freeze(areas))
        object.__setattr__(self, "x", _freeze(x))
        object.__setattr__(self, "z", _freeze(z))
        object.__setattr__(
            self, "_row_of", {int(c): i for i, c in enumerate(cell_ids)}
        )

    @property
    def n_cells(self) -> int:
        return self.cell_ids.size

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def r(self) -> int:
        return self.z.shape[1]

    def rows_of(self, cell_ids) -> np.ndarray:
        """Row indices for the given cell ids; raises KeyError naming the first unknown id."""
        rows = np.empty(len(cell_ids), dtype=np.int64)
        lookup = self._row_of
        for i, c in enumerate(np.asarray(cell_ids, dtype=np.int64)):
            try:
                rows[i] = lookup[int(c)]
            except KeyError:
                raise KeyError(f"unknown cell_id {int(c)}") from None
        return rows


@dataclass(frozen=True)
class SurveyDataset:
    """Systematic survey observations at quadrats.

    ``responses`` has one column per species; NaN marks a missing
    (masked) response so downsampling experiments never need to copy the
    dataset.  ``response_kind`` is "binary" (presence/absence) or
    "count".
    """

    site_ids: np.ndarray          # (n_sites,) int
    cell_ids: np.ndarray          # (n_sites,) int
    areas: np.ndarray             # (n_sites,) float quadrat areas |A_i|
    responses: np.ndarray         # (n_sites, m) float, NaN = missing
    response_kind: str            # "binary" | "count"

    def __post_init__(self):
        site_ids = np.asarray(self.site_ids, dtype=np.int64)
        cell_ids = np.asarray(self.cell_ids, dtype=np.int64)
        areas = _as_float(self.areas, "areas", 1)
        responses = _as_float(self.responses, "responses", 2)
        n = site_ids.size
        if cell_ids.shape != (n,) or areas.shape != (n,) or responses.shape[0] != n:
            raise ValueError("survey arrays must agree on the number of sites")
        if np.any(areas <= 0):
            raise ValueError("quadrat areas must be positive")
        if self.response_kind not in ("binary", "count"):
            raise ValueError(f"unknown response_kind {self.response_kind!r}")
        obs = responses[~np.isnan(responses)]
        if self.response_kind == "binary":
            if not np.all(np.isin(obs, (0.0, 1.0))):
                raise ValueError("binary responses must be 0 or 1")
        else:
            if np.any(obs < 0) or np.any(obs != np.floor(obs)):
                raise ValueError("count responses must be non-negative integers")
        object.__setattr__(self, "site_ids", _freeze(site_ids))
        object.__setattr__(self, "cell_ids", _freeze(cell_ids))
        object.__setattr__(self, "areas", _freeze(areas))
        object.__setattr__(self, "responses", _freeze(responses))

    @property
    def n_sites(self) -> int:
        return self.site_ids.size

    @property
    def n_species(self) -> int:
        return self.responses.shape[1]

    def observed_mask(self, k: int) -> np.ndarray:
        """Boolean mask of sites with a non-missing response for species k."""
        return ~np.isnan(self.responses[:, k - 1])

    def with_mask(self, k: int, keep: np.ndarray) -> "SurveyDataset":
        """Copy with species-k responses masked (NaN) wherever ``keep`` is False."""
        responses = np.array(self.responses)
        responses[~keep, k - 1] = np.nan
        return SurveyDataset(self.site_ids, self.cell_ids, self.areas,
                             responses, self.response_kind)


@dataclass(frozen=True)
class PresenceOnlyDataset:
    """Opportunistic presence records, grouped by species id 1..m."""

    n_species: int
    cells_by_species: tuple            # tuple of (n_k,) int arrays, index k-1
    ids_by_species: tuple = None       # record ids, parallel to cells

    def __post_init__(self):
        if len(self.cells_by_species) != self.n_species:
            raise ValueError("need one record array per species")
        cells = tuple(_freeze(np.asarray(c, dtype=np.int64))
                      for c in self.cells_by_species)
        if self.ids_by_species is None:
            ids = tuple(_freeze(np.arange(c.size, dtype=np.int64)) for c in cells)
        else:
            ids = tuple(_freeze(np.asarray(i, dtype=np.int64))
                        for i in self.ids_by_species)
            for c, i in zip(cells, ids):
                if c.shape != i.shape:
                    raise ValueError("record ids must parallel record cells")
        object.__setattr__(self, "cells_by_species", cells)
        object.__setattr__(self, "ids_by_species", ids)

    def cells(self, k: int) -> np.ndarray:
        return self.cells_by_species[k - 1]

    def n_records(self, k: int) -> int:
        return self.cells_by_species[k - 1].size

    def validate_against(self, field: CovariateField) -> None:
        for k in range(1, self.n_species + 1):
            field.rows_of(self.cells(k))


@dataclass(frozen=True)
class BackgroundSample:
    """Quadrature points with weights approximating the domain integral."""

    cell_ids: np.ndarray          # (n_bg,) int
    weights: np.ndarray           # (n_bg,) float, > 0

    def __post_init__(self):
        cell_ids = np.asarray(self.cell_ids, dtype=np.int64)
        weights = _as_float(self.weights, "weights", 1)
        if cell_ids.shape != weights.shape:
            raise ValueError("background cell_ids and weights must align")
        if np.any(weights <= 0):
            raise ValueError("background weights must be positive")
        object.__setattr__(self, "cell_ids", _freeze(cell_ids))
        object.__setattr__(self, "weights", _freeze(weights))

    @property
    def n_points(self) -> int:
        return self.cell_ids.size

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())


@dataclass(frozen=True)
class CoefficientSet:
    """Full coefficient vector of the joint model.

    Per species k: intensity intercept ``alpha[k-1]``, intensity slopes
    ``beta[k-1]`` (length p), bias intercept ``gamma[k-1]``.  Shared
    bias slopes ``delta`` (length r).  Optional species-specific bias
    slopes are keyed by ``interaction_pairs`` of (species id, z column)
    with values in ``interaction_values``.

    The flat vector ordering is (alpha_1, beta_1, gamma_1, ...,
    alpha_m, beta_m, gamma_m, delta, interactions) with interactions in
    ``interaction_pairs`` order, so interaction-free fits and tests
    share indexing.
    """

    alpha: np.ndarray                       # (m,)
    beta: np.ndarray                        # (m, p)
    gamma: np.ndarray                       # (m,)
    delta: np.ndarray                       # (r,)
    interaction_pairs: tuple = ()           # ((k, j), ...) species id, z column
    interaction_values: np.ndarray = None   # (n_int,)

    def __post_init__(self):
        alpha = _as_float(self.alpha, "alpha", 1)
        beta = _as_float(self.beta, "beta", 2)
        gamma = _as_float(self.gamma, "gamma", 1)
        delta = _as_float(self.delta, "delta", 1)
        m = alpha.size
        if beta.shape[0] != m or gamma.shape != (m,):
            raise ValueError("alpha, beta, gamma must agree on species count")
        pairs = tuple((int(k), int(j)) for k, j in self.interaction_pairs)
        if len(set(pairs)) != len(pairs):
            raise ValueError("duplicate interaction pairs")
        for k, j in pairs:
            if not (1 <= k <= m):
                raise ValueError(f"interaction species id {k} out of range 1..{m}")
            if not (0 <= j < delta.size):
                raise ValueError(f"interaction z column {j} out of range 0..{delta.size - 1}")
        if self.interaction_values is None:
            values = np.zeros(len(pairs))
        else:
            values = _as_float(self.interaction_values, "interaction_values", 1)
            if values.size != len(pairs):
                raise ValueError("interaction_values must parallel interaction_pairs")
        object.__setattr__(self, "alpha", _freeze(alpha))
        object.__setattr__(self, "beta", _freeze(beta))
        object.__setattr__(self, "gamma", _freeze(gamma))
        object.__setattr__(self, "delta", _freeze(delta))
        object.__setattr__(self, "interaction_pairs", pairs)
        object.__setattr__(self, "interaction_values", _freeze(values))

    @property
    def m(self) -> int:
        return self.alpha.size

    @property
    def p(self) -> int:
        return self.beta.shape[1]

    @property
    def r(self) -> int:
        return self.delta.size

    @property
    def n_params(self) -> int:
        return self.m * (self.p + 2) + self.r + len(self.interaction_pairs)

    def interaction(self, k: int, j: int) -> float:
        """Species-specific bias slope for (species k, z column j); 0 if absent."""
        try:
            idx = self.interaction_pairs.index((k, j))
        except ValueError:
            return 0.0
        return float(self.interaction_values[idx])

    def species_block_slice(self, k: int) -> slice:
        d = self.p + 2
        return slice((k - 1) * d, k * d)

    def delta_slice(self) -> slice:
        off = self.m * (self.p + 2)
        return slice(off, off + self.r)

    def flatten(self) -> np.ndarray:
        """Flat vector (alpha_1, beta_1, gamma_1, ..., delta, interactions)."""
        parts = []
        for i in range(self.m):
            parts.append([self.alpha[i]])
            parts.append(self.beta[i])
            parts.append([self.gamma[i]])
        parts.append(self.delta)
        parts.append(self.interaction_values)
        return np.concatenate(parts) if parts else np.zeros(0)

    @classmethod
    def unflatten(cls, vec, m: int, p: int, r: int,
                  interaction_pairs: tuple = ()) -> "CoefficientSet":
        vec = np.asarray(vec, dtype=float)
        n_int = len(interaction_pairs)
        if vec.size != m * (p + 2) + r + n_int:
            raise ValueError(
                f"flat vector has length {vec.size}, expected {m * (p + 2) + r + n_int}")
        alpha = np.empty(m)
        beta = np.empty((m, p))
        gamma = np.empty(m)
        d = p + 2
        for i in range(m):
            block = vec[i * d:(i + 1) * d]
            alpha[i] = block[0]
            beta[i] = block[1:1 + p]
            gamma[i] = block[1 + p]
        delta = vec[m * d:m * d + r]
        values = vec[m * d + r:]
        return cls(alpha, beta, gamma, delta, interaction_pairs, values)

    @classmethod
    def zeros(cls, m: int, p: int, r: int,
              interaction_pairs: tuple = ()) -> "CoefficientSet":
        return cls(np.zeros(m), np.zeros((m, p)), np.zeros(m), np.zeros(r),
                   interaction_pairs, np.zeros(len(interaction_pairs)))

    def param_index(self, kind: str, k: int = 0, j: int = 0) -> int:
        """Flat index of a coefficient: kind in {alpha, beta, gamma, delta, interaction}."""
        d = self.p + 2
        if kind == "alpha":
            return (k - 1) * d
        if kind == "beta":
            return (k - 1) * d + 1 + j
        if kind == "gamma":
            return (k - 1) * d + 1 + self.p
        if kind == "delta":
            return self.m * d + j
        if kind == "interaction":
            return self.m * d + self.r + self.interaction_pairs.index((k, j))
        raise ValueError(f"unknown coefficient kind {kind!r}")


def linear_predictor_species(theta: CoefficientSet, k: int, x) -> float:
    """Log species intensity at covariates x: alpha_k + beta_k'x."""
    x = np.asarray(x, dtype=float)
    if x.shape != (theta.p,):
        raise ValueError(f"x has length {x.size}, expected {theta.p}")
    return float(theta.alpha[k - 1] + theta.beta[k - 1] @ x)


def linear_predictor_bias(theta: CoefficientSet, k: int, z) -> float:
    """Log observation probability at bias covariates z: gamma_k + delta'z
    plus any species-specific terms."""
    z = np.asarray(z, dtype=float)
    if z.shape != (theta.r,):
        raise ValueError(f"z has length {z.size}, expected {theta.r}")
    eta = float(theta.gamma[k - 1] + theta.delta @ z)
    for (ki, j), value in zip(theta.interaction_pairs, theta.interaction_values):
        if ki == k:
            eta += value * z[j]
    return eta


@dataclass(frozen=True)
class InformationBlocks:
    """Negative Hessian of the penalized objective in block form.

    ``a_blocks[k-1]`` covers species k's coordinates (alpha, beta,
    gamma, then its interaction columns), ``b_blocks[k-1]`` the cross
    block against delta, and ``c_delta`` the shared delta block.
    Coordinates that were not estimated carry zero rows/columns.
    """

    a_blocks: tuple          # per-species symmetric blocks
    b_blocks: tuple          # per-species cross blocks vs delta
    c_delta: np.ndarray      # (r, r)

    def __post_init__(self):
        object.__setattr__(self, "a_blocks",
                           tuple(_freeze(np.asarray(a, dtype=float)) for a in self.a_blocks))
        object.__setattr__(self, "b_blocks",
                           tuple(_freeze(np.asarray(b, dtype=float)) for b in self.b_blocks))
        object.__setattr__(self, "c_delta", _freeze(np.asarray(self.c_delta, dtype=float)))


@dataclass(frozen=True)
class CovarianceBlocks:
    """Inverse of the penalized information in block form.

    ``species_cov[k-1]`` is the covariance of species k's estimated
    coordinates, ``cross[k-1]`` equals G_k S^-1 with G_k = A_k^-1 B_k
    (so cov(theta_k, delta) = -cross[k-1]), ``delta_cov`` is S^-1 and
    ``schur`` the Schur complement S itself.  ``species_coords`` /
    ``delta_coords`` give the flat-vector indices each block covers.
    """

    species_cov: tuple
    cross: tuple
    delta_cov: np.ndarray
    schur: np.ndarray
    species_coords: tuple
    delta_coords: np.ndarray

    def _locate(self, i: int):
        for k, coords in enumerate(self.species_coords):
            hit = np.nonzero(coords == i)[0]
            if hit.size:
                return ("species", k, int(hit[0]))
        hit = np.nonzero(self.delta_coords == i)[0]
        if hit.size:
            return ("delta", -1, int(hit[0]))
        raise ValueError(f"coefficient at flat index {i} was not estimated")

    def pair_cov(self, i: int, j: int) -> np.ndarray:
        """2x2 covariance of the coefficient pair at flat indices (i, j)."""
        out = np.empty((2, 2))
        loc = [self._locate(i), self._locate(j)]
        for a in range(2):
            for b in range(a, 2):
                (wa, ka, la), (wb, kb, lb) = loc[a], loc[b]
                if wa == "species" and wb == "species":
                    if ka == kb:
                        v = self.species_cov[ka][la, lb]
                    else:
                        v = (self.cross[ka] @ self.schur @ self.cross[kb].T)[la, lb]
                elif wa == "delta" and wb == "delta":
                    v = self.delta_cov[la, lb]
                elif wa == "species":
                    v = -self.cross[ka][la, lb]
                else:
                    v = -self.cross[kb][lb, la]
                out[a, b] = out[b, a] = v
        return out


@dataclass(frozen=True)
class FitResult:
    """Converged model fit with curvature blocks and diagnostics.

    ``alpha_anchored[k-1]`` is False when species k's intensity scale is
    not identified (bias terms present but no survey data): predictions
    for such species are meaningful only up to a constant factor.
    ``gamma_estimated[k-1]`` is False when the bias intercept was fixed
    (no presence-only records, no bias terms in the model, or pinned to
    absorb the intercept confounding).
    """

    theta: CoefficientSet
    negloglik: float
    objective: float
    information: InformationBlocks
    standard_errors: np.ndarray        # flat, aligned with theta.flatten()
    converged: bool
    iterations: int
    deviance_trace: np.ndarray         # -2 * penalized objective per iteration
    gradient_norm: float
    alpha_anchored: np.ndarray         # (m,) bool
    gamma_estimated: np.ndarray        # (m,) bool
    nu: float
    covariance: CovarianceBlocks = None
    message: str = ""

    def se(self, kind: str, k: int = 0, j: int = 0) -> float:
        return float(self.standard_errors[self.theta.param_index(kind, k, j)])


@dataclass(frozen=True)
class DataBundle:
    """Everything one fit consumes: the field plus any of survey (PA),
    presence-only (PO) and background (BG) data."""

    field: CovariateField
    survey: SurveyDataset = None
    po: PresenceOnlyDataset = None
    bg: BackgroundSample = None

    def __post_init__(self):
        ms = []
        if self.survey is not None:
            ms.append(self.survey.n_species)
            self.field.rows_of(self.survey.cell_ids)
        if self.po is not None:
            ms.append(self.po.n_species)
            self.po.validate_against(self.field)
        if self.bg is not None:
            self.field.rows_of(self.bg.cell_ids)
        if not ms:
            raise ValueError("bundle needs survey or presence-only data")
        if len(set(ms)) > 1:
            raise ValueError(f"species counts disagree across datasets: {ms}")
        if self.po is not None and any(
                self.po.n_records(k) for k in range(1, self.po.n_species + 1)):
            if self.bg is None:
                raise ValueError("presence-only data requires a background sample")

    @property
    def m(self) -> int:
        if self.survey is not None:
            return self.survey.n_species
        return self.po.n_species

    @property
    def p(self) -> int:
        return self.field.p

    @property
    def r(self) -> int:
        return self.field.r

    def species_subset(self, keep: Sequence[int]) -> "DataBundle":
        """Bundle restricted to the given species ids (renumbered 1..len(keep))."""
        keep = list(keep)
        survey = None
        if self.survey is not None:
            responses = self.survey.responses[:, [k - 1 for k in keep]]
            survey = SurveyDataset(self.survey.site_ids, self.survey.cell_ids,
                                   self.survey.areas, responses,
                                   self.survey.response_kind)
        po = None
        if self.po is not None:
            po = PresenceOnlyDataset(
                len(keep),
                tuple(self.po.cells_by_species[k - 1] for k in keep),
                tuple(self.po.ids_by_species[k - 1] for k in keep))
        return DataBundle(self.field, survey, po, self.bg)
