"""Spatial block resampling: bootstrap, cross-validation folds, and
presence-absence downsampling.

The domain's bounding box is tiled into rectangular blocks; whole
blocks are resampled (bootstrap) or assigned to folds (CV) so spatial
autocorrelation within a block never leaks across the train/test
boundary.  Background weights are never rescaled after blocks are
dropped or duplicated: each weight is a quadrature mass for its own
point, so the presence-only integral simply runs over the retained
region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import (BackgroundSample, DataBundle, PresenceOnlyDataset,
                   SurveyDataset)
from .errors import DataError, NumericalError, PoolsdmError
from .rng import stream
from .solver import SolverOptions, fit

__all__ = [
    "BlockPartition",
    "make_partition",
    "block_bootstrap",
    "BootstrapResult",
    "block_cv_folds",
    "split_bundle",
    "downsample_pa",
]


@dataclass(frozen=True)
class BlockPartition:
    """Rectangular tiling of the field's bounding box.

    ``block_of_cell[i]`` is the block index of the field's i-th cell
    (row-aligned with the CovariateField).  All tiles of the bounding
    box count as blocks, including any that happen to contain no cell.
    """

    block_of_cell: np.ndarray
    n_blocks: int
    shape: tuple              # (nx, ny) tiles
    sides: tuple              # (side_x, side_y)
    origin: tuple             # (xmin, ymin)

    def cells_in_block(self, b: int) -> np.ndarray:
        return np.nonzero(self.block_of_cell == b)[0]


def make_partition(field, side_x: float, side_y: float) -> BlockPartition:
    """Grid-aligned tiling of the bounding box of the cell locations."""
    if field.n_cells == 0:
        raise DataError("cannot partition an empty field")
    if side_x <= 0 or side_y <= 0:
        raise DataError("block side lengths must be positive")
    xy = field.locations
    xmin, ymin = xy.min(axis=0)
    xmax, ymax = xy.max(axis=0)
    nx = max(1, int(math.ceil((xmax - xmin) / side_x - 1e-12)))
    ny = max(1, int(math.ceil((ymax - ymin) / side_y - 1e-12)))
    ix = np.clip(np.floor((xy[:, 0] - xmin) / side_x).astype(np.int64), 0, nx - 1)
    iy = np.clip(np.floor((xy[:, 1] - ymin) / side_y).astype(np.int64), 0, ny - 1)
    return BlockPartition(iy * nx + ix, nx * ny, (nx, ny),
                          (float(side_x), float(side_y)),
                          (float(xmin), float(ymin)))


def _block_of_cells(bundle: DataBundle, partition: BlockPartition,
                    cell_ids) -> np.ndarray:
    return partition.block_of_cell[bundle.field.rows_of(cell_ids)]


def _take_bundle(bundle: DataBundle, partition: BlockPartition,
                 multiplicity: np.ndarray) -> DataBundle:
    """Bundle with each block's rows repeated ``multiplicity[block]`` times."""
    survey = None
    if bundle.survey is not None:
        s = bundle.survey
        reps = multiplicity[_block_of_cells(bundle, partition, s.cell_ids)]
        idx = np.repeat(np.arange(s.n_sites), reps)
        survey = SurveyDataset(np.arange(idx.size), s.cell_ids[idx],
                               s.areas[idx], s.responses[idx],
                               s.response_kind)
    po = None
    if bundle.po is not None:
        cells = []
        for k in range(1, bundle.po.n_species + 1):
            ck = bundle.po.cells(k)
            if ck.size:
                reps = multiplicity[_block_of_cells(bundle, partition, ck)]
                cells.append(np.repeat(ck, reps))
            else:
                cells.append(ck)
        po = PresenceOnlyDataset(bundle.po.n_species, tuple(cells))
    bg = None
    if bundle.bg is not None:
        reps = multiplicity[_block_of_cells(bundle, partition,
                                            bundle.bg.cell_ids)]
        idx = np.repeat(np.arange(bundle.bg.n_points), reps)
        if idx.size == 0:
            bg = None
        else:
            bg = BackgroundSample(bundle.bg.cell_ids[idx],
                                  bundle.bg.weights[idx])
    if po is not None and bg is None:
        # a resample may drop every background point: refuse to build a
        # bundle whose PO likelihood is undefined
        if any(po.n_records(k) for k in range(1, po.n_species + 1)):
            raise NumericalError("resample retained presence records "
                                 "but no background points")
        po = None
    return DataBundle(bundle.field, survey, po, bg)


@dataclass(frozen=True)
class BootstrapResult:
    """Completed bootstrap replicates and percentile intervals."""

    thetas: tuple                 # CoefficientSet per completed replicate
    lower: np.ndarray             # 2.5% percentile, flat order
    upper: np.ndarray             # 97.5% percentile, flat order
    n_requested: int
    n_failed: int

    @property
    def n_completed(self) -> int:
        return len(self.thetas)


def block_bootstrap(bundle: DataBundle, partition: BlockPartition,
                    replicates: int, options: SolverOptions, seed: int,
                    interactions: tuple = (), include_bias: bool = True
                    ) -> BootstrapResult:
    """Resample whole blocks with replacement and refit.

    Each replicate draws B blocks (B = block count) with replacement;
    duplicated blocks contribute duplicated rows.  Replicates whose fit
    fails are dropped and counted.
    """
    B = partition.n_blocks
    thetas = []
    n_failed = 0
    n_flat = None
    for rep in range(replicates):
        rng = stream(seed, "bootstrap", rep)
        draws = rng.integers(0, B, size=B)
        multiplicity = np.bincount(draws, minlength=B)
        try:
            resampled = _take_bundle(bundle, partition, multiplicity)
            res = fit(resampled, options, interactions=interactions,
                      include_bias=include_bias)
            thetas.append(res.theta)
            n_flat = res.theta.flatten().size
        except PoolsdmError:
            n_failed += 1
    if not thetas:
        size = n_flat or 0
        nanvec = np.full(size, np.nan)
        return BootstrapResult((), nanvec, nanvec, replicates, n_failed)
    stacked = np.vstack([t.flatten() for t in thetas])
    finite_cols = np.isfinite(stacked).all(axis=0)
    lower = np.full(stacked.shape[1], np.nan)
    upper = np.full(stacked.shape[1], np.nan)
    if finite_cols.any():
        lower[finite_cols] = np.percentile(stacked[:, finite_cols], 2.5, axis=0)
        upper[finite_cols] = np.percentile(stacked[:, finite_cols], 97.5, axis=0)
    return BootstrapResult(tuple(thetas), lower, upper, replicates, n_failed)


def block_cv_folds(partition: BlockPartition, n_folds: int, seed: int
                   ) -> np.ndarray:
    """Fold id per block (0..n_folds-1); -1 marks excluded blocks.

    Blocks are permuted by the seeded stream; the first
    n_folds * floor(B / n_folds) of them are dealt round-robin and the
    remainder is excluded entirely.
    """
    B = partition.n_blocks
    if n_folds > B:
        raise DataError(f"{n_folds} folds exceed {B} blocks")
    perm = stream(seed, "cv_folds").permutation(B)
    fold_of_block = np.full(B, -1, dtype=np.int64)
    n_used = n_folds * (B // n_folds)
    fold_of_block[perm[:n_used]] = np.arange(n_used) % n_folds
    return fold_of_block


def split_bundle(bundle: DataBundle, partition: BlockPartition,
                 fold_of_block: np.ndarray, fold: int
                 ) -> tuple[DataBundle, DataBundle]:
    """(train, test) bundles for one fold.

    Everything in a test block -- survey sites, presence records and
    background points -- is held out of training; excluded blocks
    appear in neither side.
    """
    train_mult = ((fold_of_block != fold) & (fold_of_block >= 0)).astype(np.int64)
    test_mult = (fold_of_block == fold).astype(np.int64)
    return (_take_bundle(bundle, partition, train_mult),
            _take_bundle(bundle, partition, test_mult))


def downsample_pa(survey: SurveyDataset, k: int, n_keep: int, seed: int
                  ) -> SurveyDataset:
    """Mask species k's responses down to exactly n_keep non-missing sites."""
    available = np.nonzero(survey.observed_mask(k))[0]
    if n_keep > available.size:
        raise DataError(
            f"cannot keep {n_keep} sites for species {k}: only "
            f"{available.size} non-missing")
    chosen = stream(seed, "downsample", k).choice(available, size=n_keep,
                                                  replace=False)
    keep = np.zeros(survey.n_sites, dtype=bool)
    keep[chosen] = True
    return survey.with_mask(k, keep)
