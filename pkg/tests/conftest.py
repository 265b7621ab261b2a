"""Shared test data builders.

Synthetic bundles are generated with plain numpy (independently of the
package's own simulation module) so the fitting tests do not lean on
the code they are checking.
"""

from __future__ import annotations

import numpy as np

from poolsdm.data import (BackgroundSample, CoefficientSet, CovariateField,
                          DataBundle, PresenceOnlyDataset, SurveyDataset)


def make_field(rng, n_cells=80, p=2, r=1, area=1.0):
    return CovariateField(
        cell_ids=np.arange(n_cells),
        locations=rng.uniform(0, 10, size=(n_cells, 2)),
        areas=np.full(n_cells, area),
        x=rng.normal(size=(n_cells, p)),
        z=rng.normal(size=(n_cells, r)),
    )


def random_theta(rng, m, p, r, scale=0.4):
    return CoefficientSet(
        alpha=rng.normal(-0.8, 0.3, size=m),
        beta=rng.normal(0, scale, size=(m, p)),
        gamma=rng.normal(-1.2, 0.3, size=m),
        delta=rng.normal(0, scale, size=r),
    )


def make_bundle(seed=0, m=2, p=2, r=1, n_cells=80, n_pa=40, kind="binary",
                with_pa=True, with_po=True, theta=None):
    """Micro-instance drawn from the model itself.

    Presence-only counts are drawn directly from the thinned intensity
    (the marginal law), so no thinning-probability bound is needed.
    """
    rng = np.random.default_rng(seed)
    field = make_field(rng, n_cells=n_cells, p=p, r=r)
    if theta is None:
        theta = random_theta(rng, m, p, r)
    survey = None
    if with_pa:
        sites = rng.choice(n_cells, size=n_pa, replace=False)
        responses = np.empty((n_pa, m))
        for k in range(m):
            lam = field.areas[sites] * np.exp(
                theta.alpha[k] + field.x[sites] @ theta.beta[k])
            counts = rng.poisson(lam)
            responses[:, k] = counts if kind == "count" else (counts > 0)
        survey = SurveyDataset(np.arange(n_pa), field.cell_ids[sites],
                               field.areas[sites], responses, kind)
    po = None
    bg = None
    if with_po:
        cells = []
        for k in range(m):
            eta = (theta.alpha[k] + field.x @ theta.beta[k]
                   + theta.gamma[k] + field.z @ theta.delta)
            counts = rng.poisson(field.areas * np.exp(eta))
            cells.append(np.repeat(field.cell_ids, counts))
        po = PresenceOnlyDataset(m, tuple(cells))
        bg = BackgroundSample(field.cell_ids, field.areas.copy())
    return DataBundle(field, survey, po, bg), theta
