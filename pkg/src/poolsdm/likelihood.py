"""Joint penalized log-likelihood, gradient, and stable link helpers.

The joint objective is

    sum_k [ pa_loglik_k + po_loglik_k ]  -  (nu/2) (||beta||^2 + ||delta||^2)

maximized over theta.  Intercepts (alpha_k, gamma_k) are never
penalized; species-specific bias slopes count toward the delta part of
the penalty.

Sign convention: the presence-absence term is a log-likelihood, so the
y=1 contribution is +log(1 - exp(-mu)).  Quadrat areas enter as offsets
log|A_i|, i.e. mu_ik = |A_i| * exp(alpha_k + beta_k'x_i).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .data import CoefficientSet, DataBundle
from .errors import NumericalError

__all__ = [
    "ObjectiveValue",
    "pa_loglik",
    "po_loglik",
    "joint_objective",
    "joint_gradient",
    "OVERFLOW_ETA",
]

# exp() overflows double precision just above this; treat larger linear
# predictors as a numerical failure rather than returning inf.
OVERFLOW_ETA = 700.0


def checked_exp(eta: np.ndarray, what: str, labels=None) -> np.ndarray:
    """exp(eta), raising NumericalError (naming the first offending row)
    when any eta exceeds the overflow bound."""
    eta = np.asarray(eta, dtype=float)
    if eta.size and np.max(eta) > OVERFLOW_ETA:
        i = int(np.argmax(eta > OVERFLOW_ETA))
        label = labels[i] if labels is not None else i
        raise NumericalError(
            f"linear predictor overflow in {what}: eta={eta.flat[i]:.3g} at {label}")
    return np.exp(eta)


def log1mexp(mu: np.ndarray) -> np.ndarray:
    """log(1 - exp(-mu)) for mu >= 0, elementwise; -inf at mu = 0."""
    mu = np.asarray(mu, dtype=float)
    with np.errstate(divide="ignore"):
        small = mu < 0.693  # log 2: switch point for the two stable branches
        out = np.where(small,
                       np.log(-np.expm1(-np.where(small, mu, 1.0))),
                       np.log1p(-np.exp(-np.where(small, 1.0, mu))))
    return out


def cloglog_grad_factor(mu: np.ndarray) -> np.ndarray:
    """d/deta log(1 - exp(-mu)) with mu = e^eta: mu e^-mu / (1 - e^-mu)."""
    mu = np.asarray(mu, dtype=float)
    tiny = mu < 1e-8
    safe = np.where(tiny, 1.0, mu)
    with np.errstate(invalid="ignore", over="ignore"):
        f = safe * np.exp(-safe) / (-np.expm1(-safe))
    return np.where(tiny, 1.0 - mu / 2.0 + mu * mu / 12.0, f)


def cloglog_curvature(mu: np.ndarray) -> np.ndarray:
    """-d^2/deta^2 log(1 - exp(-mu)): positive curvature of the y=1 row."""
    mu = np.asarray(mu, dtype=float)
    tiny = mu < 1e-8
    safe = np.where(tiny, 1.0, mu)
    with np.errstate(invalid="ignore", over="ignore"):
        p = -np.expm1(-safe)
        c = safe * np.exp(-safe) * (safe - p) / (p * p)
    # series: mu/2 - mu^2/6 + O(mu^3)
    return np.where(tiny, mu / 2.0 - mu * mu / 6.0, c)


@dataclass(frozen=True)
class ObjectiveValue:
    """Penalized objective split into its parts.

    loglik = sum of per-species PA and PO components;
    objective = loglik - penalty.
    """

    loglik: float
    penalty: float
    pa_by_species: np.ndarray
    po_by_species: np.ndarray

    @property
    def objective(self) -> float:
        return self.loglik - self.penalty


def _pa_eta(theta: CoefficientSet, survey, field, k: int, mask):
    rows = field.rows_of(survey.cell_ids[mask])
    x = field.x[rows]
    return theta.alpha[k - 1] + x @ theta.beta[k - 1] + np.log(survey.areas[mask]), x


def pa_loglik(theta: CoefficientSet, survey, field, k: int) -> float:
    """Survey log-likelihood for species k over non-missing sites.

    Binary responses use the complementary log-log model induced by the
    Poisson count in a quadrat; counts use the Poisson log-likelihood.
    A site with mu = 0 and y = 1 yields -inf, signalling a degenerate
    fit rather than raising.
    """
    mask = survey.observed_mask(k)
    if not mask.any():
        return 0.0
    y = survey.responses[mask, k - 1]
    eta, _ = _pa_eta(theta, survey, field, k, mask)
    mu = checked_exp(eta, f"pa_loglik species {k}",
                     labels=survey.site_ids[mask])
    if survey.response_kind == "binary":
        terms = np.where(y > 0, log1mexp(mu), -mu)
    else:
        terms = y * np.where(y > 0, np.log(np.where(mu > 0, mu, 1.0)), 0.0) \
            - mu - gammaln(y + 1)
        terms = np.where((y > 0) & (mu == 0), -np.inf, terms)
    return float(terms.sum())


def _bias_eta_rows(theta: CoefficientSet, k: int, z: np.ndarray) -> np.ndarray:
    eta = theta.gamma[k - 1] + z @ theta.delta
    for (ki, j), value in zip(theta.interaction_pairs, theta.interaction_values):
        if ki == k:
            eta = eta + value * z[:, j]
    return eta


def po_loglik(theta: CoefficientSet, po, bg, field, k: int) -> float:
    """Presence-only log-likelihood for species k.

    Presence records contribute their log thinned intensity; the domain
    integral is the weighted sum over background points.  Exactly
    invariant under (alpha_k + c, gamma_k - c).
    """
    if bg is None or bg.n_points == 0:
        raise ValueError("background sample must be non-empty")
    bg_rows = field.rows_of(bg.cell_ids)
    eta_bg = (theta.alpha[k - 1] + field.x[bg_rows] @ theta.beta[k - 1]
              + _bias_eta_rows(theta, k, field.z[bg_rows]))
    integral = bg.weights @ checked_exp(
        eta_bg, f"po_loglik species {k} background", labels=bg.cell_ids)
    point_sum = 0.0
    cells = po.cells(k)
    if cells.size:
        rows = field.rows_of(cells)
        eta_po = (theta.alpha[k - 1] + field.x[rows] @ theta.beta[k - 1]
                  + _bias_eta_rows(theta, k, field.z[rows]))
        point_sum = float(eta_po.sum())
    return point_sum - float(integral)


def penalty_value(theta: CoefficientSet, nu: float) -> float:
    """(nu/2)(||beta||^2 + ||delta||^2); intercepts excluded, species-specific
    bias slopes included with delta."""
    if nu == 0:
        return 0.0
    return 0.5 * nu * (float(np.sum(theta.beta ** 2))
                       + float(np.sum(theta.delta ** 2))
                       + float(np.sum(theta.interaction_values ** 2)))


def joint_objective(theta: CoefficientSet, bundle: DataBundle, nu: float = 0.0
                    ) -> ObjectiveValue:
    """Penalized joint objective over all species."""
    m = theta.m
    pa = np.zeros(m)
    po = np.zeros(m)
    for k in range(1, m + 1):
        if bundle.survey is not None:
            pa[k - 1] = pa_loglik(theta, bundle.survey, bundle.field, k)
        if bundle.po is not None and bundle.bg is not None:
            po[k - 1] = po_loglik(theta, bundle.po, bundle.bg, bundle.field, k)
    return ObjectiveValue(float(pa.sum() + po.sum()), penalty_value(theta, nu),
                          pa, po)


def joint_gradient(theta: CoefficientSet, bundle: DataBundle, nu: float = 0.0
                   ) -> np.ndarray:
    """Analytic gradient of the penalized objective, in flat ordering."""
    m, p, r = theta.m, theta.p, theta.r
    field = bundle.field
    grad = np.zeros(theta.n_params)
    d = p + 2
    delta_off = m * d
    int_index = {pair: delta_off + r + i
                 for i, pair in enumerate(theta.interaction_pairs)}

    for k in range(1, m + 1):
        base = (k - 1) * d
        if bundle.survey is not None:
            survey = bundle.survey
            mask = survey.observed_mask(k)
            if mask.any():
                y = survey.responses[mask, k - 1]
                eta, x = _pa_eta(theta, survey, field, k, mask)
                mu = checked_exp(eta, f"gradient pa species {k}")
                if survey.response_kind == "binary":
                    f = np.where(y > 0, cloglog_grad_factor(mu), -mu)
                else:
                    f = y - mu
                grad[base] += f.sum()
                grad[base + 1:base + 1 + p] += x.T @ f
        if bundle.po is not None and bundle.bg is not None:
            bg = bundle.bg
            rows = field.rows_of(bg.cell_ids)
            xbg, zbg = field.x[rows], field.z[rows]
            eta = (theta.alpha[k - 1] + xbg @ theta.beta[k - 1]
                   + _bias_eta_rows(theta, k, zbg))
            muw = bg.weights * checked_exp(eta, f"gradient bg species {k}",
                                           labels=bg.cell_ids)
            grad[base] -= muw.sum()
            grad[base + 1:base + 1 + p] -= xbg.T @ muw
            grad[base + 1 + p] -= muw.sum()
            grad[delta_off:delta_off + r] -= zbg.T @ muw
            for (ki, j), gi in int_index.items():
                if ki == k:
                    grad[gi] -= zbg[:, j] @ muw
            cells = bundle.po.cells(k)
            if cells.size:
                prow = field.rows_of(cells)
                grad[base] += cells.size
                grad[base + 1:base + 1 + p] += field.x[prow].sum(axis=0)
                grad[base + 1 + p] += cells.size
                grad[delta_off:delta_off + r] += field.z[prow].sum(axis=0)
                for (ki, j), gi in int_index.items():
                    if ki == k:
                        grad[gi] += field.z[prow][:, j].sum()
        if nu:
            grad[base + 1:base + 1 + p] -= nu * theta.beta[k - 1]
    if nu:
        grad[delta_off:delta_off + r] -= nu * theta.delta
        grad[delta_off + r:] -= nu * theta.interaction_values
    return grad
