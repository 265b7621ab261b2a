"""Penalized maximum likelihood for the joint model.

Newton iterations on the concave penalized log-likelihood.  Survey and
background rows supply both gradient and curvature; presence records
enter the gradient exactly (their contribution is linear in theta, so
their Hessian is identically zero).  Each step solves the penalized
normal equations by per-species elimination: factor every species
block A_k, form the Schur complement of the shared delta block, solve
the small r x r system, and back-substitute.  Cost per iteration is
O(m n (p^2 + r^2) + r^3) instead of the cubic-in-m dense solve.

Identifiability handling:

* a species with neither survey rows nor presence-only records cannot
  be fit and raises;
* a species with presence-only records but no survey rows has its bias
  intercept gamma_k pinned to zero -- the fitted alpha_k is then the
  combined intercept and the species is flagged as not anchored;
* a species with a bias component but zero presence-only records has
  its background rows dropped; its gamma_k is reported as -inf (the
  supremum of the likelihood) and not estimated.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .data import (CoefficientSet, CovarianceBlocks, DataBundle, FitResult,
                   InformationBlocks)
from .design import BlockDesign, build_design, design_loglik
from .errors import DataError, NumericalError
from .likelihood import cloglog_curvature, cloglog_grad_factor

__all__ = [
    "SolverOptions",
    "NormalEquationBlocks",
    "OpCounter",
    "fit",
    "fit_dense",
    "newton_step",
    "wald_region",
    "WaldRegion",
]


@dataclass(frozen=True)
class SolverOptions:
    """Knobs for the Newton solver.

    Convergence requires BOTH the relative objective change below
    ``tol_objective`` and the gradient max-norm below ``tol_gradient``.
    """

    nu: float = 0.0
    max_iterations: int = 100
    tol_objective: float = 1e-10
    tol_gradient: float = 1e-6
    step_halving_limit: int = 30
    deterministic_reduction: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError("ridge multiplier nu must be >= 0")
        if self.tol_objective <= 0 or self.tol_gradient <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class OpCounter:
    """Tally of floating-point block operations, for scaling checks."""

    ops: float = 0.0

    def add(self, n: float) -> None:
        self.ops += float(n)


@dataclass(frozen=True)
class NormalEquationBlocks:
    """Curvature and gradient of the row part of the objective.

    ``a_blocks[k]`` / ``b_blocks[k]`` / ``g_blocks[k]`` cover species
    k's active coordinates; ``c_delta`` / ``h_delta`` the active shared
    bias slopes.  Gradients include the ridge gradient -nu * theta on
    penalized coordinates but exclude the presence linear term M, which
    ``newton_step`` adds; curvature blocks exclude the ridge, which
    ``newton_step`` adds on penalized rows/columns only.
    """

    a_blocks: tuple
    b_blocks: tuple
    g_blocks: tuple
    c_delta: np.ndarray
    h_delta: np.ndarray
    species_coords: tuple        # flat indices per species
    delta_coords: np.ndarray     # flat indices of active delta coords
    species_penalized: tuple     # bool mask per species (beta / interaction coords)


@dataclass(frozen=True)
class _Structure:
    """Which coordinates are estimated, pinned, or absent."""

    m: int
    p: int
    r: int
    pairs: tuple
    include_bias: bool
    pa_present: np.ndarray       # (m,) bool
    po_counts: np.ndarray        # (m,) int
    bg_used: np.ndarray          # (m,) bool: species contributes BG rows
    gamma_free: np.ndarray       # (m,) bool
    gamma_pinned: np.ndarray     # (m,) bool (pinned to 0, intercept absorbed)
    delta_active: bool
    species_coords: tuple        # active flat indices per species
    species_penalized: tuple
    delta_coords: np.ndarray
    skipped_bg_species: tuple    # species ids whose BG rows are dropped

    @property
    def n_active(self) -> int:
        return sum(c.size for c in self.species_coords) + self.delta_coords.size


def _analyze(bundle: DataBundle, design: BlockDesign, include_bias: bool
             ) -> _Structure:
    m, p, r = design.m, design.p, design.r
    pairs = design.interaction_pairs
    if pairs and not include_bias:
        raise DataError("interactions require the bias component")
    pa_present = np.zeros(m, dtype=bool)
    if bundle.survey is not None:
        for k in range(1, m + 1):
            pa_present[k - 1] = bool(bundle.survey.observed_mask(k).any())
    po_counts = design.n_po.copy()
    has_po = bundle.po is not None and bundle.bg is not None and design.n_bg > 0

    dead = [k for k in range(1, m + 1)
            if not pa_present[k - 1] and not (has_po and po_counts[k - 1] > 0)]
    if dead:
        raise DataError(
            f"species {dead} have no survey rows and no presence-only records; "
            "no coefficient block is identifiable")

    if include_bias:
        bg_used = has_po & (po_counts > 0)
    else:
        # unadjusted model: zero observed records is itself data
        bg_used = np.full(m, has_po)
    gamma_free = include_bias & bg_used & pa_present
    gamma_pinned = include_bias & bg_used & ~pa_present
    delta_active = bool(include_bias and bg_used.any() and r > 0)

    d = p + 2
    species_coords, species_pen = [], []
    for k in range(1, m + 1):
        base = (k - 1) * d
        coords = [base] + list(range(base + 1, base + 1 + p))
        pen = [False] + [True] * p
        if gamma_free[k - 1]:
            coords.append(base + 1 + p)
            pen.append(False)
        for i, (ki, j) in enumerate(pairs):
            if ki == k and bg_used[k - 1]:
                coords.append(m * d + r + i)
                pen.append(True)
        species_coords.append(np.array(coords, dtype=np.int64))
        species_pen.append(np.array(pen, dtype=bool))
    delta_coords = (np.arange(m * d, m * d + r, dtype=np.int64)
                    if delta_active else np.zeros(0, dtype=np.int64))
    skipped = tuple(k for k in range(1, m + 1)
                    if has_po and not bg_used[k - 1])
    return _Structure(m, p, r, pairs, include_bias, pa_present, po_counts,
                      bg_used, gamma_free, gamma_pinned, delta_active,
                      tuple(species_coords), tuple(species_pen),
                      delta_coords, skipped)


def _theta_of(vec: np.ndarray, st: _Structure) -> CoefficientSet:
    return CoefficientSet.unflatten(vec, st.m, st.p, st.r, st.pairs)


def _objective(design: BlockDesign, vec: np.ndarray, st: _Structure,
               nu: float) -> float:
    """Penalized objective; -inf on overflow (for step control)."""
    theta = _theta_of(vec, st)
    try:
        ll = design_loglik(design, theta, skip_bg_species=st.skipped_bg_species)
    except NumericalError:
        return -np.inf
    pen = 0.0
    if nu:
        pen = 0.5 * nu * (float(np.sum(theta.beta ** 2))
                          + float(np.sum(theta.delta ** 2))
                          + float(np.sum(theta.interaction_values ** 2)))
    return ll - pen


def _species_work(design: BlockDesign, vec: np.ndarray, st: _Structure,
                  nu: float, k: int):
    """Curvature/gradient contributions of species k's rows."""
    m, p, r = st.m, st.p, st.r
    d = p + 2
    base = (k - 1) * d
    coords = st.species_coords[k - 1]
    dk = coords.size
    r_act = st.delta_coords.size
    a = np.zeros((dk, dk))
    b = np.zeros((dk, r_act))
    g = np.zeros(dk)
    c = np.zeros((r_act, r_act))
    h = np.zeros(r_act)
    n_ops = 0.0

    ab = vec[base:base + 1 + p]            # [alpha, beta]
    if design.n_pa:
        y = design.pa_y[:, k - 1]
        obs = ~np.isnan(y)
        if obs.any():
            x1 = design.pa_x1[obs]
            eta = x1 @ ab + design.pa_offsets[obs]
            mu = np.exp(eta)
            yo = y[obs]
            if design.pa_kind == "binary":
                ones = yo > 0
                f = np.where(ones, cloglog_grad_factor(mu), -mu)
                w = np.where(ones, cloglog_curvature(mu), mu)
            else:
                f = yo - mu
                w = mu
            a[:1 + p, :1 + p] += (x1 * w[:, None]).T @ x1
            g[:1 + p] += x1.T @ f
            n_ops += x1.shape[0] * (1 + p) ** 2

    if st.bg_used[k - 1] and design.n_bg:
        cols = [design.bg_x1]
        if st.gamma_free[k - 1]:
            cols.append(np.ones((design.n_bg, 1)))
        for j in design.interaction_columns(k):
            cols.append(design.bg_z[:, [j]])
        xt = np.hstack(cols) if len(cols) > 1 else design.bg_x1
        eta = design.bg_x1 @ ab
        if st.include_bias:
            eta = eta + vec[base + 1 + p] + design.bg_z @ vec[m * d:m * d + r]
            for i, (ki, j) in enumerate(st.pairs):
                if ki == k:
                    eta = eta + vec[m * d + r + i] * design.bg_z[:, j]
        muw = design.bg_w * np.exp(eta)
        xw = xt * muw[:, None]
        a += xw.T @ xt
        g -= xt.T @ muw
        if r_act:
            b += xw.T @ design.bg_z
            c += (design.bg_z * muw[:, None]).T @ design.bg_z
            h -= design.bg_z.T @ muw
        n_ops += design.n_bg * (dk * dk + dk * r_act + r_act * r_act)

    if nu:
        pen = st.species_penalized[k - 1]
        g[pen] -= nu * vec[coords[pen]]
    return a, b, g, c, h, n_ops


def normal_equation_blocks(design: BlockDesign, vec: np.ndarray,
                           st: _Structure, options: SolverOptions,
                           op_counter: OpCounter | None = None
                           ) -> NormalEquationBlocks:
    """Accumulate per-species blocks and the shared delta block."""
    m = st.m
    r_act = st.delta_coords.size
    results = [None] * m
    if options.threads > 1 and m > 1:
        with ThreadPoolExecutor(max_workers=options.threads) as pool:
            futures = {pool.submit(_species_work, design, vec, st,
                                   options.nu, k): k
                       for k in range(1, m + 1)}
            if options.deterministic_reduction:
                for fut, k in futures.items():
                    results[k - 1] = fut.result()
            else:
                for fut in futures:
                    k = futures[fut]
                    results[k - 1] = fut.result()
    else:
        for k in range(1, m + 1):
            results[k - 1] = _species_work(design, vec, st, options.nu, k)

    c = np.zeros((r_act, r_act))
    h = np.zeros(r_act)
    a_blocks, b_blocks, g_blocks = [], [], []
    ops = 0.0
    for a, b, g, ck, hk, n_ops in results:
        a_blocks.append(a)
        b_blocks.append(b)
        g_blocks.append(g)
        c += ck
        h += hk
        ops += n_ops
    if options.nu and r_act:
        h -= options.nu * vec[st.delta_coords]
    if op_counter is not None:
        op_counter.add(ops)
    return NormalEquationBlocks(tuple(a_blocks), tuple(b_blocks),
                                tuple(g_blocks), c, h,
                                st.species_coords, st.delta_coords,
                                st.species_penalized)


def _sym_solve(a: np.ndarray, rhs: np.ndarray, name: str) -> np.ndarray:
    """Solve a symmetric system: Cholesky first, pivoted symmetric fallback."""
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"non-finite normal-equation block: {name}")
    try:
        cf = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(cf, rhs, check_finite=False)
    except scipy.linalg.LinAlgError:
        pass
    try:
        return scipy.linalg.solve(a, rhs, assume_a="sym", check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"singular normal-equation block: {name} ({exc})")


def newton_step(blocks: NormalEquationBlocks, M: np.ndarray, nu: float,
                op_counter: OpCounter | None = None) -> np.ndarray:
    """Solve the penalized normal equations by block elimination.

    Returns the increment over the full flat coordinate vector (zeros at
    coordinates that are not estimated).  The ridge nu is added to the
    penalized rows/columns of each species block and of the delta block;
    the presence term M joins the gradient here.
    """
    n_flat = M.size
    r_act = blocks.delta_coords.size
    step = np.zeros(n_flat)
    schur = np.zeros((r_act, r_act))
    rhs = blocks.h_delta + M[blocks.delta_coords] if r_act else np.zeros(0)
    if r_act and nu:
        schur += nu * np.eye(r_act)
    solved = []     # (A_k^-1 [g_k | B_k]) per species
    ops = 0.0
    for i, (a, b, g) in enumerate(zip(blocks.a_blocks, blocks.b_blocks,
                                      blocks.g_blocks)):
        dk = a.shape[0]
        a_pen = a.copy()
        if nu:
            pen = blocks.species_penalized[i]
            a_pen[pen, pen] += nu
        g_tot = g + M[blocks.species_coords[i]]
        sol = _sym_solve(a_pen, np.column_stack([g_tot[:, None], b])
                         if r_act else g_tot[:, None],
                         f"species {i + 1}")
        solved.append(sol)
        if r_act:
            rhs = rhs - b.T @ sol[:, 0]
        ops += dk ** 3 + dk * dk * r_act + dk * r_act * r_act
    if r_act:
        schur = schur + blocks.c_delta
        for b, sol in zip(blocks.b_blocks, solved):
            schur -= b.T @ sol[:, 1:]
        d_delta = _sym_solve(schur, rhs, "delta block")
        step[blocks.delta_coords] = d_delta
        ops += r_act ** 3
    for coords, sol in zip(blocks.species_coords, solved):
        d_k = sol[:, 0]
        if r_act:
            d_k = d_k - sol[:, 1:] @ d_delta
        step[coords] = d_k
    if op_counter is not None:
        op_counter.add(ops)
    return step


def _initial_vector(design: BlockDesign, st: _Structure,
                    bundle: DataBundle) -> np.ndarray:
    """theta = 0 except intercepts started at crude log-rate estimates."""
    d = st.p + 2
    vec = np.zeros(st.m * d + st.r + len(st.pairs))
    total_w = float(design.bg_w.sum()) if design.n_bg else 0.0
    for k in range(1, st.m + 1):
        base = (k - 1) * d
        if st.pa_present[k - 1]:
            y = design.pa_y[:, k - 1]
            obs = ~np.isnan(y)
            n_obs = int(obs.sum())
            if design.pa_kind == "binary":
                rate = float(y[obs].mean())
                rate = min(max(rate, 0.5 / n_obs), 1 - 0.5 / n_obs)
            else:
                areas = np.exp(design.pa_offsets[obs])
                rate = max(float(y[obs].sum()) / float(areas.sum()),
                           0.5 / float(areas.sum()))
            vec[base] = np.log(rate)
        elif st.bg_used[k - 1] and total_w > 0:
            n_po = max(int(st.po_counts[k - 1]), 1)
            vec[base] = np.log(n_po / total_w)
    return vec


def _total_gradient(blocks: NormalEquationBlocks, M: np.ndarray) -> float:
    """Max-norm of the penalized-objective gradient over active coords."""
    worst = 0.0
    for coords, g in zip(blocks.species_coords, blocks.g_blocks):
        worst = max(worst, float(np.max(np.abs(g + M[coords]), initial=0.0)))
    if blocks.delta_coords.size:
        worst = max(worst, float(np.max(
            np.abs(blocks.h_delta + M[blocks.delta_coords]))))
    return worst


def _finalize_theta(vec: np.ndarray, st: _Structure,
                    bundle: DataBundle) -> CoefficientSet:
    """Translate pinned/absent coordinates into their reported values."""
    theta = _theta_of(vec, st)
    has_po = bundle.po is not None and bundle.bg is not None
    gamma = np.array(theta.gamma)
    delta = np.array(theta.delta)
    if not has_po:
        gamma[:] = np.nan
        delta[:] = np.nan
    else:
        for k in range(1, st.m + 1):
            if st.include_bias and not st.bg_used[k - 1]:
                gamma[k - 1] = -np.inf   # zero presence records: bias sup at 0
    return CoefficientSet(theta.alpha, theta.beta, gamma, delta,
                          st.pairs, theta.interaction_values)


def _covariance(blocks: NormalEquationBlocks, nu: float):
    """Invert the penalized information blockwise; also returns flat SEs."""
    r_act = blocks.delta_coords.size
    inv_parts = []
    for i, (a, b) in enumerate(zip(blocks.a_blocks, blocks.b_blocks)):
        a_pen = a.copy()
        if nu:
            pen = blocks.species_penalized[i]
            a_pen[pen, pen] += nu
        dk = a.shape[0]
        eye = np.eye(dk)
        sol = _sym_solve(a_pen, np.column_stack([eye, b]) if r_act else eye,
                         f"species {i + 1}")
        inv_parts.append((sol[:, :dk], sol[:, dk:]))   # A^-1, G = A^-1 B
    if r_act:
        schur = blocks.c_delta + (nu * np.eye(r_act) if nu else 0.0)
        for b, (_, gk) in zip(blocks.b_blocks, inv_parts):
            schur -= b.T @ gk
        s_inv = _sym_solve(schur, np.eye(r_act), "delta block")
    else:
        schur = np.zeros((0, 0))
        s_inv = np.zeros((0, 0))
    species_cov, cross = [], []
    for a_inv, gk in inv_parts:
        if r_act:
            species_cov.append(a_inv + gk @ s_inv @ gk.T)
            cross.append(gk @ s_inv)
        else:
            species_cov.append(a_inv)
            cross.append(np.zeros((a_inv.shape[0], 0)))
    return CovarianceBlocks(tuple(species_cov), tuple(cross), s_inv, schur,
                            blocks.species_coords, blocks.delta_coords)


def _flat_se(cov: CovarianceBlocks, n_flat: int) -> np.ndarray:
    se = np.full(n_flat, np.nan)
    for coords, block in zip(cov.species_coords, cov.species_cov):
        se[coords] = np.sqrt(np.maximum(np.diag(block), 0.0))
    if cov.delta_coords.size:
        se[cov.delta_coords] = np.sqrt(np.maximum(np.diag(cov.delta_cov), 0.0))
    return se


def _information(blocks: NormalEquationBlocks, st: _Structure,
                 nu: float) -> InformationBlocks:
    """Penalized curvature at theta-hat, scattered to full block layout."""
    d_full = st.p + 2
    a_out, b_out = [], []
    for k in range(1, st.m + 1):
        n_int_k = sum(1 for (ki, _) in st.pairs if ki == k)
        size = d_full + n_int_k
        a_full = np.zeros((size, size))
        b_full = np.zeros((size, st.r))
        coords = st.species_coords[k - 1]
        base = (k - 1) * d_full
        local = []
        next_int = d_full
        for c in coords:
            if base <= c < base + d_full:
                local.append(c - base)
            else:
                local.append(next_int)
                next_int += 1
        local = np.array(local, dtype=np.int64)
        a_pen = blocks.a_blocks[k - 1].copy()
        if nu:
            pen = blocks.species_penalized[k - 1]
            a_pen[pen, pen] += nu
        a_full[np.ix_(local, local)] = a_pen
        if st.delta_coords.size:
            b_full[local, :] = blocks.b_blocks[k - 1]
        a_out.append(a_full)
        b_out.append(b_full)
    c_full = np.zeros((st.r, st.r))
    if st.delta_coords.size:
        c_full[:, :] = blocks.c_delta + (nu * np.eye(st.r) if nu else 0.0)
    return InformationBlocks(tuple(a_out), tuple(b_out), c_full)


def fit(bundle: DataBundle, options: SolverOptions = SolverOptions(),
        interactions: tuple = (), include_bias: bool = True,
        op_counter: OpCounter | None = None) -> FitResult:
    """Fit the joint model by Newton iterations with block elimination."""
    design = build_design(bundle, interactions)
    st = _analyze(bundle, design, include_bias)
    vec = _initial_vector(design, st, bundle)
    nu = options.nu
    obj = _objective(design, vec, st, nu)
    if not np.isfinite(obj):
        raise NumericalError("objective not finite at the starting point")
    trace = [obj]
    converged = False
    rel_change = np.inf
    gnorm = np.inf
    iterations = 0
    message_parts = []
    if st.gamma_pinned.any():
        pinned = [k + 1 for k in np.nonzero(st.gamma_pinned)[0]]
        message_parts.append(
            f"species {pinned}: no survey data, bias intercept pinned to 0 "
            "(intensity identified up to a constant)")
    if st.skipped_bg_species:
        message_parts.append(
            f"species {list(st.skipped_bg_species)}: no presence-only records, "
            "bias component dropped")

    blocks = normal_equation_blocks(design, vec, st, options, op_counter)
    for _ in range(options.max_iterations):
        gnorm = _total_gradient(blocks, design.M)
        if gnorm < options.tol_gradient and rel_change < options.tol_objective:
            converged = True
            break
        step = newton_step(blocks, design.M, nu, op_counter)
        scale = 1.0
        new_obj = -np.inf
        for _ in range(options.step_halving_limit + 1):
            cand = vec + scale * step
            new_obj = _objective(design, cand, st, nu)
            if new_obj >= obj - 1e-12 * max(1.0, abs(obj)):
                break
            scale *= 0.5
        else:
            message_parts.append("step halving stalled")
            break
        vec = vec + scale * step
        rel_change = abs(new_obj - obj) / max(1.0, abs(obj))
        obj = new_obj
        trace.append(obj)
        iterations += 1
        blocks = normal_equation_blocks(design, vec, st, options, op_counter)
    else:
        gnorm = _total_gradient(blocks, design.M)
        converged = (gnorm < options.tol_gradient
                     and rel_change < options.tol_objective)
        if not converged:
            message_parts.append(
                f"not converged after {options.max_iterations} iterations")

    theta = _finalize_theta(vec, st, bundle)
    try:
        cov = _covariance(blocks, nu)
        se = _flat_se(cov, vec.size)
    except NumericalError as exc:
        cov = None
        se = np.full(vec.size, np.nan)
        message_parts.append(f"standard errors unavailable: {exc}")
    theta_pen = _theta_of(vec, st)
    penalty = 0.0
    if nu:
        penalty = 0.5 * nu * (float(np.sum(theta_pen.beta ** 2))
                              + float(np.sum(theta_pen.delta ** 2))
                              + float(np.sum(theta_pen.interaction_values ** 2)))
    loglik = obj + penalty
    alpha_anchored = st.pa_present | ~st.gamma_pinned
    return FitResult(
        theta=theta,
        negloglik=-loglik,
        objective=obj,
        information=_information(blocks, st, nu),
        standard_errors=se,
        converged=converged,
        iterations=iterations,
        deviance_trace=np.array([-2.0 * t for t in trace]),
        gradient_norm=gnorm,
        alpha_anchored=alpha_anchored,
        gamma_estimated=st.gamma_free.copy(),
        nu=nu,
        covariance=cov,
        message="; ".join(message_parts),
    )


def fit_dense(bundle: DataBundle, options: SolverOptions = SolverOptions(),
              interactions: tuple = (), include_bias: bool = True,
              op_counter: OpCounter | None = None) -> FitResult:
    """Reference Newton solver on the materialized joint design matrix.

    Same model, same step control, but every iteration assembles the
    full m(n_PA + n_BG) x D design and solves one dense D x D system.
    Kept as the verification oracle for the block solver and as the
    baseline for the operation-count scaling comparison.
    """
    design = build_design(bundle, interactions)
    st = _analyze(bundle, design, include_bias)
    m, p, r = st.m, st.p, st.r
    d = p + 2

    # materialize rows once: covariate slices are filled per species below
    active = np.concatenate([c for c in st.species_coords]
                            + ([st.delta_coords] if st.delta_coords.size else []))
    active = np.sort(active)
    pos_of = {int(c): i for i, c in enumerate(active)}
    n_active = active.size
    row_chunks = []
    for k in range(1, m + 1):
        base = (k - 1) * d
        if design.n_pa:
            y = design.pa_y[:, k - 1]
            obs = ~np.isnan(y)
            if obs.any():
                rows = np.zeros((int(obs.sum()), n_active))
                for j in range(1 + p):
                    rows[:, pos_of[base + j]] = design.pa_x1[obs, j]
                row_chunks.append(("pa", k, rows, y[obs],
                                   design.pa_offsets[obs]))
        if st.bg_used[k - 1] and design.n_bg:
            rows = np.zeros((design.n_bg, n_active))
            for j in range(1 + p):
                rows[:, pos_of[base + j]] = design.bg_x1[:, j]
            if st.gamma_free[k - 1]:
                rows[:, pos_of[base + 1 + p]] = 1.0
            if st.delta_coords.size:
                for j in range(r):
                    rows[:, pos_of[m * d + j]] = design.bg_z[:, j]
            for i, (ki, j) in enumerate(st.pairs):
                if ki == k and (m * d + r + i) in pos_of:
                    rows[:, pos_of[m * d + r + i]] = design.bg_z[:, j]
            row_chunks.append(("bg", k, rows, None, None))
    n_rows_total = sum(chunk[2].shape[0] for chunk in row_chunks)

    pen_mask = np.zeros(n_active, dtype=bool)
    for coords, pen in zip(st.species_coords, st.species_penalized):
        for c, q in zip(coords, pen):
            pen_mask[pos_of[int(c)]] = q
    pen_mask[[pos_of[int(c)] for c in st.delta_coords]] = True

    vec = _initial_vector(design, st, bundle)
    nu = options.nu
    obj = _objective(design, vec, st, nu)
    trace = [obj]
    converged = False
    rel_change = np.inf
    gnorm = np.inf
    iterations = 0

    def grad_hess(v):
        grad = np.zeros(n_active)
        hess = np.zeros((n_active, n_active))
        va = v[active]
        for kind, k, rows, y, offs in row_chunks:
            eta = rows @ va
            if kind == "pa":
                mu = np.exp(eta + offs)
                if design.pa_kind == "binary":
                    ones = y > 0
                    f = np.where(ones, cloglog_grad_factor(mu), -mu)
                    w = np.where(ones, cloglog_curvature(mu), mu)
                else:
                    f = y - mu
                    w = mu
            else:
                muw = design.bg_w * np.exp(eta)
                f = -muw
                w = muw
            grad += rows.T @ f
            hess += (rows * w[:, None]).T @ rows
        grad += design.M[active]
        grad[pen_mask] -= nu * va[pen_mask]
        hess[pen_mask, pen_mask] += nu
        if op_counter is not None:
            op_counter.add(n_rows_total * n_active ** 2 + n_active ** 3)
        return grad, hess

    for _ in range(options.max_iterations):
        grad, hess = grad_hess(vec)
        gnorm = float(np.max(np.abs(grad), initial=0.0))
        if gnorm < options.tol_gradient and rel_change < options.tol_objective:
            converged = True
            break
        try:
            step_a = scipy.linalg.solve(hess, grad, assume_a="sym")
        except scipy.linalg.LinAlgError as exc:
            raise NumericalError(f"singular dense system: {exc}")
        step = np.zeros(vec.size)
        step[active] = step_a
        scale = 1.0
        for _ in range(options.step_halving_limit + 1):
            cand = vec + scale * step
            new_obj = _objective(design, cand, st, nu)
            if new_obj >= obj - 1e-12 * max(1.0, abs(obj)):
                break
            scale *= 0.5
        else:
            break
        vec = vec + scale * step
        rel_change = abs(new_obj - obj) / max(1.0, abs(obj))
        obj = new_obj
        trace.append(obj)
        iterations += 1

    theta = _finalize_theta(vec, st, bundle)
    grad, hess = grad_hess(vec)
    try:
        cov_full = scipy.linalg.solve(hess, np.eye(n_active), assume_a="sym")
        se = np.full(vec.size, np.nan)
        se[active] = np.sqrt(np.maximum(np.diag(cov_full), 0.0))
    except scipy.linalg.LinAlgError:
        se = np.full(vec.size, np.nan)
    theta_pen = _theta_of(vec, st)
    penalty = 0.0
    if nu:
        penalty = 0.5 * nu * (float(np.sum(theta_pen.beta ** 2))
                              + float(np.sum(theta_pen.delta ** 2))
                              + float(np.sum(theta_pen.interaction_values ** 2)))
    blocks = normal_equation_blocks(design, vec, st, options)
    try:
        cov = _covariance(blocks, nu)
    except NumericalError:
        cov = None
    return FitResult(
        theta=theta,
        negloglik=-(obj + penalty),
        objective=obj,
        information=_information(blocks, st, nu),
        standard_errors=se,
        converged=converged,
        iterations=iterations,
        deviance_trace=np.array([-2.0 * t for t in trace]),
        gradient_norm=gnorm,
        alpha_anchored=st.pa_present | ~st.gamma_pinned,
        gamma_estimated=st.gamma_free.copy(),
        nu=nu,
        covariance=cov,
        message="dense reference solver",
    )


@dataclass(frozen=True)
class WaldRegion:
    """Elliptical Wald confidence region for a coefficient pair."""

    center: np.ndarray
    covariance: np.ndarray
    level: float

    @property
    def area(self) -> float:
        from scipy.stats import chi2
        q = chi2.ppf(self.level, df=2)
        det = float(np.linalg.det(self.covariance))
        return float(np.pi * q * np.sqrt(max(det, 0.0)))

    def contains(self, point) -> bool:
        from scipy.stats import chi2
        diff = np.asarray(point, dtype=float) - self.center
        try:
            stat = diff @ np.linalg.solve(self.covariance, diff)
        except np.linalg.LinAlgError:
            raise NumericalError("singular covariance in Wald region")
        return bool(stat <= chi2.ppf(self.level, df=2))


def wald_region(fit_result: FitResult, coords, level: float = 0.95) -> WaldRegion:
    """Wald ellipse for the coefficient pair at the given flat indices."""
    if fit_result.covariance is None:
        raise NumericalError("fit carries no covariance (singular information)")
    if not fit_result.converged:
        raise NumericalError("fit did not converge; Wald region unavailable")
    i, j = int(coords[0]), int(coords[1])
    flat = fit_result.theta.flatten()
    try:
        cov = fit_result.covariance.pair_cov(i, j)
    except ValueError as exc:
        raise NumericalError(str(exc))
    return WaldRegion(np.array([flat[i], flat[j]]), cov, float(level))
