"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Run with  pytest tests/test_acceptance.py -v -s  to see the lines as
they complete.  Every tolerance is pinned here; nothing is calibrated
at run time.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from poolsdm.data import (BackgroundSample, CoefficientSet, DataBundle,
                          PresenceOnlyDataset)
from poolsdm.evaluate import auc, run_comparison
from poolsdm.likelihood import (joint_gradient, joint_objective, po_loglik)
from poolsdm.resample import block_cv_folds, make_partition, split_bundle
from poolsdm.rng import stream
from poolsdm.simulate import (SimulationConfig, simulate_bundle,
                              simulate_covariates, simulate_species_process,
                              thin_process)
from poolsdm.solver import OpCounter, SolverOptions, fit, fit_dense
from conftest import make_bundle

PAPER_COV = np.array([[1.0, 0.0, 0.95],
                      [0.0, 1.0, 0.0],
                      [0.95, 0.0, 1.0]])
TRUE_SPECIES1 = (-2.0, 1.0, -0.5, -4.0, -0.3)   # alpha, b11, b12, gamma, delta


def _report(name: str, ok: bool, detail: str = ""):
    line = f"[acceptance] {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    print(line)
    assert ok, line


def eight_species_theta() -> CoefficientSet:
    """Species 1 at the reference values; seven companions sharing delta."""
    k = np.arange(7)
    alpha = np.concatenate([[TRUE_SPECIES1[0]], -2.0 - 0.05 * k])
    beta = np.vstack([[TRUE_SPECIES1[1], TRUE_SPECIES1[2]],
                      np.column_stack([0.9 - 0.12 * k, -0.4 + 0.11 * k])])
    gamma = np.concatenate([[TRUE_SPECIES1[3]], -4.0 - 0.04 * k])
    return CoefficientSet(alpha, beta, gamma, [TRUE_SPECIES1[4]])


def test_criterion_1_solver_oracle_equivalence():
    started = time.perf_counter()
    rng = np.random.default_rng(314)
    worst_theta = 0.0
    worst_obj = 0.0
    for i in range(50):
        m = int(rng.integers(1, 7))
        p = int(rng.integers(1, 5))
        r = int(rng.integers(0, 4))
        n = int(rng.integers(60, 301))
        nu = float(rng.choice([0.0, 100.0]))
        bundle, _ = make_bundle(seed=10_000 + i, m=m, p=p, r=r,
                                n_cells=n, n_pa=max(20, n // 3))
        opts = SolverOptions(nu=nu, tol_gradient=1e-8)
        a = fit(bundle, opts)
        b = fit_dense(bundle, opts)
        fa, fb = a.theta.flatten(), b.theta.flatten()
        finite = np.isfinite(fa)
        worst_theta = max(worst_theta, float(np.max(np.abs(fa[finite]
                                                           - fb[finite]))))
        worst_obj = max(worst_obj, abs(a.objective - b.objective))
    elapsed = time.perf_counter() - started
    _report("1 solver oracle equivalence",
            worst_theta < 1e-6 and worst_obj < 1e-10 and elapsed < 10.0,
            f"max theta diff {worst_theta:.2e}, max objective diff "
            f"{worst_obj:.2e}, {elapsed:.1f}s")


def test_criterion_2_gradient_correctness():
    bundle, theta0 = make_bundle(seed=271, m=2, p=2, r=2, n_cells=60,
                                 n_pa=30)
    rng = np.random.default_rng(271)
    m, p, r = 2, 2, 2
    h = 1e-5
    worst = 0.0
    for trial in range(20):
        nu = 0.0 if trial % 2 == 0 else 100.0
        vec = theta0.flatten() + rng.normal(0, 0.3, size=theta0.n_params)
        grad = joint_gradient(CoefficientSet.unflatten(vec, m, p, r),
                              bundle, nu=nu)
        for i in range(vec.size):
            up, dn = vec.copy(), vec.copy()
            up[i] += h
            dn[i] -= h
            fd = (joint_objective(CoefficientSet.unflatten(up, m, p, r),
                                  bundle, nu).objective
                  - joint_objective(CoefficientSet.unflatten(dn, m, p, r),
                                    bundle, nu).objective) / (2 * h)
            rel = abs(grad[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, rel)
    _report("2 gradient correctness", worst < 1e-5,
            f"max relative error {worst:.2e} over 20 random points")


def test_criterion_3_identifiability_invariance():
    worst = 0.0
    for seed in (41, 42):
        bundle, theta = make_bundle(seed=seed, m=2, n_cells=100,
                                    with_pa=False)
        for k in (1, 2):
            base = po_loglik(theta, bundle.po, bundle.bg, bundle.field, k)
            for c in (math.log(2), -math.log(2), 5.0, -5.0):
                shift = np.zeros(2)
                shift[k - 1] = c
                moved = CoefficientSet(theta.alpha + shift, theta.beta,
                                       theta.gamma - shift, theta.delta)
                val = po_loglik(moved, bundle.po, bundle.bg, bundle.field, k)
                worst = max(worst, abs(val - base))
    _report("3 identifiability invariance", worst <= 1e-12,
            f"max |shift difference| {worst:.2e}")


def test_criterion_4_po_intercept_property():
    worst = 0.0
    for seed, include_bias in ((43, True), (44, False)):
        bundle, _ = make_bundle(seed=seed, m=1, n_cells=200, with_pa=False)
        res = fit(bundle, SolverOptions(nu=0.0, tol_gradient=1e-9),
                  include_bias=include_bias)
        assert res.converged
        field, bg = bundle.field, bundle.bg
        rows = field.rows_of(bg.cell_ids)
        theta = res.theta
        eta = theta.alpha[0] + field.x[rows] @ theta.beta[0]
        if include_bias:
            eta = eta + theta.gamma[0] + field.z[rows] @ theta.delta
        total = float(bg.weights @ np.exp(eta))
        n_po = bundle.po.n_records(1)
        worst = max(worst, abs(total - n_po) / n_po)
    _report("4 PO intercept property", worst < 1e-8,
            f"max relative integral error {worst:.2e}")


def _species3_bundles(seed: int):
    """One §-style replicate: full 8-species bundle + species-1 views."""
    cfg = SimulationConfig(n_cells=40_000, covariance=PAPER_COV,
                           true_theta=eight_species_theta(),
                           rng_seed=seed, n_pa_sites=500)
    pooled = simulate_bundle(cfg)
    single = pooled.species_subset([1])
    po_only = DataBundle(single.field, None, single.po, single.bg)
    return pooled, single, po_only


def test_criterion_5_simulation_bias_and_recovery():
    started = time.perf_counter()
    opts = SolverOptions(nu=0.0)
    unadj_b11, pooled_beta, pooled_se = [], [], []
    se_pairs = []
    for rep in range(20):
        pooled_bundle, single, po_only = _species3_bundles(20_000 + rep)
        unadj = fit(po_only, opts, include_bias=False)
        unadj_b11.append(unadj.theta.beta[0, 0])
        adj = fit(po_only, opts, include_bias=True)
        both = fit(single, opts)
        pooled = fit(pooled_bundle, opts)
        pooled_beta.append(pooled.theta.beta[0].copy())
        pooled_se.append(pooled.se("beta", 1, 0))
        se_pairs.append((pooled.se("beta", 1, 0), both.se("beta", 1, 0),
                         adj.se("beta", 1, 0)))

    # (a) omitted-variable identity: beta1 + 0.95 * delta = 0.715
    mean_unadj = float(np.mean(unadj_b11))
    ok_a = abs(mean_unadj - 0.715) < 0.03

    # (b) pooled fit recovers beta_1 within 3 SE of the truth
    est = np.vstack(pooled_beta)
    mean_est = est.mean(axis=0)
    se_mean = est.std(axis=0, ddof=1) / math.sqrt(est.shape[0])
    truth = np.array([TRUE_SPECIES1[1], TRUE_SPECIES1[2]])
    ok_b = bool(np.all(np.abs(mean_est - truth) <= 3 * se_mean))

    # (c) Wald SE ordering for beta_11: pooled < PA+PO single < PO-adjusted
    ses = np.array(se_pairs)
    mean_se = ses.mean(axis=0)
    ok_c = mean_se[0] < mean_se[1] < mean_se[2]

    elapsed = time.perf_counter() - started
    _report("5 simulation bias/recovery",
            ok_a and ok_b and ok_c and elapsed < 300.0,
            f"unadjusted b11 {mean_unadj:.4f} (target 0.715±0.03); pooled "
            f"beta {mean_est.round(4).tolist()} ±3SE "
            f"{(3 * se_mean).round(4).tolist()}; SEs pooled/single/adjusted "
            f"{mean_se.round(4).tolist()}; {elapsed:.0f}s")


def test_criterion_6_complexity_scaling():
    opts = SolverOptions(max_iterations=4, tol_objective=1e-300,
                         tol_gradient=1e-300)
    block_ops, dense_ops = {}, {}
    for m in (4, 16):
        bundle, _ = make_bundle(seed=55, m=m, p=3, r=2, n_cells=150, n_pa=60)
        counter = OpCounter()
        fit(bundle, opts, op_counter=counter)
        block_ops[m] = counter.ops
        counter = OpCounter()
        fit_dense(bundle, opts, op_counter=counter)
        dense_ops[m] = counter.ops
    block_ratio = block_ops[16] / block_ops[4]
    dense_ratio = dense_ops[16] / dense_ops[4]
    _report("6 complexity scaling",
            block_ratio <= 4.5 and dense_ratio >= 30.0,
            f"block 16/4 ratio {block_ratio:.2f} (<= 4.5), dense ratio "
            f"{dense_ratio:.1f} (>= 30)")


def test_criterion_7_block_cv_bookkeeping():
    theta = CoefficientSet([-1.0], [[0.5, -0.3]], [-1.5], [-0.2])
    cfg = SimulationConfig(n_cells=27 * 87, covariance=PAPER_COV,
                           true_theta=theta, rng_seed=77,
                           grid_shape=(27, 87), n_pa_sites=400)
    bundle = simulate_bundle(cfg)
    partition = make_partition(bundle.field, 3.0, 3.0)
    ok_blocks = partition.n_blocks == 261
    folds = block_cv_folds(partition, 10, seed=7)
    sizes = [int((folds == f).sum()) for f in range(10)]
    ok_sizes = sizes == [26] * 10 and int((folds == -1).sum()) == 1

    leaked = 0
    field = bundle.field
    for fold in range(10):
        train, test = split_bundle(bundle, partition, folds, fold)
        test_blocks = set(np.nonzero(folds == fold)[0].tolist())
        for cells in ([train.survey.cell_ids] if train.survey is not None else []) \
                + ([train.po.cells(1)] if train.po is not None else []) \
                + ([train.bg.cell_ids] if train.bg is not None else []):
            if len(cells):
                blocks = partition.block_of_cell[field.rows_of(cells)]
                leaked += int(np.isin(blocks, list(test_blocks)).sum())
    _report("7 block CV bookkeeping",
            ok_blocks and ok_sizes and leaked == 0,
            f"{partition.n_blocks} blocks, fold sizes {sorted(set(sizes))}, "
            f"{int((folds == -1).sum())} excluded, {leaked} leaked rows")


def test_criterion_8_thinning_law():
    lam, b, n_cells = 2.0, 0.5, 500
    theta = CoefficientSet([math.log(lam)], [[0.0, 0.0]],
                           [math.log(b)], [0.0])
    cfg = SimulationConfig(n_cells=n_cells, covariance=np.eye(3),
                           true_theta=theta, rng_seed=88)
    field = simulate_covariates(cfg)
    totals = np.array([
        thin_process(simulate_species_process(field, theta, 1,
                                              stream(88, 2, 1, rep)),
                     field, theta, 1, stream(88, 3, 1, rep)).n_records(1)
        for rep in range(200)])
    mean = n_cells * lam * b
    grid = np.arange(stats.poisson.ppf(1e-7, mean),
                     stats.poisson.ppf(1 - 1e-7, mean) + 1)
    probs = stats.poisson.pmf(grid, mean)
    edges, acc = [grid[0] - 0.5], 0.0
    for g, pr in zip(grid, probs):
        acc += pr
        if acc * 200 >= 5:
            edges.append(g + 0.5)
            acc = 0.0
    edges[-1] = np.inf
    observed, _ = np.histogram(totals, bins=edges)
    expected = np.diff([stats.poisson.cdf(e, mean) for e in edges])
    expected = expected * 200 / expected.sum()
    chi2 = float(((observed - expected) ** 2 / expected).sum())
    crit = float(stats.chi2.ppf(1 - 0.001, df=len(observed) - 1))
    _report("8 thinning law", chi2 < crit,
            f"chi2 {chi2:.1f} < critical {crit:.1f} at alpha=0.001, "
            f"{len(observed)} classes, 200 replicates")


def test_criterion_9_reduction_properties():
    # (i) PA-only pooled fit equals per-species fits
    m = 3
    bundle, _ = make_bundle(seed=66, m=m, with_po=False, n_pa=100,
                            n_cells=150)
    pooled = fit(bundle)
    worst = 0.0
    for k in range(1, m + 1):
        single = fit(bundle.species_subset([k]))
        got = np.concatenate([[pooled.theta.alpha[k - 1]],
                              pooled.theta.beta[k - 1]])
        want = np.concatenate([[single.theta.alpha[0]],
                               single.theta.beta[0]])
        worst = max(worst, float(np.max(np.abs(got - want))))
    ok_i = worst < 1e-6

    # (ii) zero interaction coefficients change nothing, exactly
    bundle2, theta2 = make_bundle(seed=67, m=2, p=1, r=2)
    pairs = ((1, 0), (2, 1))
    padded = CoefficientSet(theta2.alpha, theta2.beta, theta2.gamma,
                            theta2.delta, pairs, [0.0, 0.0])
    diff = abs(joint_objective(padded, bundle2, nu=5.0).objective
               - joint_objective(theta2, bundle2, nu=5.0).objective)
    ok_ii = diff == 0.0

    # (iii) AUC rank invariance across 1000 random monotone transforms
    rng = np.random.default_rng(68)
    scores = rng.normal(size=60).round(1)   # ties included
    labels = rng.integers(0, 2, size=60)
    labels[0], labels[1] = 0, 1
    base = auc(scores, labels)
    ok_iii = True
    for _ in range(1000):
        a = 0.1 + float(rng.random())            # slope > 0
        bshift = float(rng.normal())
        c = float(rng.random()) * a * 0.9        # keep derivative positive
        d = 0.1 + float(rng.random())
        t = a * scores + bshift + c * np.tanh(d * scores)
        if abs(auc(t, labels) - base) > 1e-12:
            ok_iii = False
            break
    _report("9 reduction properties", ok_i and ok_ii and ok_iii,
            f"PA-only max diff {worst:.2e}; zero-interaction diff {diff}; "
            f"AUC invariant over 1000 transforms: {ok_iii}")
