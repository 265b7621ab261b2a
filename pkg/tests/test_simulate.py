import numpy as np
import pytest
from scipy import stats

from poolsdm.data import CoefficientSet
from poolsdm.errors import DataError, NumericalError
from poolsdm.rng import stream
from poolsdm.simulate import (SimulationConfig, make_survey, simulate_bundle,
                              simulate_covariates, simulate_species_process,
                              thin_process)

PAPER_COV = np.array([[1.0, 0.0, 0.95],
                      [0.0, 1.0, 0.0],
                      [0.95, 0.0, 1.0]])


def paper_theta(m=1):
    alpha = np.full(m, -2.0)
    beta = np.tile([1.0, -0.5], (m, 1))
    gamma = np.full(m, -4.0)
    return CoefficientSet(alpha, beta, gamma, [-0.3])


def config(n_cells=1000, seed=0, **kw):
    return SimulationConfig(n_cells=n_cells, covariance=PAPER_COV,
                            true_theta=paper_theta(), rng_seed=seed, **kw)


class TestSimulateCovariates:
    def test_identity_covariance_uncorrelated(self):
        theta = paper_theta()
        cfg = SimulationConfig(n_cells=100_000, covariance=np.eye(3),
                               true_theta=theta, rng_seed=1)
        field = simulate_covariates(cfg)
        corr = np.corrcoef(field.x[:, 0], field.z[:, 0])[0, 1]
        assert abs(corr) < 0.02

    def test_strong_covariance_recovered(self):
        field = simulate_covariates(config(n_cells=100_000, seed=2))
        corr = np.corrcoef(field.x[:, 0], field.z[:, 0])[0, 1]
        assert abs(corr - 0.95) < 0.01
        # the uncorrelated pair stays uncorrelated
        assert abs(np.corrcoef(field.x[:, 1], field.z[:, 0])[0, 1]) < 0.02

    def test_deterministic_given_seed(self):
        a = simulate_covariates(config(seed=3))
        b = simulate_covariates(config(seed=3))
        assert np.array_equal(a.x, b.x) and np.array_equal(a.z, b.z)
        c = simulate_covariates(config(seed=4))
        assert not np.array_equal(a.x, c.x)

    def test_non_pd_covariance_rejected(self):
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])
        theta = CoefficientSet([0.0], [[0.0]], [0.0], [0.0])
        with pytest.raises(DataError, match="positive-definite"):
            SimulationConfig(n_cells=10, covariance=bad, true_theta=theta)

    def test_grid_shape_controls_bounding_box(self):
        field = simulate_covariates(config(n_cells=12, grid_shape=(3, 4)))
        assert field.locations[:, 0].max() == pytest.approx(2.5)
        assert field.locations[:, 1].max() == pytest.approx(3.5)


class TestSpeciesProcess:
    def test_constant_intensity_mean(self):
        theta = CoefficientSet([np.log(2.0)], [[0.0, 0.0]], [0.0], [0.0])
        cfg = SimulationConfig(n_cells=100_000, covariance=np.eye(3),
                               true_theta=theta, rng_seed=5)
        field = simulate_covariates(cfg)
        counts = simulate_species_process(field, theta, 1, stream(5, 2, 1))
        assert abs(counts.mean() - 2.0) < 0.02

    def test_zero_intensity_sentinel(self):
        theta = CoefficientSet([-np.inf], [[0.0, 0.0]], [0.0], [0.0])
        field = simulate_covariates(config(n_cells=500))
        counts = simulate_species_process(field, theta, 1, stream(0, 2, 1))
        assert np.all(counts == 0)

    def test_mean_matches_intensity_oracle(self):
        # Monte-Carlo mean over the same cells is the independent oracle
        field = simulate_covariates(config(n_cells=50_000, seed=6))
        theta = paper_theta()
        counts = simulate_species_process(field, theta, 1, stream(6, 2, 1))
        eta = theta.alpha[0] + field.x @ theta.beta[0]
        lam = field.areas * np.exp(eta)
        expect = lam.mean()
        se = np.sqrt(lam.sum()) / field.n_cells
        assert abs(counts.mean() - expect) <= 3 * se

    def test_overflow_names_cell(self):
        field = simulate_covariates(config(n_cells=100))
        theta = CoefficientSet([1000.0], [[0.0, 0.0]], [0.0], [0.0])
        with pytest.raises(NumericalError, match="cell"):
            simulate_species_process(field, theta, 1, stream(0, 2, 1))

    def test_disjoint_cells_uncorrelated(self):
        theta = CoefficientSet([np.log(3.0)], [[0.0, 0.0]], [0.0], [0.0])
        cfg = SimulationConfig(n_cells=2, covariance=np.eye(3),
                               true_theta=theta, rng_seed=7)
        field = simulate_covariates(cfg)
        reps = np.array([simulate_species_process(field, theta, 1,
                                                  stream(7, 2, 1, i))
                         for i in range(4000)])
        corr = np.corrcoef(reps[:, 0], reps[:, 1])[0, 1]
        assert abs(corr) < 0.05


class TestThinning:
    def test_identity_thinning(self):
        field = simulate_covariates(config(n_cells=300))
        theta = CoefficientSet([0.0], [[0.2, 0.1]], [0.0], [0.0])
        counts = simulate_species_process(field, theta, 1, stream(1, 2, 1))
        po = thin_process(counts, field, theta, 1, stream(1, 3, 1))
        kept = np.bincount(field.rows_of(po.cells(1)),
                           minlength=field.n_cells)
        assert np.array_equal(kept, counts)

    def test_zero_probability_sentinel(self):
        field = simulate_covariates(config(n_cells=300))
        theta = CoefficientSet([0.5], [[0.0, 0.0]], [-np.inf], [0.0])
        counts = simulate_species_process(field, theta, 1, stream(2, 2, 1))
        po = thin_process(counts, field, theta, 1, stream(2, 3, 1))
        assert po.n_records(1) == 0

    def test_binomial_retention_oracle(self):
        # constant b = e^-4 over one million individuals
        field = simulate_covariates(config(n_cells=1000))
        theta = CoefficientSet([np.log(1000.0)], [[0.0, 0.0]], [-4.0], [0.0])
        counts = simulate_species_process(field, theta, 1, stream(3, 2, 1))
        total = counts.sum()
        po = thin_process(counts, field, theta, 1, stream(3, 3, 1))
        expect = total * np.exp(-4.0)
        assert abs(po.n_records(1) - expect) <= 3 * np.sqrt(expect)

    def test_rejects_probability_above_one(self):
        field = simulate_covariates(config(n_cells=200))
        theta = CoefficientSet([1.0], [[0.0, 0.0]], [0.5], [0.0])
        counts = simulate_species_process(field, theta, 1, stream(4, 2, 1))
        assert counts.sum() > 0
        with pytest.raises(DataError, match="thinning probability"):
            thin_process(counts, field, theta, 1, stream(4, 3, 1))

    def test_thinned_total_is_poisson(self):
        # chi-square goodness of fit for the marginal law of the
        # retained total under constant intensity and constant b
        lam, b, n_cells = 2.0, 0.5, 500
        theta = CoefficientSet([np.log(lam)], [[0.0, 0.0]],
                               [np.log(b)], [0.0])
        cfg = SimulationConfig(n_cells=n_cells, covariance=np.eye(3),
                               true_theta=theta, rng_seed=8)
        field = simulate_covariates(cfg)
        totals = []
        for rep in range(200):
            counts = simulate_species_process(field, theta, 1,
                                              stream(8, 2, 1, rep))
            po = thin_process(counts, field, theta, 1, stream(8, 3, 1, rep))
            totals.append(po.n_records(1))
        totals = np.array(totals)
        mean = n_cells * lam * b
        # bin the Poisson law so each class expects >= 5 of 200 draws
        grid = np.arange(stats.poisson.ppf(1e-6, mean),
                         stats.poisson.ppf(1 - 1e-6, mean) + 1)
        probs = stats.poisson.pmf(grid, mean)
        edges, acc = [grid[0] - 0.5], 0.0
        for g, pr in zip(grid, probs):
            acc += pr
            if acc * 200 >= 5:
                edges.append(g + 0.5)
                acc = 0.0
        edges[-1] = np.inf
        observed, _ = np.histogram(totals, bins=edges)
        expected = np.diff([stats.poisson.cdf(e, mean) for e in
                            [edges[0]] + list(edges[1:])])
        expected = expected * 200 / expected.sum()
        chi2 = float(((observed - expected) ** 2 / expected).sum())
        crit = stats.chi2.ppf(1 - 0.001, df=len(observed) - 1)
        assert chi2 < crit


class TestMakeSurvey:
    def test_binary_and_count_kinds(self):
        field = simulate_covariates(config(n_cells=10))
        counts = np.array([[3, 0, 1, 0, 2, 0, 0, 5, 0, 1]])
        binary = make_survey(field, counts, field.cell_ids, "binary")
        assert np.array_equal(binary.responses[:, 0],
                              [1, 0, 1, 0, 1, 0, 0, 1, 0, 1])
        count = make_survey(field, counts, field.cell_ids, "count")
        assert np.array_equal(count.responses[:, 0], counts[0])

    def test_unknown_cell_rejected(self):
        field = simulate_covariates(config(n_cells=5))
        with pytest.raises(KeyError):
            make_survey(field, np.zeros((1, 5)), [99], "binary")


class TestSimulateBundle:
    def test_reproducible_and_consistent(self):
        theta = paper_theta(m=2)
        cfg = SimulationConfig(n_cells=2000, covariance=PAPER_COV,
                               true_theta=theta, rng_seed=9, n_pa_sites=100)
        a = simulate_bundle(cfg)
        b = simulate_bundle(cfg)
        assert np.array_equal(a.survey.responses, b.survey.responses)
        for k in (1, 2):
            assert np.array_equal(a.po.cells(k), b.po.cells(k))
        assert a.survey.n_sites == 100
        assert a.bg.n_points == 2000
        assert a.bg.total_weight == pytest.approx(2000.0)

    def test_sampled_background_weights(self):
        theta = paper_theta()
        cfg = SimulationConfig(n_cells=1000, covariance=PAPER_COV,
                               true_theta=theta, rng_seed=10,
                               n_background=250)
        bundle = simulate_bundle(cfg)
        assert bundle.bg.n_points == 250
        # uniform background: weights sum to the domain area
        assert bundle.bg.total_weight == pytest.approx(1000.0)
