import math

import numpy as np
import pytest

from poolsdm.data import (BackgroundSample, CoefficientSet, CovariateField,
                          PresenceOnlyDataset, SurveyDataset,
                          linear_predictor_bias, linear_predictor_species)
from conftest import make_field, random_theta


def theta_single(alpha, beta, gamma=0.0, delta=()):
    beta = np.atleast_1d(beta)
    delta = np.atleast_1d(delta) if len(np.atleast_1d(delta)) else np.zeros(0)
    return CoefficientSet([alpha], [beta], [gamma], delta)


class TestLinearPredictors:
    def test_zero_coefficients(self):
        theta = theta_single(0.0, [0.0, 0.0])
        assert linear_predictor_species(theta, 1, [3.0, -9.0]) == 0.0

    def test_species_one_reference_values(self):
        theta = theta_single(-2.0, [1.0, -0.5])
        assert linear_predictor_species(theta, 1, [1.0, 1.0]) == pytest.approx(-1.5)

    def test_arithmetic_identity(self):
        theta = theta_single(1.0, [2.0])
        assert linear_predictor_species(theta, 1, [3.0]) == pytest.approx(7.0)

    def test_dimension_mismatch(self):
        theta = theta_single(0.0, [1.0, 2.0])
        with pytest.raises(ValueError):
            linear_predictor_species(theta, 1, [1.0])

    def test_bias_reference_values(self):
        theta = CoefficientSet([0.0], [[0.0]], [-4.0], [-0.3])
        assert linear_predictor_bias(theta, 1, [1.0]) == pytest.approx(-4.3)

    def test_bias_identity_thinning(self):
        theta = CoefficientSet([0.0], [[0.0]], [0.0], [0.0])
        assert linear_predictor_bias(theta, 1, [5.0]) == 0.0

    def test_bias_with_interaction(self):
        theta = CoefficientSet([0.0], [[0.0]], [0.0], [1.0],
                               interaction_pairs=((1, 0),),
                               interaction_values=[0.5])
        assert linear_predictor_bias(theta, 1, [2.0]) == pytest.approx(3.0)

    def test_bias_zero_interactions_match_interaction_free(self):
        rng = np.random.default_rng(3)
        base = CoefficientSet([0.3], [[0.1]], [-1.0], rng.normal(size=3))
        with_int = CoefficientSet(base.alpha, base.beta, base.gamma, base.delta,
                                  interaction_pairs=((1, 0), (1, 2)),
                                  interaction_values=[0.0, 0.0])
        for _ in range(20):
            z = rng.normal(size=3)
            assert linear_predictor_bias(with_int, 1, z) \
                == linear_predictor_bias(base, 1, z)

    def test_bias_dimension_mismatch(self):
        theta = CoefficientSet([0.0], [[0.0]], [0.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            linear_predictor_bias(theta, 1, [1.0])


class TestCoefficientSet:
    def test_flatten_roundtrip(self):
        rng = np.random.default_rng(7)
        for m, p, r in [(1, 1, 0), (2, 3, 2), (4, 0, 1)]:
            theta = random_theta(rng, m, p, r)
            back = CoefficientSet.unflatten(theta.flatten(), m, p, r)
            assert np.array_equal(back.flatten(), theta.flatten())
            assert np.array_equal(back.alpha, theta.alpha)
            assert np.array_equal(back.beta, theta.beta)
            assert np.array_equal(back.gamma, theta.gamma)
            assert np.array_equal(back.delta, theta.delta)

    def test_flatten_roundtrip_with_interactions(self):
        pairs = ((2, 0), (1, 1))
        theta = CoefficientSet([0.1, 0.2], [[1.0], [2.0]], [0.3, 0.4],
                               [0.5, 0.6], pairs, [7.0, 8.0])
        # r=1? delta has length 2 here, so z columns 0..1 are valid
        back = CoefficientSet.unflatten(theta.flatten(), 2, 1, 2, pairs)
        assert np.array_equal(back.flatten(), theta.flatten())
        assert back.interaction(2, 0) == 7.0
        assert back.interaction(1, 1) == 8.0
        assert back.interaction(2, 1) == 0.0

    def test_total_length(self):
        m, p, r = 3, 4, 2
        theta = CoefficientSet.zeros(m, p, r)
        assert theta.flatten().size == m * (p + 2) + r
        assert theta.n_params == m * (p + 2) + r

    def test_flat_ordering_matches_param_index(self):
        theta = CoefficientSet([1.0, 2.0], [[3.0], [4.0]], [5.0, 6.0], [7.0],
                               ((2, 0),), [9.0])
        flat = theta.flatten()
        assert flat[theta.param_index("alpha", 2)] == 2.0
        assert flat[theta.param_index("beta", 2, 0)] == 4.0
        assert flat[theta.param_index("gamma", 1)] == 5.0
        assert flat[theta.param_index("delta", j=0)] == 7.0
        assert flat[theta.param_index("interaction", 2, 0)] == 9.0

    def test_duplicate_interactions_rejected(self):
        with pytest.raises(ValueError):
            CoefficientSet([0.0], [[0.0]], [0.0], [0.0],
                           ((1, 0), (1, 0)), [1.0, 2.0])

    def test_dimension_consistency_enforced(self):
        with pytest.raises(ValueError):
            CoefficientSet([0.0, 1.0], [[0.0]], [0.0], [0.0])


class TestFieldAndDatasets:
    def test_field_invariants(self):
        rng = np.random.default_rng(0)
        field = make_field(rng, n_cells=10)
        assert field.n_cells == 10 and field.p == 2 and field.r == 1
        assert not field.x.flags.writeable

    def test_field_rejects_bad_area(self):
        with pytest.raises(ValueError, match="area"):
            CovariateField([0], [[0.0, 0.0]], [0.0], [[1.0]], [[1.0]])

    def test_field_rejects_duplicate_ids(self):
        with pytest.raises(ValueError, match="unique"):
            CovariateField([1, 1], [[0, 0], [1, 1]], [1.0, 1.0],
                           [[1.0], [2.0]], [[1.0], [2.0]])

    def test_rows_of_unknown_cell(self):
        rng = np.random.default_rng(0)
        field = make_field(rng, n_cells=5)
        with pytest.raises(KeyError, match="99"):
            field.rows_of([0, 99])

    def test_survey_binary_validation(self):
        with pytest.raises(ValueError, match="binary"):
            SurveyDataset([0], [0], [1.0], [[2.0]], "binary")

    def test_survey_count_validation(self):
        with pytest.raises(ValueError, match="count"):
            SurveyDataset([0], [0], [1.0], [[-1.0]], "count")

    def test_survey_mask_roundtrip(self):
        y = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        s = SurveyDataset([0, 1, 2], [0, 1, 2], np.ones(3), y, "binary")
        masked = s.with_mask(1, np.array([True, False, True]))
        assert np.array_equal(masked.observed_mask(1), [True, False, True])
        assert np.array_equal(masked.observed_mask(2), [True, True, True])
        # original untouched
        assert s.observed_mask(1).all()

    def test_background_weights_positive(self):
        with pytest.raises(ValueError, match="positive"):
            BackgroundSample([0, 1], [1.0, 0.0])

    def test_po_record_counts(self):
        po = PresenceOnlyDataset(2, (np.array([1, 1, 2]), np.array([], dtype=int)))
        assert po.n_records(1) == 3
        assert po.n_records(2) == 0
        assert np.array_equal(po.cells(1), [1, 1, 2])
