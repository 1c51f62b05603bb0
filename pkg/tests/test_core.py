import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occufield.core import (
    Covariates,
    EncounterArray,
    LatentStates,
    detection_field,
    detection_probability,
    marginal_log_likelihood,
    occupancy_field,
    occupancy_probability,
    primary_occasion_probability,
)
from occufield.errors import DataError, UsageError

from conftest import random_instance


def enumeration_loglik(data, cov, params, effects):
    """Brute-force oracle: sum over every z configuration of
    prod Bern(z | psi) * prod over surveyed cells Bern(y | z * p)."""
    psi = occupancy_field(cov, params.beta, effects)
    p = detection_field(cov, params.alpha)
    cells = [(i, t) for i in range(data.I) for t in range(data.T)]
    total = 0.0
    for bits in itertools.product((0, 1), repeat=len(cells)):
        prob = 1.0
        for (i, t), z in zip(cells, bits):
            prob *= psi[i, t] if z else 1.0 - psi[i, t]
            for j in range(data.J):
                if data.g[i, t, j]:
                    pd = z * p[i, t, j]
                    prob *= pd if data.y[i, t, j] else 1.0 - pd
        total += prob
    return float(np.log(total))


class TestOccupancyProbability:
    def test_neutral_inputs_give_half(self):
        assert occupancy_probability([1, 0], (0, 0.5), 0.0, 0.0) == pytest.approx(0.5)

    def test_hand_evaluated_logistic(self):
        # logistic(0 + 0.5*1 + 0 + 0) = 1 / (1 + e^-0.5)
        assert occupancy_probability([1, 1], (0, 0.5), 0.0, 0.0) == pytest.approx(0.6224593312018546, abs=1e-12)

    def test_effects_cancel(self):
        assert occupancy_probability([1, 0], (0, 0.5), 1.0, -1.0) == pytest.approx(0.5)

    def test_dimension_mismatch(self):
        with pytest.raises(UsageError):
            occupancy_probability([1, 0, 0], (0, 0.5), 0.0, 0.0)

    def test_open_interval(self):
        assert 0.0 < occupancy_probability([1, 100.0], (0, 10.0), 50.0, 50.0) < 1.0


class TestDetectionProbability:
    def test_neutral(self):
        assert detection_probability([1, 0], (0, -0.5)) == pytest.approx(0.5)

    def test_hand_evaluated(self):
        assert detection_probability([1, 1], (0, -0.5)) == pytest.approx(0.3775406687981454, abs=1e-12)

    def test_hand_evaluated_three_terms(self):
        assert detection_probability([1, 1, 1], (0, -0.5, -0.5)) == pytest.approx(0.2689414213699951, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(UsageError):
            detection_probability([1], (0, -0.5))


class TestPrimaryOccasionProbability:
    def test_single_visit_no_detection(self):
        # psi * (1 - p) + (1 - psi) with the second occasion masked
        val = primary_occasion_probability([0, 0], [1, 0], 0.5, [0.5, np.nan])
        assert val == pytest.approx(0.75, abs=1e-12)

    def test_no_surveys_is_uninformative(self):
        assert primary_occasion_probability([0, 0], [0, 0], 0.3, [np.nan, np.nan]) == pytest.approx(1.0)

    def test_all_detected(self):
        assert primary_occasion_probability([1, 1], [1, 1], 0.5, [0.5, 0.5]) == pytest.approx(0.125, abs=1e-12)

    def test_detection_at_masked_occasion_rejected(self):
        with pytest.raises(DataError):
            primary_occasion_probability([0, 1], [1, 0], 0.5, [0.5, 0.5])

    def test_detected_branch_formula(self):
        # with any detection the never-detected branch must not contribute
        psi, p = 0.37, np.array([0.2, 0.6, 0.55])
        y = np.array([1, 0, 1])
        expected = psi * p[0] * (1 - p[1]) * p[2]
        assert primary_occasion_probability(y, [1, 1, 1], psi, p) == pytest.approx(expected, rel=1e-12)

    def test_masking_equals_dropping_the_factor(self):
        # removing a surveyed occasion must equal the expression without it
        for psi in (0.1, 0.4, 0.8):
            for p1 in (0.15, 0.5, 0.9):
                masked = primary_occasion_probability([0, 0], [1, 0], psi, [p1, 0.7])
                assert masked == pytest.approx(psi * (1 - p1) + (1 - psi), rel=1e-12)

    @given(
        p_low=st.floats(0.05, 0.9),
        bump=st.floats(0.01, 0.09),
        psi=st.floats(0.05, 0.95),
    )
    @settings(max_examples=50, deadline=None)
    def test_monotonicity_in_p(self, p_low, bump, psi):
        p_hi = p_low + bump
        zeros = primary_occasion_probability([0, 0], [1, 1], psi, [p_low, 0.4])
        zeros_hi = primary_occasion_probability([0, 0], [1, 1], psi, [p_hi, 0.4])
        assert zeros_hi < zeros
        ones = primary_occasion_probability([1, 1], [1, 1], psi, [p_low, 0.4])
        ones_hi = primary_occasion_probability([1, 1], [1, 1], psi, [p_hi, 0.4])
        assert ones_hi > ones


class TestMarginalLogLikelihood:
    def test_certain_detection_gives_zero(self):
        data = EncounterArray(y=np.ones((1, 1, 1), dtype=np.uint8), g=np.ones((1, 1, 1), dtype=np.uint8))
        cov = Covariates(occ_design=np.ones((1, 1, 1)), det_design=np.ones((1, 1, 1, 1)))
        from occufield.core import ModelParams, RandomEffects

        params = ModelParams(beta=[40.0], alpha=[40.0], phi=1, sigma2=1, rho=0, sigma2T=1)
        eff = RandomEffects(omega=[0.0], eta=[0.0])
        assert marginal_log_likelihood(data, cov, params, eff) == pytest.approx(0.0, abs=1e-9)

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(5150)
        for _ in range(100):
            data, cov, params, effects = random_instance(rng)
            ours = marginal_log_likelihood(data, cov, params, effects)
            oracle = enumeration_loglik(data, cov, params, effects)
            assert ours == pytest.approx(oracle, abs=1e-10)

    def test_independent_sites_add(self):
        rng = np.random.default_rng(88)
        data, cov, params, effects = random_instance(rng, n_i=2, n_t=2, n_j=2)
        total = marginal_log_likelihood(data, cov, params, effects)
        parts = 0.0
        for i in range(2):
            sub = EncounterArray(y=data.y[i : i + 1], g=data.g[i : i + 1])
            subcov = Covariates(occ_design=cov.occ_design[i : i + 1], det_design=cov.det_design[i : i + 1])
            from occufield.core import RandomEffects

            subeff = RandomEffects(omega=effects.omega[i : i + 1], eta=effects.eta)
            parts += marginal_log_likelihood(sub, subcov, params, subeff)
        assert total == pytest.approx(parts, rel=1e-12)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(3)
        data, cov, params, effects = random_instance(rng, n_i=2, n_t=2, n_j=2)
        from occufield.core import RandomEffects

        with pytest.raises(UsageError):
            marginal_log_likelihood(data, cov, params, RandomEffects(omega=[0.0], eta=effects.eta))


class TestEncounterArray:
    def test_detection_without_survey_rejected(self):
        y = np.zeros((2, 2, 2), dtype=np.uint8)
        g = np.ones((2, 2, 2), dtype=np.uint8)
        y[0, 0, 0] = 1
        g[0, 0, 0] = 0
        with pytest.raises(DataError):
            EncounterArray(y=y, g=g)

    def test_bad_values_rejected(self):
        with pytest.raises(UsageError):
            EncounterArray(y=np.full((1, 1, 1), 2, dtype=np.uint8), g=np.ones((1, 1, 1), dtype=np.uint8))

    def test_zero_dimension_rejected(self):
        with pytest.raises(UsageError):
            EncounterArray(y=np.zeros((1, 0, 1), dtype=np.uint8), g=np.zeros((1, 0, 1), dtype=np.uint8))

    def test_csv_round_trip(self, tmp_path, rng):
        data, *_ = random_instance(rng, n_i=3, n_t=2, n_j=2)
        path, header = data.to_csv(tmp_path / "enc.csv")
        back = EncounterArray.from_csv(path, header)
        assert (back.y == data.y).all() and (back.g == data.g).all()

    def test_missing_header_is_data_error(self, tmp_path, rng):
        data, *_ = random_instance(rng, n_i=2, n_t=1, n_j=1)
        path, header = data.to_csv(tmp_path / "enc.csv")
        header.unlink()
        with pytest.raises(DataError):
            EncounterArray.from_csv(path)


class TestCovariatesAndLatent:
    def test_missing_det_covariate_at_surveyed_cell(self, rng):
        data, cov, *_ = random_instance(rng, n_i=2, n_t=2, n_j=2)
        det = cov.det_design.copy()
        i, t, j = np.argwhere(data.g == 1)[0]
        det[i, t, j, 1] = np.nan
        bad = Covariates(occ_design=cov.occ_design, det_design=det)
        with pytest.raises(DataError):
            bad.validate_against(data)

    def test_latent_psi_bounds(self):
        with pytest.raises(UsageError):
            LatentStates(z=np.zeros((1, 1), dtype=np.uint8), psi=np.ones((1, 1)), p=np.full((1, 1, 1), 0.5))

    def test_latent_consistency(self, rng):
        data, cov, params, effects = random_instance(rng, n_i=2, n_t=2, n_j=2)
        psi = occupancy_field(cov, params.beta, effects)
        p = detection_field(cov, params.alpha)
        z = np.zeros((2, 2), dtype=np.uint8)
        latent = LatentStates(z=z, psi=psi, p=p)
        if data.any_detection().any():
            with pytest.raises(DataError):
                latent.check_consistency(data)
