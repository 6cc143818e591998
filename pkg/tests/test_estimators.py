"""Estimator tests: CUE search, restricted and two-step variants, GIV, OLS."""

import logging

import numpy as np
import pytest

from rgiv import (
    ConfigurationError,
    DgpSpec,
    OptimizerConfig,
    ParameterSpace,
    PanelData,
    SingularEstimandError,
    ValidationError,
    WeakInstrumentError,
    generate_panel,
    giv_estimand_closed_form,
    giv_estimate,
    gmm_objective,
    ols_estimate,
    population_moments,
    rgiv_estimate,
    rgiv_restricted_estimate,
    two_step_estimate,
)
from rgiv.estimators import EstimationResult, _multistart_minimize, _start_points


def equal_size_homogeneous_panel(n=4, t=200, seed=11):
    spec = DgpSpec(
        name="degenerate",
        n_units=n,
        n_periods=t,
        phi=np.full(n, 0.3),
        sigma=np.full(n, 0.01),
        size_rule="explicit",
        sizes=np.full(n, 1.0 / n),
        seed=seed,
    )
    return generate_panel(spec, 0)


class TestOptimizerConfig:
    def test_defaults_are_valid(self):
        config = OptimizerConfig()
        assert config.starts == 8

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"starts": 0},
            {"max_iters": 5},
            {"f_tol": 0.0},
            {"x_tol": -1.0},
            {"seed": -3},
        ],
    )
    def test_rejects_bad_settings(self, kwargs):
        with pytest.raises(ConfigurationError):
            OptimizerConfig(**kwargs)


def test_estimation_result_rejects_negative_objective():
    with pytest.raises(ValidationError, match="nonnegative"):
        EstimationResult(
            method="rgiv", phi_hat=np.zeros(3), objective_value=-1.0, converged=True
        )


def test_start_points_are_feasible_and_deterministic(baseline_panel):
    space = ParameterSpace()
    config = OptimizerConfig()
    starts = _start_points(baseline_panel, space, config)
    again = _start_points(baseline_panel, space, config)
    np.testing.assert_array_equal(starts, again)
    assert starts.shape == (8, 11)
    np.testing.assert_array_equal(starts[0], np.zeros(11))
    assert np.ptp(starts[1]) == 0.0  # pooled start is homogeneous
    for row in starts:
        assert space.contains(row, baseline_panel.sizes)


class TestRgivEstimate:
    def test_recovers_noise_free_coefficients(self, orthogonal_panel):
        panel, phi = orthogonal_panel
        est = rgiv_estimate(panel)
        assert est.converged
        np.testing.assert_allclose(est.phi_hat, phi, atol=1e-6)
        assert est.objective_value < 1e-14

    def test_multistart_agreement_on_baseline_data(self, baseline_rgiv):
        config = OptimizerConfig()
        assert baseline_rgiv.n_starts_agreeing >= 0.9 * config.starts
        assert len(baseline_rgiv.metadata["start_objectives"]) == config.starts

    def test_estimates_center_near_truth_on_baseline(self, baseline_rgiv):
        # Single replication, so the check is loose; the Monte Carlo suite
        # pins the distribution.
        np.testing.assert_allclose(baseline_rgiv.phi_hat, 0.33, atol=0.1)

    def test_aggregate_constraint_respected(self, baseline_panel, baseline_rgiv):
        space = ParameterSpace()
        agg = float(baseline_rgiv.phi_hat @ baseline_panel.sizes)
        assert agg <= space.aggregate_cap

    def test_deterministic_across_calls(self, baseline_panel, baseline_rgiv):
        repeat = rgiv_estimate(baseline_panel)
        np.testing.assert_array_equal(repeat.phi_hat, baseline_rgiv.phi_hat)
        assert repeat.objective_value == baseline_rgiv.objective_value

    def test_scale_equivariance_exact_for_power_of_two(
        self, baseline_panel, baseline_rgiv
    ):
        scaled = PanelData(baseline_panel.outcomes * 4.0, baseline_panel.sizes)
        est = rgiv_estimate(scaled)
        np.testing.assert_array_equal(est.phi_hat, baseline_rgiv.phi_hat)

    def test_scale_equivariance_for_generic_factor(
        self, baseline_panel, baseline_rgiv
    ):
        scaled = PanelData(baseline_panel.outcomes * 3.0, baseline_panel.sizes)
        est = rgiv_estimate(scaled)
        np.testing.assert_allclose(est.phi_hat, baseline_rgiv.phi_hat, atol=1e-6)

    def test_single_start_also_works(self, orthogonal_panel):
        panel, phi = orthogonal_panel
        est = rgiv_estimate(panel, config=OptimizerConfig(starts=1))
        assert est.n_starts_agreeing == 1
        np.testing.assert_allclose(est.phi_hat, phi, atol=1e-6)


def test_multistart_finds_population_root_and_skips_spurious_one(rng):
    # On the population objective the only feasible zero is the truth; the
    # second analytic root has aggregate 2 - phi_S > 1 and must be excluded
    # by the constraint, not by luck.
    sizes = np.array([0.2, 0.3, 0.5])
    sigma2 = np.array([1.0, 2.0, 3.0])
    phi0 = np.array([0.3, 0.2, 0.4])
    space = ParameterSpace()
    config = OptimizerConfig()

    def value(phi):
        g = population_moments(phi0, phi, sizes, sigma2)
        return float(g @ g)

    starts = [np.zeros(3), np.full(3, 0.5)]
    while len(starts) < 6:
        cand = rng.uniform(space.lower, space.upper, size=3)
        if space.contains(cand, sizes):
            starts.append(cand)
    best_x, best_val, agreeing, converged, _ = _multistart_minimize(
        value, None, np.array(starts), sizes, space, config
    )
    assert converged
    assert best_val < 1e-10
    np.testing.assert_allclose(best_x, phi0, atol=1e-5)

    phi_s = float(phi0 @ sizes)
    c1 = float((sizes**2) @ sigma2)
    spurious = phi0 + 2.0 * (1.0 - phi_s) * sizes * sigma2 / c1
    assert value(spurious) < 1e-20
    assert not space.contains(spurious, sizes)


class TestRestrictedEstimate:
    def test_recovers_shared_coefficient_without_noise(self, orthogonal_panel):
        panel, phi = orthogonal_panel
        est = rgiv_restricted_estimate(panel)
        assert est.method == "rgiv-restricted"
        assert np.ptp(est.phi_hat) == 0.0
        np.testing.assert_allclose(est.phi_hat, phi, atol=1e-7)
        assert est.objective_value < 1e-14

    def test_never_beats_unrestricted_minimum(
        self, baseline_panel, baseline_rgiv
    ):
        restricted = rgiv_restricted_estimate(baseline_panel)
        assert restricted.objective_value >= baseline_rgiv.objective_value

    def test_respects_aggregate_cap(self, baseline_panel):
        est = rgiv_restricted_estimate(baseline_panel)
        space = ParameterSpace()
        assert float(est.phi_hat @ baseline_panel.sizes) <= space.aggregate_cap


class TestTwoStepEstimate:
    def test_improves_fixed_weight_criterion(self, baseline_panel):
        est = two_step_estimate(baseline_panel)
        assert est.method == "rgiv-two-step"
        assert est.converged
        assert (
            est.objective_value
            <= est.metadata["fixed_weight_objective_at_step1"] + 1e-15
        )
        np.testing.assert_allclose(
            est.phi_hat, est.metadata["step1_phi"], atol=0.05
        )

    def test_ridge_fallback_on_short_panel(self, rng, caplog):
        # Five units give ten moments; six periods cannot identify a full
        # second-moment matrix, so the inversion must go through the ridge.
        outcomes = rng.standard_normal((6, 5))
        sizes = np.full(5, 0.2)
        panel = PanelData(outcomes, sizes)
        with caplog.at_level(logging.WARNING, logger="rgiv.estimators"):
            est = two_step_estimate(panel)
        assert est.metadata["ridge"] > 0.0
        assert any("ridge" in rec.message for rec in caplog.records)


class TestGivEstimate:
    def test_equal_and_oracle_agree_under_homogeneous_variances(
        self, baseline_panel
    ):
        equal = giv_estimate(baseline_panel, "equal")
        oracle = giv_estimate(baseline_panel, "oracle", sigma2=np.full(11, 0.015**2))
        assert equal.phi_hat[0] == pytest.approx(oracle.phi_hat[0], rel=1e-12)
        assert equal.method == "giv-equal"
        assert oracle.metadata["se_formula"] == "hc0-iv"

    def test_feasible_weights_attenuate_the_estimate(self, baseline_panel):
        # Outcome variances overstate shock variances most for small units,
        # which drags the feasible estimate below the oracle one.
        oracle = giv_estimate(baseline_panel, "oracle", sigma2=np.full(11, 0.015**2))
        feasible = giv_estimate(baseline_panel)
        assert feasible.phi_hat[0] < oracle.phi_hat[0]

    def test_avar_matches_reported_se(self, baseline_panel):
        est = giv_estimate(baseline_panel, "equal")
        se = est.metadata["se"]
        assert est.avar[0, 0] == pytest.approx(se * se * baseline_panel.n_periods)
        assert se > 0.0

    def test_weak_instrument_raised_when_gap_vanishes(self):
        panel = equal_size_homogeneous_panel()
        with pytest.raises(WeakInstrumentError, match="no granular variation"):
            giv_estimate(panel, "equal")
        with pytest.raises(WeakInstrumentError):
            giv_estimate(panel, "oracle", sigma2=np.full(4, 1e-4))

    def test_oracle_mode_requires_variances(self, baseline_panel):
        with pytest.raises(ConfigurationError, match="oracle"):
            giv_estimate(baseline_panel, "oracle")

    def test_rejects_unknown_mode(self, baseline_panel):
        with pytest.raises(ConfigurationError, match="unknown GIV weight mode"):
            giv_estimate(baseline_panel, "sample")

    def test_scale_equivariant(self, baseline_panel):
        base = giv_estimate(baseline_panel)
        scaled = giv_estimate(
            PanelData(baseline_panel.outcomes * 3.0, baseline_panel.sizes)
        )
        assert scaled.phi_hat[0] == pytest.approx(base.phi_hat[0], rel=1e-12)


class TestGivEstimandClosedForm:
    def test_worked_heterogeneous_example(self):
        value = giv_estimand_closed_form([0.6, 0.3, 0.3], [0.2, 0.3, 0.5])
        assert value == pytest.approx(-2.0 / 11.0, rel=1e-12)

    def test_homogeneous_coefficients_are_returned_unchanged(self):
        assert giv_estimand_closed_form([0.3, 0.3, 0.3], [0.2, 0.3, 0.5]) == (
            pytest.approx(0.3, rel=1e-14)
        )

    def test_rejects_explosive_aggregate(self):
        with pytest.raises(SingularEstimandError, match=">= 1"):
            giv_estimand_closed_form([2.0, 2.0, 2.0], [0.2, 0.3, 0.5])

    def test_equal_sizes_make_the_estimand_singular(self):
        sizes = np.full(3, 1.0 / 3.0)
        with pytest.raises(SingularEstimandError, match="denominator"):
            giv_estimand_closed_form([0.6, 0.3, 0.3], sizes)


class TestOlsEstimate:
    def test_simultaneity_bias_matches_limit_formula(self):
        # plim of the OLS slope is phi_i + S_i sigma_i^2 (1 - phi_S) / C1
        # with C1 = sum_j S_j^2 sigma_j^2.
        n = 3
        sizes = np.array([0.2, 0.3, 0.5])
        spec = DgpSpec(
            name="ols-bias",
            n_units=n,
            n_periods=1_000_000,
            phi=np.full(n, 0.3),
            sigma=np.full(n, 0.015),
            size_rule="explicit",
            sizes=sizes,
            seed=5,
        )
        panel = generate_panel(spec, 0)
        c1 = float((sizes**2).sum() * 0.015**2)
        for unit in range(n):
            expected = 0.3 + sizes[unit] * 0.015**2 * 0.7 / c1
            slope = ols_estimate(panel, unit)
            assert slope == pytest.approx(expected, rel=0.05)
            assert slope > 0.3  # biased upward for every unit

    def test_single_shocked_unit_slope_approaches_inverse_size(self):
        # With phi = 0 and variance concentrated on unit 1, r_1 = u_1 and
        # r_S = S_1 u_1 (plus negligible noise), so the slope tends to 1/S_1.
        n = 3
        sizes = np.array([0.2, 0.3, 0.5])
        spec = DgpSpec(
            name="single-shock",
            n_units=n,
            n_periods=200_000,
            phi=np.zeros(n),
            sigma=np.array([1.0, 1e-6, 1e-6]),
            size_rule="explicit",
            sizes=sizes,
            seed=9,
        )
        panel = generate_panel(spec, 0)
        assert ols_estimate(panel, 0) == pytest.approx(1.0 / sizes[0], rel=1e-4)

    def test_rejects_out_of_range_unit(self, baseline_panel):
        with pytest.raises(ValidationError, match="unit must be"):
            ols_estimate(baseline_panel, 11)


def test_full_pipeline_objectives_are_consistent(baseline_panel, baseline_rgiv):
    # The recorded optimum must be reproducible through the public objective.
    assert gmm_objective(baseline_panel, baseline_rgiv.phi_hat) == (
        baseline_rgiv.objective_value
    )
