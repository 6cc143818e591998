"""Special-function tests against mpmath as an independent oracle."""

import math

import mpmath
import pytest

from rgiv import ValidationError
from rgiv.stats import chi2_sf, gamma_upper_regularized, norm_ppf

mpmath.mp.dps = 40


def oracle_chi2_sf(statistic, dof):
    return float(mpmath.gammainc(dof / 2, statistic / 2, mpmath.inf, regularized=True))


def oracle_norm_ppf(p):
    return float(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(p) - 1))


class TestChi2Sf:
    @pytest.mark.parametrize("dof", [1, 2, 5, 10, 44, 100])
    @pytest.mark.parametrize("scale", [0.25, 0.5, 1.0, 1.5, 3.0])
    def test_matches_mpmath_over_grid(self, dof, scale):
        statistic = scale * dof
        expected = oracle_chi2_sf(statistic, dof)
        assert chi2_sf(statistic, dof) == pytest.approx(expected, rel=1e-10)

    def test_boundary_and_tail(self):
        assert chi2_sf(0.0, 4) == 1.0
        assert chi2_sf(1e4, 44) == pytest.approx(oracle_chi2_sf(1e4, 44), rel=1e-8)
        assert chi2_sf(1e4, 44) < 1e-100

    def test_monotone_decreasing_in_statistic(self):
        values = [chi2_sf(x, 10) for x in (0.5, 2.0, 8.0, 25.0, 80.0)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_series_and_continued_fraction_regions_agree_with_oracle(self):
        # x < a + 1 uses the series, x >= a + 1 the continued fraction; probe
        # both sides of the switch for the J-test's dof = 44 (a = 22).
        for statistic in (43.0, 45.0, 46.0, 47.0):
            assert chi2_sf(statistic, 44) == pytest.approx(
                oracle_chi2_sf(statistic, 44), rel=1e-10
            )

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValidationError, match="positive integer"):
            chi2_sf(1.0, 0)
        with pytest.raises(ValidationError, match="positive integer"):
            chi2_sf(1.0, 2.5)
        with pytest.raises(ValidationError, match="nonnegative"):
            chi2_sf(-0.1, 3)
        with pytest.raises(ValidationError, match="finite"):
            chi2_sf(math.nan, 3)


def test_gamma_upper_regularized_matches_mpmath():
    for a, x in [(0.5, 0.2), (2.0, 2.0), (22.0, 18.0), (22.0, 30.0), (50.0, 49.0)]:
        expected = float(mpmath.gammainc(a, x, mpmath.inf, regularized=True))
        assert gamma_upper_regularized(a, x) == pytest.approx(expected, rel=1e-10)


class TestNormPpf:
    @pytest.mark.parametrize(
        "p", [1e-12, 1e-6, 0.001, 0.025, 0.2, 0.5, 0.8, 0.975, 0.999, 1 - 1e-9]
    )
    def test_matches_mpmath(self, p):
        assert norm_ppf(p) == pytest.approx(oracle_norm_ppf(p), rel=1e-12, abs=1e-13)

    def test_median_is_zero(self):
        assert norm_ppf(0.5) == 0.0

    def test_antisymmetric(self):
        for p in (0.01, 0.1, 0.3):
            assert norm_ppf(1.0 - p) == pytest.approx(-norm_ppf(p), rel=1e-13)

    def test_two_sided_95_percent_quantile(self):
        assert norm_ppf(0.975) == pytest.approx(1.959963984540054, abs=1e-12)

    def test_rejects_probabilities_outside_open_interval(self):
        for p in (0.0, 1.0, -0.2, 1.3):
            with pytest.raises(ValidationError, match="strictly in"):
                norm_ppf(p)
