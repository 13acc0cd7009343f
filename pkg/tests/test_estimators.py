"""
Tests for the tail, exit-distribution and indirect-recollision estimators.
"""

import numpy as np
import pytest

from src.core.errors import InsufficientHits, NonPositiveMass, TooFewPoints
from src.core.estimators import (
    MIN_BUDGET,
    NU_MIN_ANGLE,
    Regime,
    TailEstimate,
    check_nu,
    classifier_disagreement,
    default_tv_bins,
    estimate_angle_tail,
    estimate_exit_tv,
    estimate_mu_tails,
    estimate_trap_tail,
    fit_loglog_slope,
    indirect_prob_curve,
    indirect_prob_mc,
    indirect_prob_quadrature,
    lambda_mu_consistency,
    mu_linearity,
    n_histogram,
    recollision_cone_mass,
    tv_from_directions,
)
from src.core.geom3 import E1, angle_between

NU = np.array([0.0, 1.0, 0.0])
from src.core.sampling import RngStream, sample_unit_sphere

pytestmark = pytest.mark.estimators

S_GRID = [1.0, 2.0, 4.0, 8.0, 16.0]


class TestSlopeFit:
    @pytest.mark.parametrize("power", [1.0, 2.0])
    def test_exact_power_law(self, power):
        s = np.array([10.0, 20.0, 40.0, 80.0])
        slope, (lo, hi) = fit_loglog_slope(s, s ** -power)
        assert slope == pytest.approx(-power, abs=1e-12)
        assert hi - lo == pytest.approx(0.0, abs=1e-9)

    def test_noisy_fit_covers_true_slope(self, rng):
        s = np.geomspace(10.0, 1000.0, 8)
        truth = s ** -1.5
        covered = 0
        for _ in range(400):
            noisy = truth * (1.0 + 0.05 * rng.standard_normal(len(s)))
            _, (lo, hi) = fit_loglog_slope(s, noisy, 0.05 * truth)
            covered += lo <= -1.5 <= hi
        assert covered / 400 >= 0.9

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            fit_loglog_slope([1.0, 2.0, 3.0], [1.0, 0.5, 0.3])

    def test_non_positive_mass(self):
        with pytest.raises(NonPositiveMass):
            fit_loglog_slope([1.0, 2.0, 3.0, 4.0], [1.0, 0.5, 0.0, 0.1])


class TestTailEstimate:
    def make(self, hits):
        s = np.array([1.0, 2.0, 4.0, 8.0, 16.0])
        return TailEstimate(
            regime="trap-n3",
            s_values=s,
            p_hat=1.0 / s,
            stderr=0.01 / s,
            n_effective=np.asarray(hits),
        )

    def test_fit_drops_thin_points_with_warning(self):
        estimate = self.make([500, 400, 300, 200, 10])
        estimate.fit()
        assert estimate.slope == pytest.approx(-1.0, abs=1e-9)
        assert len(estimate.warnings) == 1 and "s=16" in estimate.warnings[0]

    def test_fit_window(self):
        estimate = self.make([500] * 5)
        with pytest.raises(InsufficientHits):
            estimate.fit(window=(2.0, 8.0))

    def test_monotone_violations(self):
        estimate = self.make([500] * 5)
        assert estimate.monotone_violations() == []
        estimate.p_hat = estimate.p_hat[::-1].copy()
        assert (1.0, 16.0) in estimate.monotone_violations()

    def test_frame_and_summary(self):
        estimate = self.make([500] * 5)
        frame = estimate.to_dataframe()
        assert list(frame.columns) == ["s_or_R", "estimate", "stderr", "n", "regime"]
        assert estimate.summary()["regime"] == "trap-n3"


class TestLambdaTails:
    def test_regime_properties(self):
        assert Regime("trap-n4plus").kind == "trap"
        assert Regime.LONG_N3.n_filter == "n3"
        assert Regime.SHORT.h_range == "short"
        assert Regime.TRAP_N3.h_range is None

    def test_angle_tail_is_nested_and_reproducible(self):
        first = estimate_angle_tail("short", S_GRID, MIN_BUDGET, 7, fit=False)
        again = estimate_angle_tail("short", S_GRID, MIN_BUDGET, RngStream(seed=7), fit=False)
        assert np.array_equal(first.p_hat, again.p_hat)
        # nested events on common draws
        assert np.all(np.diff(first.p_hat) <= 0.0)
        assert first.anchor >= first.p_hat[0] > 0.0
        assert first.counts["events"] == MIN_BUDGET
        assert first.range_bound == pytest.approx(0.01)

    def test_trap_hits_are_nested(self):
        one = estimate_trap_tail("=3", [2.0, 4.0, 8.0, 16.0], MIN_BUDGET, 3, fit=False, chunk=MIN_BUDGET)
        assert one.counts["events"] == MIN_BUDGET
        assert np.all(one.n_effective[:-1] >= one.n_effective[1:])

    def test_trap_filters(self):
        with pytest.raises(ValueError):
            estimate_trap_tail("=2", S_GRID, MIN_BUDGET, 1)
        label = estimate_trap_tail(">=4", S_GRID, MIN_BUDGET, 1, h_range="long", fit=False).regime
        assert label == "trap-n4plus-long"

    def test_argument_validation(self):
        with pytest.raises(ValueError):
            estimate_angle_tail("trap-n3", S_GRID, MIN_BUDGET, 1)
        with pytest.raises(ValueError):
            estimate_angle_tail("short", S_GRID, MIN_BUDGET - 1, 1)
        with pytest.raises(ValueError):
            estimate_angle_tail("short", [], MIN_BUDGET, 1)
        with pytest.raises(ValueError):
            estimate_angle_tail("short", [2.0, 1.0, 3.0, 4.0], MIN_BUDGET, 1)

    def test_n_histogram(self):
        frame = n_histogram(MIN_BUDGET, 5, k_max=5)
        assert frame["n"].tolist() == [3, 4, 5, 6]
        assert frame["open_ended"].tolist() == [False, False, False, True]
        assert frame["mass"].iloc[0] > frame["mass"].iloc[1]

    @pytest.mark.slow
    def test_trap_n3_slope_near_minus_one(self):
        estimate = estimate_trap_tail("=3", [20.0, 40.0, 80.0, 160.0, 320.0], 2_000_000, 11)
        assert estimate.slope == pytest.approx(-1.0, abs=0.2)

    @pytest.mark.slow
    def test_long_n4plus_is_steep(self):
        estimate = estimate_angle_tail("long-n4plus", [2.0, 4.0, 8.0, 16.0, 32.0], 2_000_000, 13)
        assert estimate.slope <= -1.7


class TestMuTails:
    def test_radius_and_grid_validation(self):
        with pytest.raises(ValueError):
            estimate_mu_tails(0.2, "trap-n3", S_GRID, MIN_BUDGET, 1)
        with pytest.raises(ValueError):
            estimate_mu_tails(0.05, "trap-n3", [], MIN_BUDGET, 1)

    def test_smoke(self):
        estimate = estimate_mu_tails(0.05, "trap-n3", [20.0, 40.0, 80.0, 160.0], MIN_BUDGET, 9, fit=False)
        assert estimate.regime == "mu-trap-n3"
        assert np.all(np.diff(estimate.p_hat) <= 0.0)
        assert estimate.anchor > 0.0

    def test_linearity_frame(self):
        frame = mu_linearity(0.05, "short", [1.0, 2.0, 4.0, 8.0], MIN_BUDGET, 4)
        assert list(frame.columns) == ["s", "ratio", "stderr", "z"]
        assert len(frame) == 4

    @pytest.mark.slow
    def test_linear_in_radius(self):
        frame = mu_linearity(0.05, "trap-n3", [20.0, 40.0], 4_000_000, 21)
        assert np.all(np.abs(frame["z"]) < 3.0)

    def test_lambda_agrees_with_mu_over_radius(self):
        frame = lambda_mu_consistency(0.05, [2.0, 4.0, 8.0], MIN_BUDGET, 27)
        assert list(frame.columns) == ["s", "lambda_estimate", "mu_over_r", "z"]
        assert np.all(frame["mu_over_r"] > 0.0)
        assert np.all(frame["lambda_estimate"] > 0.0)
        assert np.all(np.abs(frame["z"]) < 3.0)


class TestExitDistribution:
    def test_null_case_is_within_bias_band(self, rng):
        estimate = tv_from_directions(sample_unit_sphere(rng, 100_000), E1, 192)
        assert abs(estimate.tv_hat - estimate.bias) <= 3.0 * estimate.stderr
        assert estimate.ks_pvalue > 0.001

    def test_point_mass_is_far_from_uniform(self):
        estimate = tv_from_directions(np.tile(E1, (1000, 1)), E1, 48)
        assert estimate.tv_hat == pytest.approx(1.0 - 1.0 / 48.0)

    def test_default_bins(self):
        assert default_tv_bins(100) == 192
        assert default_tv_bins(10 ** 8) == 768
        assert default_tv_bins(10 ** 6) % 48 == 0

    def test_exit_tv_smoke(self):
        estimate = estimate_exit_tv(10.0, NU, 100_000, 17)
        assert estimate.n_conditioned >= 10_000
        assert 0.0 <= estimate.tv_hat <= 1.0
        assert estimate.to_dict()["R"] == 10.0

    def test_exit_tv_needs_enough_exits(self):
        with pytest.raises(InsufficientHits):
            estimate_exit_tv(10.0, NU, 2_000, 17)
        with pytest.raises(ValueError):
            estimate_exit_tv(5.0, NU, 2_000, 17)

    def test_cone_mass_matches_pi_over_r_squared(self):
        mass = recollision_cone_mass(40.0, 50_000, 23)
        assert abs(mass.relative_error) < 0.1
        assert mass.stderr < 0.05 * mass.reference

    def test_cone_estimates_reject_nu_near_e(self):
        with pytest.raises(ValueError, match="degrees from e"):
            estimate_exit_tv(10.0, E1, 100_000, 17)
        with pytest.raises(ValueError, match="degrees from e"):
            recollision_cone_mass(40.0, 50_000, 23, nu=[1.0, 0.01, 0.0])

    def test_check_nu_keeps_tilted_directions(self):
        nu = check_nu([1.0, 0.2, 0.0])
        assert np.linalg.norm(nu) == pytest.approx(1.0)
        assert angle_between(nu, E1) > NU_MIN_ANGLE

    def test_classifier_disagreement(self):
        rates = classifier_disagreement(50_000, 29)
        assert rates["ray_outside_backscatter_cone"] == 0.0
        assert 0.0 <= rates["shadowing_line_vs_half_line"] <= 1.0

    @pytest.mark.slow
    def test_tv_decreases_with_r(self):
        near = estimate_exit_tv(10.0, NU, 2_000_000, 31, bins=192)
        far = estimate_exit_tv(80.0, NU, 2_000_000, 31, bins=192)
        assert far.tv_debiased < near.tv_debiased


class TestIndirect:
    def test_zero_epsilon(self):
        assert indirect_prob_mc(0.0, 1000, 1) == (0.0, 0.0)

    def test_quadrature_methods_agree(self):
        for eps in (0.1, 0.5, 2.0):
            reduced = indirect_prob_quadrature(eps, "reduced")
            direct = indirect_prob_quadrature(eps, "dblquad", rtol=1e-8)
            assert reduced == pytest.approx(direct, rel=1e-6)

    def test_large_epsilon_tends_to_one(self):
        assert indirect_prob_quadrature(200.0) == pytest.approx(1.0, abs=1e-9)

    def test_quadrature_validation(self):
        with pytest.raises(ValueError):
            indirect_prob_quadrature(0.0)
        with pytest.raises(ValueError):
            indirect_prob_quadrature(1.0, "simpson")

    def test_endpoint_ratio_grows_slowly(self):
        ratio = (indirect_prob_quadrature(0.01) / 1e-4) / (indirect_prob_quadrature(0.1) / 1e-2)
        assert 1.0 < ratio < 1.5

    def test_mc_matches_quadrature(self):
        p_hat, stderr = indirect_prob_mc(0.5, 200_000, 37)
        assert abs(p_hat - indirect_prob_quadrature(0.5)) < 4.0 * stderr

    def test_curve_is_monotone_and_tube_dominates(self):
        eps = [0.05, 0.1, 0.2, 0.4]
        endpoint = indirect_prob_curve(eps, 100_000, 41)
        tube = indirect_prob_curve(eps, 100_000, 41, event="tube")
        assert np.all(np.diff(endpoint["p_hat"]) >= 0.0)
        # same first two flights
        assert np.all(tube["p_hat"].to_numpy() >= endpoint["p_hat"].to_numpy())

    def test_unknown_event(self):
        with pytest.raises(ValueError):
            indirect_prob_curve([0.1], 1000, 1, event="ring")

    @pytest.mark.slow
    def test_tube_ratio_shows_log_growth(self):
        frame = indirect_prob_curve([0.01, 0.1], 20_000_000, 43, event="tube")
        small, large = frame["p_hat"].to_numpy() / np.array([1e-4, 1e-2])
        assert small / large > 1.3
