"""
Tests for random streams and samplers.
"""

import math

import numpy as np
import pytest
from scipy import integrate, stats

from src.core.errors import BadAngle, BadRange, Parallel
from src.core.geom3 import E1, angle_between, norm
from src.core.sampling import (
    EXP_UNIT_MEAN,
    RngStream,
    cross_decomposition,
    exp_unit_cdf,
    lambda_integrate,
    lambda_strata,
    lambda_tail_bound,
    proposal_mass,
    sample_cone,
    sample_exp_unit_conditioned,
    sample_mu,
    sample_mu_batch,
    sample_proposal,
    sample_unit_sphere,
    sphere_uniformity_chi2,
    theta_cdf,
)

pytestmark = pytest.mark.sampling

DRAWS = 200_000


def cap(h):
    return 0.5 * (1.0 - math.cos(min(math.pi, 2.0 / h)))


class TestRngStream:
    def test_same_key_same_sequence(self):
        first = RngStream(seed=7, stream_id=3).generator().random(16)
        second = RngStream(seed=7, stream_id=3).generator().random(16)
        assert np.array_equal(first, second)

    def test_distinct_streams_differ(self):
        base = RngStream(seed=7).generator().random(16)
        assert not np.array_equal(base, RngStream(seed=7, stream_id=1).generator().random(16))
        assert not np.array_equal(base, RngStream(seed=8).generator().random(16))

    def test_substreams_are_reproducible_and_distinct(self):
        stream = RngStream(seed=42)
        assert stream.substream(5) == stream.substream(5)
        assert stream.substream(5) != stream.substream(6)
        a = stream.substream(5).generator().random(8)
        b = stream.substream(6).generator().random(8)
        assert not np.array_equal(a, b)

    def test_counter_moves_the_start(self):
        base = RngStream(seed=1).generator().random(8)
        assert np.array_equal(base, RngStream(seed=1, counter=0).generator().random(8))
        assert not np.array_equal(base, RngStream(seed=1, counter=3).generator().random(8))

    @pytest.mark.parametrize("kwargs", [{"seed": -1}, {"seed": 1, "stream_id": 2**64}])
    def test_out_of_range_rejected(self, kwargs):
        with pytest.raises(ValueError):
            RngStream(**kwargs)

    def test_independent_substreams_are_uncorrelated(self):
        stream = RngStream(seed=3)
        a = stream.substream(0).generator().normal(size=DRAWS)
        b = stream.substream(1).generator().normal(size=DRAWS)
        assert abs(np.corrcoef(a, b)[0, 1]) < 4.0 / math.sqrt(DRAWS)


class TestSphereAndExponential:
    def test_sphere_moments(self, rng):
        x = sample_unit_sphere(rng, DRAWS)
        np.testing.assert_allclose(norm(x), 1.0, atol=1e-12)
        sigma = 1.0 / math.sqrt(3.0 * DRAWS)
        assert np.all(np.abs(x.mean(axis=0)) < 4.0 * sigma)
        z2_sigma = math.sqrt(4.0 / 45.0 / DRAWS)
        assert abs(np.mean(x[:, 2] ** 2) - 1.0 / 3.0) < 4.0 * z2_sigma

    def test_single_draw_shape(self, rng):
        assert sample_unit_sphere(rng).shape == (3,)

    def test_exp_unit_mean_and_support(self, rng):
        x = sample_exp_unit_conditioned(rng, DRAWS)
        assert np.all((x > 0.0) & (x <= 1.0))
        assert EXP_UNIT_MEAN == pytest.approx(0.41802, abs=1e-5)
        assert abs(x.mean() - EXP_UNIT_MEAN) < 4.0 * x.std() / math.sqrt(DRAWS)

    def test_exp_unit_ks(self, rng):
        x = sample_exp_unit_conditioned(rng, DRAWS)
        result = stats.kstest(x, exp_unit_cdf)
        assert result.pvalue > 0.001

    @pytest.mark.slow
    def test_exp_unit_ks_full_budget(self, rng):
        x = sample_exp_unit_conditioned(rng, 1_000_000)
        critical = 1.628 / math.sqrt(1_000_000)
        assert stats.kstest(x, exp_unit_cdf).statistic < critical


class TestMu:
    def test_single_sample(self, rng):
        event = sample_mu(rng, 0.05).event
        assert 0.0 < event.xi <= 1.0
        assert event.r == 0.05

    def test_radius_must_be_positive(self, rng):
        with pytest.raises(ValueError):
            sample_mu(rng, 0.0)
        with pytest.raises(ValueError):
            sample_mu_batch(rng, -1.0, 10)

    def test_xi_independent_of_u(self, rng):
        batch = sample_mu_batch(rng, 1.0, DRAWS)
        assert len(batch) == DRAWS
        corr = np.corrcoef(batch.xi, batch.u[:, 0])[0, 1]
        assert abs(corr) < 4.0 / math.sqrt(DRAWS)
        assert batch.event(0).xi == batch.xi[0]


class TestCone:
    def test_full_sphere(self, rng):
        v, weight = sample_cone(rng, E1, math.pi, size=DRAWS)
        assert weight[0] == pytest.approx(1.0)
        assert np.all(np.abs(v.mean(axis=0)) < 4.0 / math.sqrt(3.0 * DRAWS))

    def test_hemisphere(self, rng):
        v, weight = sample_cone(rng, E1, math.pi / 2.0)
        assert weight == pytest.approx(0.5)
        many, _ = sample_cone(rng, E1, math.pi / 2.0, size=10_000)
        assert np.all(many[:, 0] >= -1e-12)

    def test_draws_stay_inside_the_cap(self, rng):
        axis = sample_unit_sphere(rng)
        v, weight = sample_cone(rng, axis, 0.01, size=DRAWS)
        assert np.max(angle_between(v, axis)) <= 0.01 + 1e-12
        assert weight[0] == pytest.approx(0.5 * (1.0 - math.cos(0.01)), rel=1e-9)

    def test_per_draw_axes(self, rng):
        axes = sample_unit_sphere(rng, 1000)
        half = rng.uniform(0.01, 1.0, 1000)
        v, weight = sample_cone(rng, axes, half)
        assert v.shape == (1000, 3) and weight.shape == (1000,)
        assert np.all(angle_between(v, axes) <= half + 1e-12)

    @pytest.mark.parametrize("half_angle", [0.0, -0.1, 3.5])
    def test_bad_angle(self, rng, half_angle):
        with pytest.raises(BadAngle):
            sample_cone(rng, E1, half_angle)


class TestCrossDecomposition:
    def test_axis_example(self):
        w, theta = cross_decomposition(np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
        np.testing.assert_allclose(w, [0.0, 0.0, 1.0])
        assert theta == pytest.approx(1.0)

    def test_parallel_raises(self):
        with pytest.raises(Parallel):
            cross_decomposition(E1, E1)

    def test_theta_law(self, rng):
        _, theta = cross_decomposition(sample_unit_sphere(rng, DRAWS), sample_unit_sphere(rng, DRAWS))
        assert stats.kstest(theta, theta_cdf).pvalue > 0.001

    def test_w_uniform(self, rng):
        w, _ = cross_decomposition(sample_unit_sphere(rng, DRAWS), sample_unit_sphere(rng, DRAWS))
        _, p_value = sphere_uniformity_chi2(w, 48)
        assert p_value > 0.001


class TestLambda:
    def test_grid_indicator_integral(self):
        strata = lambda_strata(1.0, 2.0, mode="grid", n=400)
        assert lambda_integrate(strata, lambda h: 1.0 if 1.0 <= h <= 2.0 else 0.0) == pytest.approx(1.0, abs=1e-3)

    def test_grid_pairs_attached(self, rng):
        strata = lambda_strata(1.0, 10.0, mode="grid", n=5, rng=rng, per_stratum=7)
        assert len(strata) == 5
        assert all(len(s.cap_weight) == 7 and s.u.shape == (7, 3) for s in strata)
        assert not strata[0].columnar
        assert strata[0].h_per_draw().shape == (7,)

    def test_grid_matches_quadrature(self):
        strata = lambda_strata(0.5, 50.0, mode="grid", n=4000)
        exact, _ = integrate.quad(cap, 0.5, 50.0, points=[2.0 / math.pi], limit=200)
        assert lambda_integrate(strata, cap) == pytest.approx(exact, rel=1e-4)

    def test_importance_matches_quadrature(self, rng):
        strata = lambda_strata(0.5, 50.0, mode="importance", n=DRAWS, rng=rng)
        (stratum,) = strata
        assert stratum.columnar
        values = stratum.weight * stratum.cap_weight
        exact, _ = integrate.quad(cap, 0.5, 50.0, points=[2.0 / math.pi], limit=200)
        stderr = values.std(ddof=1) / math.sqrt(len(values))
        assert abs(values.mean() - exact) < 3.0 * stderr + 1e-12

    def test_importance_weights_are_unbiased_for_length(self, rng):
        h = sample_proposal(rng, 0.5, 20.0, DRAWS)
        assert np.all((h >= 0.5) & (h <= 20.0))
        weights = proposal_mass(0.5, 20.0) / np.minimum(1.0, (2.0 / h) ** 2)
        stderr = weights.std(ddof=1) / math.sqrt(DRAWS)
        assert abs(weights.mean() - 19.5) < 4.0 * stderr

    def test_proposal_mass_closed_form(self):
        assert proposal_mass(0.5, 2.0) == pytest.approx(1.5)
        assert proposal_mass(0.5, math.inf) == pytest.approx(3.5)
        assert proposal_mass(4.0, 8.0) == pytest.approx(0.5)

    def test_tail_bound_dominates_remainder(self):
        for h_max in (2.0, 10.0, 200.0):
            remainder, _ = integrate.quad(cap, h_max, math.inf)
            assert remainder <= lambda_tail_bound(h_max)
        assert lambda_tail_bound(1.0) == math.inf
        assert lambda_tail_bound(math.inf) == 0.0

    @pytest.mark.parametrize("h_min, h_max", [(0.0, 1.0), (2.0, 1.0), (1.0, 1.0)])
    def test_bad_range(self, h_min, h_max):
        with pytest.raises(BadRange):
            lambda_strata(h_min, h_max, mode="grid")

    def test_grid_needs_finite_range(self):
        with pytest.raises(BadRange):
            lambda_strata(1.0, math.inf, mode="grid")

    def test_importance_needs_generator(self):
        with pytest.raises(ValueError):
            lambda_strata(1.0, 2.0, mode="importance")
