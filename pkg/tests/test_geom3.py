"""
Tests for the 3D geometric primitives.
"""

import math

import numpy as np
import pytest
from scipy import optimize

from src.core.errors import InsideSphere, NonIncoming
from src.core.geom3 import (
    E1,
    Ray,
    Sphere,
    equal_area_bins,
    first_hit_times,
    half_line_distance,
    norm,
    point_line_distance,
    ray_sphere_first_hit,
    reflect,
    reflection_matrix,
    segment_distance,
    sphere_roots,
    unit,
)
from src.core.sampling import sample_unit_sphere

pytestmark = pytest.mark.geometry


class TestRaySphere:
    def test_collinear_approach(self):
        t = ray_sphere_first_hit(Ray(np.zeros(3), E1), Sphere(np.array([2.0, 0.0, 0.0]), 1.0), 0.0)
        assert t == pytest.approx(1.0, abs=1e-12)

    def test_departing_contact_is_a_miss(self):
        ray = Ray(np.array([1.0, 0.0, 0.0]), E1)
        assert ray_sphere_first_hit(ray, Sphere(np.zeros(3), 1.0), 0.0) is None

    def test_tangential_contact_is_a_miss(self):
        ray = Ray(np.array([-5.0, 1.0, 0.0]), E1)
        assert ray_sphere_first_hit(ray, Sphere(np.zeros(3), 1.0)) is None

    def test_origin_inside_raises(self):
        with pytest.raises(InsideSphere):
            ray_sphere_first_hit(Ray(np.array([0.2, 0.0, 0.0]), E1), Sphere(np.zeros(3), 1.0))

    def test_negative_t_min_rejected(self):
        with pytest.raises(ValueError):
            ray_sphere_first_hit(Ray(np.zeros(3), E1), Sphere(np.array([3.0, 0.0, 0.0]), 1.0), -1.0)

    @pytest.mark.parametrize("t_min, expected", [(0.0, 1.0), (0.5, 1.0), (1.0, 3.0), (1.5, 3.0), (2.999, 3.0)])
    def test_returns_exit_root_once_inside_at_t_min(self, t_min, expected):
        # roots 1 and 3
        ray = Ray(np.zeros(3), E1)
        t = ray_sphere_first_hit(ray, Sphere(np.array([2.0, 0.0, 0.0]), 1.0), t_min)
        assert t == pytest.approx(expected, abs=1e-12)

    def test_no_root_after_t_min(self):
        ray = Ray(np.zeros(3), E1)
        assert ray_sphere_first_hit(ray, Sphere(np.array([2.0, 0.0, 0.0]), 1.0), 3.5) is None

    def test_entering_times_ignore_exit_root(self):
        t, _ = first_hit_times(np.zeros(3), E1, np.array([2.0, 0.0, 0.0]), 1.0, 1.5)
        assert math.isnan(float(t))
        t_lo, t_hi, crossing, inside = sphere_roots(np.zeros(3), E1, np.array([2.0, 0.0, 0.0]), 1.0)
        assert (float(t_lo), float(t_hi)) == pytest.approx((1.0, 3.0))
        assert bool(crossing) and not bool(inside)

    def test_matches_bisection_oracle(self, rng):
        checked = 0
        for _ in range(200):
            center = rng.normal(size=3) * 4.0
            radius = rng.uniform(0.2, 2.0)
            origin = center + unit(rng.normal(size=3)) * (radius + rng.uniform(0.5, 6.0))
            target = center + unit(rng.normal(size=3)) * radius * 0.9
            direction = unit(target - origin)
            t = ray_sphere_first_hit(Ray(origin, direction), Sphere(center, radius))
            assert t is not None
            closest = float(np.dot(center - origin, direction))
            root = optimize.bisect(
                lambda s: np.linalg.norm(origin + s * direction - center) - radius, 0.0, closest, xtol=1e-14
            )
            assert t == pytest.approx(root, abs=1e-9)
            hit = origin + t * direction
            assert abs(np.linalg.norm(hit - center) - radius) < 1e-9 * (1.0 + t)
            checked += 1
        assert checked == 200

    def test_batch_flags_misses_with_nan(self):
        origins = np.array([[0.0, 0.0, 0.0], [0.0, 5.0, 0.0]])
        t, inside = first_hit_times(origins, np.array([E1, E1]), np.array([[3.0, 0.0, 0.0]] * 2), 1.0)
        assert t[0] == pytest.approx(2.0)
        assert math.isnan(t[1])
        assert not inside.any()


class TestReflect:
    def test_head_on_reversal(self):
        np.testing.assert_allclose(reflect(E1, -E1), -E1, atol=1e-15)

    def test_ninety_degree_deflection(self):
        V = np.array([-1.0, 1.0, 0.0]) / math.sqrt(2.0)
        np.testing.assert_allclose(reflect(E1, V), [0.0, 1.0, 0.0], atol=1e-15)

    def test_non_incoming_normal_raises(self):
        with pytest.raises(NonIncoming):
            reflect(E1, E1)

    def test_identities_on_random_pairs(self, rng):
        w = sample_unit_sphere(rng, 500)
        V = sample_unit_sphere(rng, 500)
        for wi, Vi in zip(w, V):
            if np.dot(wi, Vi) >= 0.0:
                Vi = -Vi
            out = reflect(wi, Vi)
            assert abs(np.linalg.norm(out) - 1.0) < 1e-12
            assert np.dot(out, Vi) == pytest.approx(-np.dot(wi, Vi), abs=1e-12)
            tangential_in = wi - np.dot(wi, Vi) * Vi
            tangential_out = out - np.dot(out, Vi) * Vi
            np.testing.assert_allclose(tangential_out, tangential_in, atol=1e-12)
            np.testing.assert_allclose(reflect(out, -Vi), wi, atol=1e-12)

    def test_reflection_matrix_maps_and_is_involution(self, rng):
        source, target = sample_unit_sphere(rng, 2)
        H = reflection_matrix(source, target)
        np.testing.assert_allclose(H @ source, target, atol=1e-12)
        np.testing.assert_allclose(H @ H, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(reflection_matrix(E1, E1), np.eye(3))


class TestDistances:
    def test_point_line_examples(self):
        assert point_line_distance([0.0, 2.0, 0.0], E1) == pytest.approx(2.0)
        assert point_line_distance([5.0, 0.0, 0.0], E1) == pytest.approx(0.0)

    def test_point_line_grid_oracle(self, rng):
        coarse = np.linspace(-20.0, 20.0, 400001)

        def distances(p, d, ts):
            return np.linalg.norm(p[None, :] - ts[:, None] * d[None, :], axis=1)

        for _ in range(20):
            p = rng.normal(size=3) * 3.0
            d = unit(rng.normal(size=3))
            best = coarse[np.argmin(distances(p, d, coarse))]
            fine = best + np.linspace(-1e-4, 1e-4, 200001)
            assert point_line_distance(p, d) == pytest.approx(distances(p, d, fine).min(), abs=1e-9)

    def test_half_line_uses_origin_ahead(self):
        assert half_line_distance([3.0, 4.0, 0.0], E1) == pytest.approx(5.0)
        assert half_line_distance([-3.0, 4.0, 0.0], E1) == pytest.approx(4.0)

    def test_segment_distance(self):
        starts = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        ends = np.array([[2.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        d = segment_distance(np.array([1.0, 1.0, 0.0]), starts, ends)
        np.testing.assert_allclose(d, [1.0, math.sqrt(2.0), 1.0])

    def test_norm_of_batch(self):
        np.testing.assert_allclose(norm(np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 2.0]])), [5.0, 2.0])


class TestBins:
    def test_equal_area_bins_are_balanced(self, rng):
        vectors = sample_unit_sphere(rng, 48_000)
        counts = np.bincount(equal_area_bins(vectors, 48), minlength=48)
        assert counts.sum() == 48_000
        # 1000 expected per bin, sd about 31
        assert counts.min() > 850 and counts.max() < 1150

    def test_poles_land_in_extreme_bands(self):
        bins = equal_area_bins(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]), 48)
        assert bins[0] >= 48 - 12
        assert bins[1] < 12
