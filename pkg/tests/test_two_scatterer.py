"""
Tests for the two-scatterer bounce process, classifiers and normal-frame checks.
"""

import math

import numpy as np
import pytest

from src.core.errors import CollinearFrame, DegenerateEvent, MechanicallyInconsistent, PreconditionViolated
from src.core.geom3 import E1, angle_between, norm, unit
from src.core.sampling import sample_cone, sample_unit_sphere
from src.core.two_scatterer import (
    RecollisionEvent,
    build_centers,
    check_dispersive,
    check_exit_formula,
    check_lemma_basic,
    classify_batch,
    classify_prime,
    classify_recollision,
    classify_shadowing,
    exit_angle,
    normal_frame,
    plane_normal,
    prime_half_angle,
    rescale,
    simulate_bounce,
    simulate_bounce_batch,
)

pytestmark = pytest.mark.geometry


def cone_events(rng, count, xi_low=1.0, xi_high=30.0, r=1.0):
    """Events with v inside the backscatter cone, where recollisions live."""
    u = sample_unit_sphere(rng, count)
    xi = rng.uniform(xi_low, xi_high, count)
    v, _ = sample_cone(rng, -u, prime_half_angle(xi, r))
    return u, xi, v


def simulate_or_none(event):
    try:
        return simulate_bounce(event)
    except (DegenerateEvent, MechanicallyInconsistent):
        return None


class TestCenters:
    def test_collinear_configuration(self, head_on_event):
        a, b = build_centers(head_on_event)
        np.testing.assert_allclose(a, [1.0, 0.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(b, [-11.0, 0.0, 0.0], atol=1e-15)

    def test_direct_formula(self, make_event):
        a, b = build_centers(make_event([0, 1, 0], 10.0, [1, 0, 0]))
        s = 1.0 / math.sqrt(2.0)
        np.testing.assert_allclose(a, [s, -s, 0.0], atol=1e-15)
        np.testing.assert_allclose(b, [-s, 10.0 + s, 0.0], atol=1e-14)

    def test_radius_identities_on_random_events(self, random_events):
        for event in random_events(300, r=0.7):
            a, b = build_centers(event)
            assert norm(a) == pytest.approx(0.7, abs=1e-12)
            assert norm(b - event.start) == pytest.approx(0.7, abs=1e-12)

    @pytest.mark.parametrize("u, v", [([1, 0, 0], [0, 1, 0]), ([0, 1, 0], [0, 1, 0])])
    def test_degenerate_events_raise(self, make_event, u, v):
        with pytest.raises(DegenerateEvent):
            build_centers(make_event(u, 5.0, v))

    def test_event_validation(self):
        with pytest.raises(ValueError):
            RecollisionEvent(u=-E1, xi=0.0, v=E1)
        with pytest.raises(ValueError):
            RecollisionEvent(u=-E1, xi=1.0, v=E1, r=-1.0)


class TestSimulateBounce:
    def test_no_recollision(self, make_event):
        trace = simulate_bounce(make_event([0, 1, 0], 10.0, [1, 0, 0]))
        assert trace.n_collisions == 2
        assert trace.beta == pytest.approx(10.0)
        np.testing.assert_allclose(trace.w_exit, E1)
        assert not trace.truncated

    def test_collinear_ping_pong_truncates(self, head_on_event):
        trace = simulate_bounce(head_on_event, n_max=50)
        assert trace.truncated
        assert trace.n_collisions == 50
        # each round trip between the facing poles takes 10
        np.testing.assert_allclose(trace.flight_durations(), 10.0, atol=1e-9)

    def test_n_max_below_three_rejected(self, head_on_event):
        with pytest.raises(ValueError):
            simulate_bounce(head_on_event, n_max=2)

    def test_single_recollision_matches_quadratic_oracle(self, rng):
        u, xi, v = cone_events(rng, 2000, 10.0, 30.0)
        found = 0
        for i in range(len(xi)):
            trace = simulate_or_none(RecollisionEvent(u=u[i], xi=xi[i], v=v[i]))
            if trace is None or trace.n_collisions != 3:
                continue
            start, direction = trace.event.start, trace.event.v
            m = start - trace.a
            roots = np.roots([1.0, 2.0 * np.dot(direction, m), np.dot(m, m) - 1.0])
            t = float(np.min(roots.real))
            np.testing.assert_allclose(trace.position(3), start + t * direction, atol=1e-9)
            assert trace.time(3) == pytest.approx(xi[i] + t, abs=1e-9)
            assert check_exit_formula(trace) < 1e-12
            found += 1
            if found == 25:
                break
        assert found == 25

    def test_trace_invariants(self, rng):
        u, xi, v = cone_events(rng, 1500)
        checked = 0
        for i in range(len(xi)):
            trace = simulate_or_none(RecollisionEvent(u=u[i], xi=xi[i], v=v[i]))
            if trace is None:
                continue
            np.testing.assert_allclose(trace.w[:3], [E1, trace.event.u, trace.event.v])
            assert trace.time(1) == 0.0 and trace.time(2) == xi[i]
            centers = np.array([trace.center(k) for k in range(1, trace.n_collisions + 1)])
            np.testing.assert_allclose(norm(trace.points - centers), 1.0, atol=1e-9)
            np.testing.assert_allclose(norm(trace.flights()), trace.flight_durations(), atol=1e-9)
            np.testing.assert_allclose(norm(trace.w), 1.0, atol=1e-12)
            assert np.all(trace.flight_durations() >= 0.0)
            checked += 1
        assert checked > 1000

    def test_exact_centers_never_start_inside(self, rng):
        # |b|^2 = xi^2 + r^2 + 2 xi r (1 - u.v)/|u - v| >= r^2, and likewise for xi*u against a
        u = sample_unit_sphere(rng, 20_000)
        v = sample_unit_sphere(rng, 20_000)
        xi = rng.uniform(1e-4, 2.0, 20_000)
        flags = classify_batch(u, xi, v, 1.0)
        assert not flags["inconsistent"].any()

    def test_dataframe_columns(self, make_event):
        frame = simulate_bounce(make_event([0, 1, 0], 10.0, [1, 0, 0])).to_dataframe()
        assert list(frame.columns) == ["k", "tau", "x", "y", "z", "wx", "wy", "wz", "sphere_id"]
        assert frame["sphere_id"].tolist() == ["a", "b"]


class TestBatch:
    def test_batch_agrees_bitwise_with_scalar(self, rng):
        u, xi, v = cone_events(rng, 600)
        batch = simulate_bounce_batch(u, xi, v, 1.0)
        for i in range(len(xi)):
            trace = simulate_or_none(RecollisionEvent(u=u[i], xi=xi[i], v=v[i]))
            if trace is None:
                assert not batch.valid[i]
                continue
            assert batch.valid[i]
            assert batch.n_collisions[i] == trace.n_collisions
            assert batch.beta[i] == trace.beta
            assert np.array_equal(batch.w_exit[i], trace.w_exit)

    def test_batch_normalizes_like_the_event(self, rng):
        u, xi, v = cone_events(rng, 300)
        # off-unit inputs: both paths must round them to the same unit vectors
        u, v = u * 1.5, v * 0.7
        batch = simulate_bounce_batch(u, xi, v, 1.0)
        recollided = 0
        for i in range(len(xi)):
            trace = simulate_or_none(RecollisionEvent(u=u[i], xi=xi[i], v=v[i]))
            if trace is None:
                continue
            assert batch.n_collisions[i] == trace.n_collisions
            assert batch.beta[i] == trace.beta
            assert np.array_equal(batch.w_exit[i], trace.w_exit)
            recollided += trace.n_collisions >= 3
        assert recollided > 0

    def test_counts(self, head_on_event):
        batch = simulate_bounce_batch(
            np.array([head_on_event.u, [0.0, 1.0, 0.0], E1]),
            np.array([10.0, 10.0, 3.0]),
            np.array([E1, E1, [0.0, 1.0, 0.0]]),
            1.0,
            n_max=20,
        )
        counts = batch.counts()
        assert counts == {"events": 3, "degenerate": 1, "inconsistent": 0, "truncated": 1, "recollisions": 1}
        assert batch.usable.tolist() == [False, True, False]


class TestClassifiers:
    def test_shadowing_examples(self, head_on_event, make_event):
        assert classify_shadowing(head_on_event)
        # b sits about 3.7 off the e axis
        far = make_event([0, 1, 0], 3.0, [1, 0, 0])
        assert not classify_shadowing(far)

    def test_shadowing_matches_grid_oracle(self, random_events):
        ts = np.linspace(-200.0, 200.0, 400001)
        for event in random_events(100):
            _, b = build_centers(event)
            closest = np.min(np.linalg.norm(b[None, :] + ts[:, None] * E1[None, :], axis=1))
            if abs(closest - event.r) < 1e-4:
                continue
            assert classify_shadowing(event) == bool(closest < event.r)

    def test_half_line_shadowing_is_contained_in_line(self, random_events):
        for event in random_events(400):
            if classify_shadowing(event, "half_line"):
                assert classify_shadowing(event, "line")

    def test_recollision_examples(self, head_on_event, make_event):
        assert classify_recollision(head_on_event)
        assert not classify_recollision(make_event([0, 1, 0], 10.0, [1, 0, 0]))

    def test_recollision_agrees_with_simulator(self, rng):
        u, xi, v = cone_events(rng, 3000)
        agreed = 0
        for i in range(len(xi)):
            event = RecollisionEvent(u=u[i], xi=xi[i], v=v[i])
            trace = simulate_or_none(event)
            if trace is None:
                continue
            assert classify_recollision(event) == (trace.n_collisions >= 3)
            agreed += 1
        assert agreed > 2500

    def test_prime_examples(self, make_event):
        for angle, expected in [(0.15, True), (0.25, False)]:
            v = [math.cos(angle), math.sin(angle), 0.0]
            literal = make_event([1, 0, 0], 10.0, v)
            assert angle_between(literal.u, literal.v) == pytest.approx(angle)
            assert classify_prime(literal, "literal") is expected
            assert classify_prime(make_event([-1, 0, 0], 10.0, v), "backscatter") is expected

    @pytest.mark.parametrize("angle, expected", [(0.15, True), (0.199, True), (0.25, False)])
    def test_literal_cone_example(self, make_event, angle, expected):
        # xi = 10, r = 1: half angle 0.2 around u itself
        event = make_event([0, 1, 0], 10.0, [0.0, math.cos(angle), math.sin(angle)])
        assert classify_prime(event, axis="literal") is expected
        flags = classify_batch(event.u, event.xi, event.v, event.r)
        assert bool(flags["prime_literal"][0]) is expected
        # the default reading is centered on -u, so v near u is outside it
        assert classify_prime(event) is False

    def test_recollision_implies_backscatter_prime(self, rng):
        u = sample_unit_sphere(rng, 20_000)
        v = sample_unit_sphere(rng, 20_000)
        xi = rng.uniform(0.5, 5.0, 20_000)
        flags = classify_batch(u, xi, v, 1.0)
        ok = ~flags["degenerate"] & ~flags["inconsistent"]
        recollided = flags["recollision_ray"] & ok
        assert recollided.sum() > 100
        assert np.all(flags["prime_backscatter"][recollided])

    def test_batch_matches_scalar_classifiers(self, random_events):
        events = random_events(200)
        u = np.array([e.u for e in events])
        v = np.array([e.v for e in events])
        xi = np.array([e.xi for e in events])
        flags = classify_batch(u, xi, v, 1.0)
        for i, event in enumerate(events):
            assert flags["shadowing_line"][i] == classify_shadowing(event, "line")
            assert flags["shadowing_half_line"][i] == classify_shadowing(event, "half_line")
            assert flags["recollision_line"][i] == classify_recollision(event, "line")
            assert flags["prime_backscatter"][i] == classify_prime(event)
            if not flags["inconsistent"][i]:
                assert flags["recollision_ray"][i] == classify_recollision(event)

    def test_unknown_mode_rejected(self, head_on_event):
        with pytest.raises(ValueError):
            classify_shadowing(head_on_event, "ray")
        with pytest.raises(ValueError):
            classify_recollision(head_on_event, "half_line")


class TestRescaleAndExit:
    def test_rescale_maps_radius_to_one(self, make_event):
        event = rescale(make_event([0, 1, 0], 3.0, [1, 0, 0], r=0.5), 0.5)
        assert event.r == pytest.approx(1.0)
        assert event.xi == pytest.approx(6.0)

    def test_rescale_rejects_non_positive_factor(self, head_on_event):
        with pytest.raises(ValueError):
            rescale(head_on_event, 0.0)

    def test_scaling_covariance(self, rng):
        r = 0.3
        u, xi, v = cone_events(rng, 400, 0.5, 10.0, r=r)
        for i in range(len(xi)):
            event = RecollisionEvent(u=u[i], xi=xi[i], v=v[i], r=r)
            trace = simulate_or_none(event)
            if trace is None or trace.truncated:
                continue
            scaled = simulate_bounce(rescale(event, r))
            assert scaled.n_collisions == trace.n_collisions
            assert scaled.beta == pytest.approx(trace.beta / r, rel=1e-9)

    def test_exit_angle_extremes(self, make_event):
        trace = simulate_bounce(make_event([0, 1, 0], 10.0, [1, 0, 0]))
        assert exit_angle(trace) == pytest.approx(math.pi, abs=1e-12)
        back = simulate_bounce(make_event([0, 1, 0], 10.0, [-1, 0, 0]))
        assert back.n_collisions == 2
        assert exit_angle(back) == pytest.approx(0.0, abs=1e-12)

    def test_exit_angle_matches_arccos(self, random_events):
        for event in random_events(200):
            trace = simulate_or_none(event)
            if trace is None:
                continue
            expected = math.acos(float(np.clip(np.dot(-E1, trace.w_exit), -1.0, 1.0)))
            assert exit_angle(trace) == pytest.approx(expected, abs=1e-7)


class TestNormalFrame:
    def test_axis_aligned_normal(self):
        n = plane_normal(np.array([1.0, 0.0, 0.0]), np.array([0.0, 5.0, 0.0]), np.array([0.0, 0.6, 0.8]))
        np.testing.assert_allclose(n, [0.0, 0.0, 1.0])

    def test_collinear_points_raise(self):
        with pytest.raises(CollinearFrame):
            plane_normal(np.array([1.0, 0.0, 0.0]), np.array([-11.0, 0.0, 0.0]), -E1)

    def test_frame_identities(self, rng):
        u, xi, v = cone_events(rng, 1000, 10.0, 30.0)
        checked = 0
        for i in range(len(xi)):
            trace = simulate_or_none(RecollisionEvent(u=u[i], xi=xi[i], v=v[i]))
            if trace is None or trace.n_collisions < 3:
                continue
            frame = normal_frame(trace)
            assert abs(np.dot(frame.n, trace.a)) < 1e-9
            assert abs(np.dot(frame.n, trace.b)) < 1e-9
            assert frame.n_seq[1] >= 0.0
            assert abs(frame.h_seq[1]) < 1e-12
            checked += 1
        assert checked > 20


class TestInequalities:
    def conditioned_traces(self, rng, count):
        u, xi, v = cone_events(rng, count, 10.0, 60.0)
        for i in range(len(xi)):
            trace = simulate_or_none(RecollisionEvent(u=u[i], xi=xi[i], v=v[i]))
            if trace is None or trace.n_collisions < 3 or trace.truncated:
                continue
            try:
                yield trace, normal_frame(trace)
            except CollinearFrame:
                continue

    def test_dispersive_recursions_hold(self, rng):
        seen = 0
        for trace, frame in self.conditioned_traces(rng, 4000):
            report = check_dispersive(trace, frame)
            assert report.passed, report.violations()
            seen += 1
        assert seen > 100

    def test_basic_bounds_hold(self, rng):
        for trace, frame in self.conditioned_traces(rng, 2000):
            report = check_lemma_basic(trace, frame)
            assert report.passed, report.violations()
            assert report.min_margin("monotone") >= -1e-9

    def test_no_recollision_gives_empty_report(self, make_event):
        trace = simulate_bounce(make_event([0, 1, 0.2], 10.0, [1, 0, 0]))
        assert trace.n_collisions == 2
        assert check_dispersive(trace, normal_frame(trace)).empty

    def test_preconditions(self, make_event):
        trace = simulate_bounce(make_event([0, 1, 0.2], 5.0, [1, 0, 0]))
        with pytest.raises(PreconditionViolated):
            check_dispersive(trace, normal_frame(trace))
        with pytest.raises(PreconditionViolated):
            check_exit_formula(trace)

    def test_report_dataframe(self, rng):
        trace, frame = next(self.conditioned_traces(rng, 2000))
        frame_df = check_dispersive(trace, frame).to_dataframe()
        assert set(frame_df["check"]) >= {"h_step", "n_step_proof", "n_step_display", "chained"}
