"""
Invariant Suite

Seeded pointwise and statistical checks of the geometry, bounce, sampler and coupling invariants.
"""

from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Tuple
import logging
import math
import time

import numpy as np
import pandas as pd
from scipy import stats

from .errors import CollinearFrame, RecollideError
from .geom3 import dot, first_hit_times, norm, reflect
from .lorentz import GasConfig, LegSource, path_stream, run_process, verify_capsules
from .sampling import (
    EXP_UNIT_MEAN,
    RngStream,
    cross_decomposition,
    sample_cone,
    sample_exp_unit_conditioned,
    sample_unit_sphere,
    sphere_uniformity_chi2,
    theta_cdf,
)
from .two_scatterer import (
    RecollisionEvent,
    check_dispersive,
    check_exit_formula,
    check_lemma_basic,
    classify_batch,
    normal_frame,
    prime_half_angle,
    simulate_bounce,
    simulate_bounce_batch,
)

logger = logging.getLogger(__name__)

ALPHA = 0.01
GEOMETRY_TOL = 1e-12
SURFACE_TOL = 1e-9
EXIT_TOL = 1e-9


@dataclass
class SuiteRow:
    """Outcome of one invariant check."""

    name: str
    checked: int
    violations: int
    max_violation: float
    passed: bool
    detail: str = ""

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class SuiteResult:
    seed: int
    budget: int
    rows: List[SuiteRow] = field(default_factory=list)
    wall_time_s: float = 0.0

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.rows)

    @property
    def failures(self) -> List[str]:
        return [row.name for row in self.rows if not row.passed]

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(
            [row.to_dict() for row in self.rows],
            columns=["name", "checked", "violations", "max_violation", "passed", "detail"],
        )

    def to_dict(self) -> Dict:
        return {
            "passed": self.passed,
            "budget": self.budget,
            "rows": [row.to_dict() for row in self.rows],
        }


def _row(name: str, checked: int, excess: np.ndarray, detail: str = "") -> SuiteRow:
    """Row from non-negative violation excesses (0 where the check holds)."""
    excess = np.asarray(excess, dtype=float)
    violations = int(np.count_nonzero(excess > 0.0))
    worst = float(excess.max()) if excess.size else 0.0
    return SuiteRow(name=name, checked=checked, violations=violations, max_violation=worst, passed=violations == 0, detail=detail)


def _test_row(name: str, checked: int, p_value: float) -> SuiteRow:
    return SuiteRow(
        name=name,
        checked=checked,
        violations=int(p_value <= ALPHA),
        max_violation=max(0.0, ALPHA - p_value),
        passed=p_value > ALPHA,
        detail=f"p={p_value:.4g}",
    )


# Geometry

def check_reflection(rng: np.random.Generator, budget: int) -> List[SuiteRow]:
    w = sample_unit_sphere(rng, budget)
    V = sample_unit_sphere(rng, budget)
    V = np.where((dot(V, w) < 0.0)[:, None], V, -V)
    out = np.array([reflect(w[i], V[i]) for i in range(budget)])
    back = np.array([reflect(out[i], -V[i]) for i in range(budget)])
    speed = np.abs(norm(out) - 1.0)
    involution = norm(back - w)
    flip = np.abs(dot(out, V) + dot(w, V))
    return [
        _row("reflect_speed", budget, np.maximum(speed - GEOMETRY_TOL, 0.0)),
        _row("reflect_involution", budget, np.maximum(involution - GEOMETRY_TOL, 0.0)),
        _row("reflect_normal_flip", budget, np.maximum(flip - GEOMETRY_TOL, 0.0)),
    ]


def check_ray_sphere(rng: np.random.Generator, budget: int) -> List[SuiteRow]:
    centers = rng.normal(size=(budget, 3)) * 5.0
    radii = rng.uniform(0.1, 2.0, budget)
    origins = centers + sample_unit_sphere(rng, budget) * (radii + rng.exponential(size=budget) * 5.0)[:, None]
    directions = sample_unit_sphere(rng, budget)
    t, _ = first_hit_times(origins, directions, centers, radii, 0.0)
    hit = ~np.isnan(t)
    points = origins[hit] + t[hit][:, None] * directions[hit]
    gap = np.abs(norm(points - centers[hit]) - radii[hit])
    return [_row("ray_sphere_surface", int(hit.sum()), np.maximum(gap - SURFACE_TOL * (1.0 + t[hit]), 0.0))]


# Bounce process

def _recollision_sample(rng: np.random.Generator, budget: int, xi_lo: float, xi_hi: float):
    """Events at r = 1 with v drawn in the backscatter cone, where every recollision lives."""
    u = sample_unit_sphere(rng, budget)
    xi = rng.uniform(xi_lo, xi_hi, budget)
    v, _ = sample_cone(rng, -u, prime_half_angle(xi, 1.0))
    return u, xi, v


def check_dispersive_suite(rng: np.random.Generator, budget: int) -> List[SuiteRow]:
    """Dispersive and basic inequalities on events conditioned to N >= 3 and xi >= 10 at r = 1."""
    u, xi, v = _recollision_sample(rng, budget, 10.0, 60.0)
    batch = simulate_bounce_batch(u, xi, v, 1.0)
    selected = np.flatnonzero(batch.recollided & ~batch.truncated)

    excess: Dict[str, List[float]] = {}
    exit_dev: List[float] = []
    collinear = 0
    for i in selected:
        trace = simulate_bounce(RecollisionEvent(u=u[i], xi=float(xi[i]), v=v[i], r=1.0))
        try:
            frame = normal_frame(trace)
        except CollinearFrame:
            collinear += 1
            continue
        for report in (check_dispersive(trace, frame), check_lemma_basic(trace, frame)):
            for name in report.asserted:
                margin = report.margins[name]
                excess.setdefault(name, []).extend(np.maximum(-margin - report.tolerance, 0.0).tolist())
        if trace.n_collisions == 3:
            exit_dev.append(check_exit_formula(trace))

    detail = f"{len(selected)} recollisions, {collinear} collinear frames skipped"
    rows = [_row(f"dispersive_{name}", len(selected) - collinear, np.array(values), detail) for name, values in excess.items()]
    rows.append(_row("exit_formula_n3", len(exit_dev), np.maximum(np.array(exit_dev) - EXIT_TOL, 0.0)))
    return rows


def check_classifiers(rng: np.random.Generator, budget: int) -> List[SuiteRow]:
    """classify_recollision (ray) against N >= 3, and the cone inclusion."""
    half = budget // 2
    u, xi, v = _recollision_sample(rng, half, 0.05, 20.0)
    u2 = sample_unit_sphere(rng, budget - half)
    xi2 = rng.uniform(0.05, 20.0, budget - half)
    v2 = sample_unit_sphere(rng, budget - half)
    u, xi, v = np.concatenate([u, u2]), np.concatenate([xi, xi2]), np.concatenate([v, v2])

    masks = classify_batch(u, xi, v, 1.0)
    batch = simulate_bounce_batch(u, xi, v, 1.0)
    usable = batch.usable
    disagree = (masks["recollision_ray"] != (batch.n_collisions >= 3)) & usable
    outside = masks["recollision_ray"] & ~masks["prime_backscatter"] & usable
    return [
        _row("recollision_classifier_vs_simulator", int(usable.sum()), disagree.astype(float)),
        _row("recollision_inside_backscatter_cone", int(usable.sum()), outside.astype(float)),
    ]


# Samplers

def check_samplers(rng: np.random.Generator, budget: int) -> List[SuiteRow]:
    xi = sample_exp_unit_conditioned(rng, budget)
    z = (xi.mean() - EXP_UNIT_MEAN) / (xi.std(ddof=1) / math.sqrt(budget))
    mean_row = SuiteRow(
        name="exp_unit_mean",
        checked=budget,
        violations=int(abs(z) > 4.0),
        max_violation=max(0.0, abs(z) - 4.0),
        passed=abs(z) <= 4.0,
        detail=f"z={z:.3f}",
    )
    u = sample_unit_sphere(rng, budget)
    v = sample_unit_sphere(rng, budget)
    w, theta = cross_decomposition(u, v)
    _, chi_p = sphere_uniformity_chi2(w, 48)
    ks = stats.kstest(theta, theta_cdf)
    return [
        mean_row,
        _test_row("theta_law_ks", budget, float(ks.pvalue)),
        _test_row("cross_direction_uniform", budget, chi_p),
    ]


# Gas coupling

def check_gas(seed: int, n_paths: int) -> List[SuiteRow]:
    """Shared-draw identity with every correction off, speed conservation, and capsule soundness."""
    plain = GasConfig(eps=0.05, horizon=20.0, seed=seed, n_paths=n_paths, thinning=False, mechanics=False, classifiers=False)
    full = GasConfig(eps=0.1, horizon=40.0, seed=seed, n_paths=n_paths)

    identity = np.zeros(n_paths)
    speed: List[float] = []
    capsule_errors = 0
    centers = 0
    for i in range(n_paths):
        source = LegSource(path_stream(plain, i))
        traces = [run_process(p, plain, source).trace for p in ("X", "Y", "Z")]
        times = [np.array(t.times) for t in traces]
        positions = [np.array(t.positions) for t in traces]
        same = all(
            len(times[0]) == len(times[k])
            and np.array_equal(times[0], times[k])
            and np.array_equal(positions[0], positions[k])
            for k in (1, 2)
        )
        identity[i] = 0.0 if same else 1.0

        source = LegSource(path_stream(full, i))
        for process in ("X", "Z"):
            state = run_process(process, full, source)
            speed.extend(np.abs(norm(np.array(state.trace.velocities)) - 1.0).tolist())
            if process == "X":
                try:
                    centers += verify_capsules(state)
                except RecollideError as e:
                    capsule_errors += 1
                    logger.error(f"capsule check failed on path {i}: {e}")

    return [
        _row("coupling_identity_without_corrections", n_paths, identity),
        _row("speed_conserved", len(speed), np.maximum(np.array(speed) - GEOMETRY_TOL, 0.0)),
        SuiteRow(
            name="capsule_soundness",
            checked=centers,
            violations=capsule_errors,
            max_violation=float(capsule_errors),
            passed=capsule_errors == 0,
        ),
    ]


CHECKS: Tuple[Tuple[str, Callable], ...] = (
    ("reflection", check_reflection),
    ("ray_sphere", check_ray_sphere),
    ("dispersive", check_dispersive_suite),
    ("classifiers", check_classifiers),
    ("samplers", check_samplers),
)


def run_suite(seed: int, budget: int = 20_000, gas_paths: int = 20) -> SuiteResult:
    """
    Run every invariant check on its own substream of `seed`.

    Args:
        seed: Base seed
        budget: Draws per check
        gas_paths: Paths for the coupling checks

    Returns:
        SuiteResult with one row per invariant
    """
    start = time.time()
    result = SuiteResult(seed=seed, budget=budget)
    base = RngStream(seed=seed)
    for index, (group, check) in enumerate(CHECKS):
        rows = check(base.substream(index).generator(), budget)
        result.rows.extend(rows)
        logger.info(f"{group}: {sum(r.passed for r in rows)}/{len(rows)} checks passed")
    result.rows.extend(check_gas(seed, gas_paths))
    result.wall_time_s = time.time() - start

    if result.passed:
        logger.info(f"Invariant suite passed ({len(result.rows)} checks, {result.wall_time_s:.1f}s)")
    else:
        logger.warning(f"Invariant suite failed: {', '.join(result.failures)}")
    return result
