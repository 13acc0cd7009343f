"""
Random Sources

Counter-based RNG streams, the measures mu and lambda, cone and cross-direction samplers.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple
import math
import logging

import numpy as np
from scipy import stats

from .errors import BadAngle, BadRange, Parallel
from .geom3 import cross, equal_area_bins, norm, orthonormal_basis
from .two_scatterer import RecollisionEvent

logger = logging.getLogger(__name__)

UINT64 = 2 ** 64
EXP_UNIT_MASS = 1.0 - math.exp(-1.0)
EXP_UNIT_MEAN = (math.e - 2.0) / (math.e - 1.0)
PARALLEL_TOL = 1e-12


@dataclass(frozen=True)
class RngStream:
    """
    Reproducible random stream keyed by (seed, stream_id).

    The Philox key is derived from (seed, stream_id) through a SeedSequence
    and the draw sequence starts at `counter`, so the output depends on
    nothing else. Work item i of a run uses `substream(i)`.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id", "counter"):
            value = getattr(self, name)
            if not 0 <= int(value) < UINT64:
                raise ValueError(f"{name} must be a 64-bit unsigned integer, got {value}")
            object.__setattr__(self, name, int(value))

    def key(self) -> np.ndarray:
        return np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,)).generate_state(2, np.uint64)

    def generator(self) -> np.random.Generator:
        """Fresh Generator positioned at the start of this stream."""
        return np.random.Generator(np.random.Philox(key=self.key(), counter=self.counter))

    def substream(self, index: int) -> "RngStream":
        mixed = np.random.SeedSequence(self.stream_id, spawn_key=(int(index),)).generate_state(1, np.uint64)[0]
        return RngStream(seed=self.seed, stream_id=int(mixed))


def sample_unit_sphere(rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Uniform direction(s) on S^2: cos(theta) uniform on [-1, 1], azimuth uniform."""
    n = 1 if size is None else size
    z = rng.uniform(-1.0, 1.0, n)
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    out = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)
    return out[0] if size is None else out


def exp_unit_cdf(x) -> np.ndarray:
    """CDF (1 - e^-x)/(1 - e^-1) of the unit exponential conditioned to [0, 1]."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return -np.expm1(-x) / EXP_UNIT_MASS


def exp_unit_density(x) -> np.ndarray:
    """Density e^(1-x)/(e-1) on [0, 1], zero elsewhere."""
    x = np.asarray(x, dtype=float)
    inside = (x >= 0.0) & (x <= 1.0)
    return np.where(inside, np.exp(1.0 - x) / (math.e - 1.0), 0.0)


def sample_exp_unit_conditioned(rng: np.random.Generator, size: Optional[int] = None):
    """Inverse-CDF draw x = -log(1 - p(1 - 1/e)) with p uniform on (0, 1]."""
    p = 1.0 - rng.random(size)
    return -np.log1p(-p * EXP_UNIT_MASS)


@dataclass(frozen=True)
class MuSample:
    """One event drawn from mu = Uni(S^2) x EXP(1|1) x Uni(S^2)."""

    event: RecollisionEvent


@dataclass
class EventBatch:
    """Columnar batch of events (u, xi, v) at radius r."""

    u: np.ndarray
    xi: np.ndarray
    v: np.ndarray
    r: float

    def __len__(self) -> int:
        return len(self.xi)

    def event(self, i: int) -> RecollisionEvent:
        return RecollisionEvent(u=self.u[i], xi=float(self.xi[i]), v=self.v[i], r=self.r)


def sample_mu(rng: np.random.Generator, r: float) -> MuSample:
    if not r > 0.0:
        raise ValueError(f"radius must be positive, got {r}")
    u = sample_unit_sphere(rng)
    xi = float(sample_exp_unit_conditioned(rng))
    v = sample_unit_sphere(rng)
    return MuSample(event=RecollisionEvent(u=u, xi=xi, v=v, r=r))


def sample_mu_batch(rng: np.random.Generator, r: float, size: int) -> EventBatch:
    if not r > 0.0:
        raise ValueError(f"radius must be positive, got {r}")
    u = sample_unit_sphere(rng, size)
    xi = sample_exp_unit_conditioned(rng, size)
    v = sample_unit_sphere(rng, size)
    return EventBatch(u=u, xi=xi, v=v, r=r)


def sample_cone(
    rng: np.random.Generator,
    axis: np.ndarray,
    half_angle,
    size: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Uniform direction(s) on the cap {angle(v, axis) <= half_angle}.

    Args:
        rng: Generator
        axis: Unit axis, (3,) or (n, 3) for per-draw axes
        half_angle: Scalar or (n,) half angles in (0, pi]
        size: Number of draws when axis is a single vector

    Returns:
        Tuple (v, cap_weight) with cap_weight = (1 - cos half_angle)/2

    Raises:
        BadAngle: if any half angle is outside (0, pi]
    """
    axis = np.asarray(axis, dtype=float)
    half_angle = np.asarray(half_angle, dtype=float)
    if np.any(~(half_angle > 0.0)) or np.any(half_angle > np.pi):
        raise BadAngle(f"half angle must lie in (0, pi], got {half_angle}")

    single = axis.ndim == 1 and size is None
    if axis.ndim == 2:
        n = len(axis)
    else:
        n = 1 if size is None else size
        axis = np.broadcast_to(axis, (n, 3))
    half_angle = np.broadcast_to(half_angle, (n,))

    # 1 - cos(alpha), accurate for small caps
    cap = 2.0 * np.sin(0.5 * half_angle) ** 2
    z = 1.0 - cap * rng.random(n)
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    first, second = orthonormal_basis(axis)
    v = (
        z[:, None] * axis
        + (rho * np.cos(phi))[:, None] * first
        + (rho * np.sin(phi))[:, None] * second
    )
    v = v / norm(v)[:, None]
    weight = 0.5 * cap
    if single:
        return v[0], float(weight[0])
    return v, weight


def cross_decomposition(u: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Split the pair (u, v) into w = u x v / |u x v| and theta = |u x v|.

    Raises:
        Parallel: if |u x v| < 1e-12 for any pair
    """
    c = cross(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
    theta = norm(c)
    if np.any(theta < PARALLEL_TOL):
        raise Parallel("u and v are parallel")
    w = c / np.expand_dims(theta, -1)
    return w, theta


def theta_cdf(t) -> np.ndarray:
    """CDF 1 - sqrt(1 - t^2) of |u x v| for independent uniform u, v."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    return 1.0 - np.sqrt(1.0 - t * t)


def sphere_uniformity_chi2(vectors: np.ndarray, n_bins: int = 48) -> Tuple[float, float]:
    """Chi-square statistic and p-value of binned directions against Uni(S^2)."""
    counts = np.bincount(equal_area_bins(vectors, n_bins), minlength=n_bins)
    result = stats.chisquare(counts)
    return float(result.statistic), float(result.pvalue)


# Lambda = Uni(S^2) x Leb(R+) x Uni(S^2)

LAMBDA_MODES = ("grid", "importance")


@dataclass
class LambdaStratum:
    """
    Flight-time stratum of the lambda measure.

    Grid strata have a scalar node h with its trapezoidal weight; the
    importance stratum is columnar, with one h and weight per draw. The
    (u, v) pairs carry the cap weight of the backscatter cone v was drawn
    from, so a lambda mass is estimated as the weighted mean of
    cap_weight * indicator.
    """

    h: np.ndarray
    weight: np.ndarray
    u: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    v: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    cap_weight: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def columnar(self) -> bool:
        return np.ndim(self.h) == 1

    def h_per_draw(self) -> np.ndarray:
        return self.h if self.columnar else np.full(len(self.cap_weight), float(self.h))


def proposal_mass(h_lo: float, h_hi: float) -> float:
    """Integral of min(1, (2/h)^2) over (h_lo, h_hi]; h_hi may be inf."""
    flat = max(0.0, min(h_hi, 2.0) - h_lo)
    knee = max(h_lo, 2.0)
    tail = 4.0 * (1.0 / knee - 1.0 / h_hi) if h_hi > knee else 0.0
    return flat + tail


def proposal_density(h, h_lo: float, h_hi: float) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    return np.minimum(1.0, (2.0 / h) ** 2) / proposal_mass(h_lo, h_hi)


def sample_proposal(rng: np.random.Generator, h_lo: float, h_hi: float, size: int) -> np.ndarray:
    """Inverse-CDF draws from the normalized min(1, (2/h)^2) density."""
    total = proposal_mass(h_lo, h_hi)
    flat = max(0.0, min(h_hi, 2.0) - h_lo)
    knee = max(h_lo, 2.0)
    m = (1.0 - rng.random(size)) * total
    tail_part = np.maximum(m - flat, 0.0)
    with np.errstate(divide="ignore"):
        h_tail = 1.0 / (1.0 / knee - tail_part / 4.0)
    return np.where(m <= flat, h_lo + m, np.minimum(h_tail, h_hi))


def lambda_tail_bound(h_max: float) -> float:
    """Upper bound 1/h_max on the lambda mass of the backscatter cone above h_max (h_max >= 2)."""
    if math.isinf(h_max):
        return 0.0
    return 1.0 / h_max if h_max >= 2.0 else float("inf")


def cone_pairs(rng: np.random.Generator, h: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """u uniform and v uniform on the backscatter cone of half angle min(pi, 2/h)."""
    h = np.asarray(h, dtype=float)
    u = sample_unit_sphere(rng, len(h))
    v, cap = sample_cone(rng, -u, np.minimum(np.pi, 2.0 / h))
    return u, np.atleast_2d(v), np.atleast_1d(cap)


def lambda_strata(
    h_min: float,
    h_max: float,
    mode: str = "importance",
    n: int = 1000,
    rng: Optional[np.random.Generator] = None,
    per_stratum: int = 0,
) -> List[LambdaStratum]:
    """
    Discretize lambda over the flight-time range (h_min, h_max].

    Args:
        h_min: Lower end, > 0
        h_max: Upper end, may be inf in importance mode
        mode: "grid" for log-spaced trapezoidal nodes, "importance" for
            draws from the min(1, (2/h)^2) proposal with weight 1/density
        n: Number of grid nodes or importance draws
        rng: Generator; required for importance mode and for grid pairs
        per_stratum: (u, v) pairs per grid node

    Returns:
        List of LambdaStratum (a single columnar stratum in importance mode)

    Raises:
        BadRange: if not 0 < h_min < h_max, or an infinite grid range
    """
    if not (0.0 < h_min < h_max):
        raise BadRange(f"need 0 < h_min < h_max, got ({h_min}, {h_max})")
    if mode not in LAMBDA_MODES:
        raise ValueError(f"unknown lambda mode {mode!r}, expected one of {LAMBDA_MODES}")

    if mode == "grid":
        if math.isinf(h_max):
            raise BadRange("grid mode needs a finite h_max")
        if n < 2:
            raise BadRange(f"grid mode needs at least 2 nodes, got {n}")
        nodes = np.geomspace(h_min, h_max, n)
        gaps = np.diff(nodes)
        weights = np.zeros(n)
        weights[:-1] += 0.5 * gaps
        weights[1:] += 0.5 * gaps
        strata = []
        for h, w in zip(nodes, weights):
            stratum = LambdaStratum(h=np.float64(h), weight=np.float64(w))
            if rng is not None and per_stratum > 0:
                stratum.u, stratum.v, stratum.cap_weight = cone_pairs(rng, np.full(per_stratum, h))
            strata.append(stratum)
        return strata

    if rng is None:
        raise ValueError("importance mode needs a random generator")
    h = sample_proposal(rng, h_min, h_max, n)
    weight = 1.0 / proposal_density(h, h_min, h_max)
    u, v, cap = cone_pairs(rng, h)
    return [LambdaStratum(h=h, weight=weight, u=u, v=v, cap_weight=cap)]


def lambda_integrate(strata: List[LambdaStratum], integrand) -> float:
    """Quadrature of integrand(h) over grid strata."""
    return float(sum(float(s.weight) * float(integrand(float(s.h))) for s in strata))
