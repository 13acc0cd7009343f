"""
3D Geometry Kernels

Unit vectors, ray-sphere intersection, specular reflection and distances in R^3.

Every function accepts either single vectors of shape (3,) or batches of
shape (n, 3) and broadcasts over the leading axis, so the scalar bounce
simulator and the batched estimators run the same floating-point
operations in the same order.
"""

from dataclasses import dataclass
from typing import Optional, Tuple, Union
import math
import logging

import numpy as np

from .errors import InsideSphere, NonIncoming

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, list, tuple]

UNIT_TOL = 1e-12
INSIDE_TOL = 1e-12
TANGENT_TOL = 1e-14

E1 = np.array([1.0, 0.0, 0.0])


def dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Component-wise dot product over the last axis."""
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product over the last axis."""
    a, b = np.broadcast_arrays(a, b)
    out = np.empty(a.shape, dtype=float)
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def norm(a: np.ndarray) -> np.ndarray:
    return np.sqrt(dot(a, a))


def unit(x: ArrayLike) -> np.ndarray:
    """
    Return x scaled to unit length.

    Args:
        x: Vector or batch of vectors

    Returns:
        Float array of the same shape with unit rows

    Raises:
        ValueError: if any row has zero length
    """
    x = np.asarray(x, dtype=float)
    length = norm(x)
    if np.any(length == 0.0):
        raise ValueError("cannot normalize a zero vector")
    return x / length[..., None] if x.ndim > 1 else x / length


def assert_unit(x: np.ndarray, tol: float = UNIT_TOL) -> None:
    deviation = np.max(np.abs(norm(x) - 1.0))
    if deviation > tol:
        raise ValueError(f"vector is not unit (deviation {deviation:.3e})")


def angle_between(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Angle in [0, pi] computed as atan2(|x x y|, x . y)."""
    return np.arctan2(norm(cross(x, y)), dot(x, y))


def point_line_distance(p: ArrayLike, d: ArrayLike) -> np.ndarray:
    """
    Distance from p to the line through the origin with unit direction d.

    Args:
        p: Point(s)
        d: Unit direction(s)

    Returns:
        |p - (p.d) d|
    """
    p = np.asarray(p, dtype=float)
    d = np.asarray(d, dtype=float)
    return norm(cross(p, d))


def half_line_distance(p: ArrayLike, d: ArrayLike) -> np.ndarray:
    """Distance from p to the half line {t d : t <= 0}."""
    p = np.asarray(p, dtype=float)
    d = np.asarray(d, dtype=float)
    return np.where(dot(p, d) <= 0.0, norm(cross(p, d)), norm(p))


def segment_distance(p: np.ndarray, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Distance from point p to each segment [starts[i], ends[i]]."""
    seg = ends - starts
    rel = p - starts
    length2 = dot(seg, seg)
    safe = np.where(length2 > 0.0, length2, 1.0)
    t = np.clip(dot(rel, seg) / safe, 0.0, 1.0)
    t = np.where(length2 > 0.0, t, 0.0)
    return norm(rel - t[..., None] * seg)


@dataclass(frozen=True)
class Ray:
    """Half line origin + t * direction, t >= 0."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", unit(self.direction))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Sphere:
    """Hard-sphere obstacle."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        if not self.radius > 0.0:
            raise ValueError(f"sphere radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "radius", float(self.radius))


def sphere_roots(
    origins: np.ndarray,
    directions: np.ndarray,
    centers: np.ndarray,
    radii: Union[float, np.ndarray],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Both roots of |origin + t d - center| = r, broadcast over rows.

    The discriminant is formed as r^2 - d_perp^2 from the perpendicular
    offset, and the roots come from q = -(b + sign(b) sqrt(disc)) and c/q,
    so no near-equal quantities are subtracted.

    Returns:
        Tuple (t_lo, t_hi, crossing, inside): crossing is False for misses and
        grazing contacts (disc <= 1e-14 r^2), where the roots are meaningless;
        inside flags origins strictly inside (distance < radius - 1e-12)
    """
    m = origins - centers
    radii = np.asarray(radii, dtype=float)
    b = dot(directions, m)
    dist = norm(m)
    inside = dist < radii - INSIDE_TOL

    perp = norm(m - np.expand_dims(b, -1) * directions)
    disc = (radii - perp) * (radii + perp)
    c = (dist - radii) * (dist + radii)

    with np.errstate(invalid="ignore", divide="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        q = -(b + np.copysign(sq, b))
        t_a = q
        t_b = c / q
        t_lo = np.minimum(t_a, t_b)
        t_hi = np.maximum(t_a, t_b)
    crossing = (disc > TANGENT_TOL * radii * radii) & (q != 0.0)
    return t_lo, t_hi, crossing, inside


def first_hit_times(
    origins: np.ndarray,
    directions: np.ndarray,
    centers: np.ndarray,
    radii: Union[float, np.ndarray],
    t_min: float = 0.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Entering intersection times of rays with spheres, broadcast over rows.

    Only the entering root counts, so a ray leaving a sphere it touches never
    hits it again. Grazing contacts count as misses.

    Args:
        origins: Ray origins
        directions: Unit ray directions
        centers: Sphere centers
        radii: Sphere radii
        t_min: Only entering roots strictly greater than t_min are returned

    Returns:
        Tuple (t, inside): t is NaN where there is no hit; inside flags
        origins strictly inside their sphere (distance < radius - 1e-12)
    """
    t_lo, _, crossing, inside = sphere_roots(origins, directions, centers, radii)
    hit = crossing & (t_lo > t_min) & ~inside
    return np.where(hit, t_lo, np.nan), inside


def ray_sphere_first_hit(ray: Ray, sphere: Sphere, t_min: float = 0.0) -> Optional[float]:
    """
    Smallest time t > t_min at which the ray is on the sphere surface.

    This is the entering root, unless the ray is already inside the sphere at
    t_min (entered in [0, t_min]); then it is the exiting root. A ray leaving
    a surface point has its exiting root within rounding of 0, so roots within
    1e-12 r of t_min do not count.

    Args:
        ray: Ray with unit direction
        sphere: Obstacle
        t_min: Lower time bound (>= 0)

    Returns:
        Hit time, or None for a miss or a tangential contact

    Raises:
        InsideSphere: if the ray origin is strictly inside the sphere
    """
    if t_min < 0.0:
        raise ValueError(f"t_min must be >= 0, got {t_min}")
    t_lo, t_hi, crossing, inside = sphere_roots(ray.origin, ray.direction, sphere.center, sphere.radius)
    if bool(inside):
        raise InsideSphere(
            f"ray origin {ray.origin.tolist()} is inside sphere at {sphere.center.tolist()} "
            f"(radius {sphere.radius})"
        )
    if not bool(crossing):
        return None
    if float(t_lo) > t_min:
        return float(t_lo)
    if float(t_hi) > t_min + INSIDE_TOL * sphere.radius:
        return float(t_hi)
    return None


def mirror(w: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Specular reflection w - 2 (V.w) V, renormalized, without checks."""
    out = w - (2.0 * dot(V, w))[..., None] * V if w.ndim > 1 else w - 2.0 * dot(V, w) * V
    return out / norm(out)[..., None] if out.ndim > 1 else out / norm(out)


def reflect(w: ArrayLike, V: ArrayLike) -> np.ndarray:
    """
    Elastic collision rule w' = w - 2 (V.w) V.

    Args:
        w: Incoming unit velocity
        V: Unit outward normal at the contact point

    Returns:
        Outgoing unit velocity

    Raises:
        NonIncoming: if V.w >= 0
    """
    w = np.asarray(w, dtype=float)
    V = np.asarray(V, dtype=float)
    assert_unit(V)
    if float(dot(V, w)) >= 0.0:
        raise NonIncoming(f"normal {V.tolist()} does not oppose velocity {w.tolist()}")
    return mirror(w, V)


def reflection_matrix(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """
    Householder matrix H with H @ source = target for unit vectors.

    H is symmetric and its own inverse; the identity is returned when the
    vectors already coincide.
    """
    k = source - target
    length = float(norm(k))
    if length < UNIT_TOL:
        return np.eye(3)
    k = k / length
    return np.eye(3) - 2.0 * np.outer(k, k)


def orthonormal_basis(axis: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing axis (batch aware) to a right-handed frame."""
    axis = np.asarray(axis, dtype=float)
    helper = np.where(
        (np.abs(axis[..., 0]) < 0.9)[..., None],
        np.array([1.0, 0.0, 0.0]),
        np.array([0.0, 1.0, 0.0]),
    )
    first = cross(axis, helper)
    first = first / np.expand_dims(norm(first), -1)
    second = cross(axis, first)
    return first, second


def band_layout(n_bins: int) -> Tuple[int, int]:
    """Split n_bins into (bands in cos theta) x (azimuth sectors)."""
    if n_bins < 2:
        raise ValueError(f"need at least 2 bins, got {n_bins}")
    bands = max(k for k in range(1, int(math.isqrt(n_bins // 2)) + 1) if n_bins % k == 0)
    return bands, n_bins // bands


def equal_area_bins(vectors: np.ndarray, n_bins: int) -> np.ndarray:
    """
    Index of the equal-area sphere cell containing each unit vector.

    Cells are bands of equal height in z (equal area by Archimedes) times
    equal azimuth sectors.
    """
    bands, sectors = band_layout(n_bins)
    vectors = np.atleast_2d(vectors)
    band = np.clip(np.floor((vectors[:, 2] + 1.0) * 0.5 * bands), 0, bands - 1).astype(np.int64)
    phi = np.arctan2(vectors[:, 1], vectors[:, 0])
    sector = np.clip(np.floor((phi + np.pi) / (2.0 * np.pi) * sectors), 0, sectors - 1).astype(np.int64)
    return band * sectors + sector
