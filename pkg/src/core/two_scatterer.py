"""
Two-Scatterer Bounce Process

Builds the two obstacles of a recollision event, simulates the bounce
sequence between them and checks the dispersive inequalities pointwise.

Coordinates: the tracer arrives along e = (1, 0, 0), hits B_r(a) at the
origin at time 0 and leaves with velocity u, hits B_r(b) at xi*u at time xi
and leaves with velocity v. Collision indices follow the usual convention:
tau_1 = 0, tau_2 = xi, w_0 = e, w_k is the velocity after collision k.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple
import math
import logging

import numpy as np
import pandas as pd

from .errors import (
    CollinearFrame,
    DegenerateEvent,
    MechanicallyInconsistent,
    PreconditionViolated,
)
from .geom3 import (
    E1,
    INSIDE_TOL,
    UNIT_TOL,
    angle_between,
    cross,
    dot,
    first_hit_times,
    half_line_distance,
    mirror,
    norm,
    point_line_distance,
    unit,
)

logger = logging.getLogger(__name__)

N_MAX = 10_000
DEGENERATE_TOL = 1e-12
MARGIN_TOL = 1e-9
FRAME_TOL = 1e-10

SHADOWING_MODES = ("line", "half_line")
RECOLLISION_MODES = ("ray", "line")
PRIME_AXES = ("backscatter", "literal")


@dataclass(frozen=True)
class RecollisionEvent:
    """The triple (u, xi, v) with obstacle radius r."""

    u: np.ndarray
    xi: float
    v: np.ndarray
    r: float = 1.0

    def __post_init__(self):
        if not self.xi > 0.0:
            raise ValueError(f"xi must be positive, got {self.xi}")
        if not self.r > 0.0:
            raise ValueError(f"r must be positive, got {self.r}")
        object.__setattr__(self, "u", unit(self.u))
        object.__setattr__(self, "v", unit(self.v))
        object.__setattr__(self, "xi", float(self.xi))
        object.__setattr__(self, "r", float(self.r))

    @property
    def start(self) -> np.ndarray:
        """Position of the second collision, xi * u."""
        return self.xi * self.u

    def to_dict(self) -> Dict[str, object]:
        return {"u": self.u.tolist(), "xi": self.xi, "v": self.v.tolist(), "r": self.r}


def centers_batch(
    u: np.ndarray, xi: np.ndarray, v: np.ndarray, r
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Obstacle centers for one event or a batch.

    Returns:
        Tuple (a, b, degenerate) where degenerate flags u = e or u = v
    """
    e_minus_u = E1 - u
    u_minus_v = u - v
    len_eu = norm(e_minus_u)
    len_uv = norm(u_minus_v)
    degenerate = (len_eu < DEGENERATE_TOL) | (len_uv < DEGENERATE_TOL)
    safe_eu = np.where(degenerate, 1.0, len_eu)
    safe_uv = np.where(degenerate, 1.0, len_uv)
    r_col = np.expand_dims(np.asarray(r, dtype=float), -1)
    xi_col = np.expand_dims(np.asarray(xi, dtype=float), -1)
    a = r_col * e_minus_u / np.expand_dims(safe_eu, -1)
    b = xi_col * u + r_col * u_minus_v / np.expand_dims(safe_uv, -1)
    return a, b, degenerate


def build_centers(event: RecollisionEvent) -> Tuple[np.ndarray, np.ndarray]:
    """
    Centers a = r(e-u)/|e-u| and b = xi*u + r(u-v)/|u-v|.

    Raises:
        DegenerateEvent: if u = e or u = v within 1e-12
    """
    a, b, degenerate = centers_batch(event.u, event.xi, event.v, event.r)
    if bool(degenerate):
        raise DegenerateEvent(f"centers undefined for u={event.u.tolist()}, v={event.v.tolist()}")
    return a, b


def _start_inconsistent(a, b, start, r) -> np.ndarray:
    return (norm(b) < r - INSIDE_TOL) | (norm(start - a) < r - INSIDE_TOL)


def _advance(pos, vel, centers, th):
    """Fly for th, then reflect off the sphere around centers. Shared by both simulators."""
    pos = pos + np.expand_dims(th, -1) * vel
    offset = pos - centers
    normal = offset / np.expand_dims(norm(offset), -1)
    return pos, mirror(vel, normal)


@dataclass
class BounceTrace:
    """Mechanical record of one bounce sequence."""

    event: RecollisionEvent
    a: np.ndarray
    b: np.ndarray
    tau: np.ndarray
    w: np.ndarray
    points: np.ndarray
    sphere_ids: List[str]
    truncated: bool = False

    @property
    def n_collisions(self) -> int:
        return len(self.tau)

    @property
    def beta(self) -> float:
        """Trapping time, the time of the last collision."""
        return float(self.tau[-1])

    @property
    def w_exit(self) -> np.ndarray:
        return self.w[-1]

    def time(self, k: int) -> float:
        """tau_k for 1 <= k <= N."""
        return float(self.tau[k - 1])

    def position(self, k: int) -> np.ndarray:
        """Collision position for 1 <= k <= N."""
        return self.points[k - 1]

    def velocity(self, k: int) -> np.ndarray:
        """w_k for 0 <= k <= N."""
        return self.w[k]

    def center(self, k: int) -> np.ndarray:
        return self.a if self.sphere_ids[k - 1] == "a" else self.b

    def flight_durations(self) -> np.ndarray:
        """T_k = tau_k - tau_{k-1} for 2 <= k <= N."""
        return np.diff(self.tau)

    def flights(self) -> np.ndarray:
        """Displacements between consecutive collisions, T_k * w_{k-1}."""
        return np.diff(self.points, axis=0)

    def impact_normals(self) -> np.ndarray:
        """Unit outward normals V_k at every collision."""
        centers = np.array([self.center(k) for k in range(1, self.n_collisions + 1)])
        return (self.points - centers) / self.event.r

    def to_dataframe(self) -> pd.DataFrame:
        """One row per collision with the outgoing velocity."""
        k = np.arange(1, self.n_collisions + 1)
        return pd.DataFrame({
            "k": k,
            "tau": self.tau,
            "x": self.points[:, 0],
            "y": self.points[:, 1],
            "z": self.points[:, 2],
            "wx": self.w[1:, 0],
            "wy": self.w[1:, 1],
            "wz": self.w[1:, 2],
            "sphere_id": self.sphere_ids,
        })


def simulate_bounce(event: RecollisionEvent, n_max: int = N_MAX) -> BounceTrace:
    """
    Run the bounce process from xi*u with velocity v at time xi.

    Args:
        event: Recollision event
        n_max: Collision cap; reaching it sets the truncated flag

    Returns:
        BounceTrace with N >= 2 collisions

    Raises:
        DegenerateEvent: if the centers are undefined
        MechanicallyInconsistent: if a start point is strictly inside the other obstacle
    """
    if n_max < 3:
        raise ValueError(f"n_max must be >= 3, got {n_max}")
    a, b = build_centers(event)
    r = event.r
    start = event.xi * event.u
    if bool(_start_inconsistent(a, b, start, r)):
        raise MechanicallyInconsistent(f"inconsistent start state for event {event.to_dict()}")

    tau = [0.0, event.xi]
    w = [E1.copy(), event.u, event.v]
    points = [np.zeros(3), start]
    sphere_ids = ["a", "b"]

    pos, vel, t = start, event.v, event.xi
    target = "a"
    truncated = False
    while True:
        if len(tau) >= n_max:
            truncated = True
            logger.debug(f"bounce truncated at {n_max} collisions for event {event.to_dict()}")
            break
        center = a if target == "a" else b
        th, inside = first_hit_times(pos, vel, center, r, 0.0)
        if bool(inside):
            raise MechanicallyInconsistent(f"trajectory entered obstacle {target} at {pos.tolist()}")
        th = float(th)
        if math.isnan(th):
            break
        pos, vel = _advance(pos, vel, center, th)
        t = t + th
        tau.append(t)
        w.append(vel)
        points.append(pos)
        sphere_ids.append(target)
        target = "b" if target == "a" else "a"

    return BounceTrace(
        event=event,
        a=a,
        b=b,
        tau=np.array(tau),
        w=np.array(w),
        points=np.array(points),
        sphere_ids=sphere_ids,
        truncated=truncated,
    )


@dataclass
class BounceBatch:
    """Summary observables of a batch of bounce sequences."""

    n_collisions: np.ndarray
    beta: np.ndarray
    w_exit: np.ndarray
    truncated: np.ndarray
    degenerate: np.ndarray
    inconsistent: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return ~(self.degenerate | self.inconsistent)

    @property
    def recollided(self) -> np.ndarray:
        return self.valid & (self.n_collisions >= 3)

    @property
    def usable(self) -> np.ndarray:
        """Valid and not truncated."""
        return self.valid & ~self.truncated

    def counts(self) -> Dict[str, int]:
        return {
            "events": int(len(self.n_collisions)),
            "degenerate": int(self.degenerate.sum()),
            "inconsistent": int(self.inconsistent.sum()),
            "truncated": int(self.truncated.sum()),
            "recollisions": int(self.recollided.sum()),
        }


def simulate_bounce_batch(
    u: np.ndarray,
    xi: np.ndarray,
    v: np.ndarray,
    r=1.0,
    n_max: int = N_MAX,
) -> BounceBatch:
    """
    Vectorized bounce process over a batch of events.

    u and v are normalized exactly as RecollisionEvent does and every step goes
    through the same _advance kernel as simulate_bounce, so N, beta and w_exit
    agree bitwise with the scalar simulator. Degenerate and inconsistent events
    are flagged instead of raising and keep N = 2.

    Args:
        u: (n, 3) velocities after the first collision
        xi: (n,) flight times
        v: (n, 3) velocities after the second collision
        r: Radius, scalar or (n,)
        n_max: Collision cap

    Returns:
        BounceBatch
    """
    u = unit(np.atleast_2d(np.asarray(u, dtype=float)))
    v = unit(np.atleast_2d(np.asarray(v, dtype=float)))
    n = len(u)
    xi = np.broadcast_to(np.asarray(xi, dtype=float), (n,)).copy()
    r = np.broadcast_to(np.asarray(r, dtype=float), (n,)).copy()

    a, b, degenerate = centers_batch(u, xi, v, r)
    start = np.expand_dims(xi, -1) * u
    inconsistent = _start_inconsistent(a, b, start, r) & ~degenerate

    n_collisions = np.full(n, 2, dtype=np.int64)
    beta = xi.copy()
    w_exit = v.copy()
    truncated = np.zeros(n, dtype=bool)

    active = np.flatnonzero(~(degenerate | inconsistent))
    pos = start[active]
    vel = v[active]
    t = xi[active]
    target_a = np.ones(len(active), dtype=bool)
    count = 2
    while len(active):
        if count >= n_max:
            truncated[active] = True
            logger.debug(f"{len(active)} bounce sequences truncated at {n_max} collisions")
            break
        centers = np.where(target_a[:, None], a[active], b[active])
        th, _ = first_hit_times(pos, vel, centers, r[active], 0.0)
        hit = ~np.isnan(th)
        if not hit.all():
            active, pos, vel, t = active[hit], pos[hit], vel[hit], t[hit]
            target_a, centers, th = target_a[hit], centers[hit], th[hit]
        pos, vel = _advance(pos, vel, centers, th)
        t = t + th
        count += 1
        n_collisions[active] = count
        beta[active] = t
        w_exit[active] = vel
        target_a = ~target_a

    return BounceBatch(
        n_collisions=n_collisions,
        beta=beta,
        w_exit=w_exit,
        truncated=truncated,
        degenerate=degenerate,
        inconsistent=inconsistent,
    )


# Classifiers

def classify_shadowing(event: RecollisionEvent, mode: str = "line") -> bool:
    """
    Whether B_r(b) blocks the incoming path.

    mode "line" tests the full line {b + t e}; "half_line" restricts to the
    incoming half line {t e : t <= 0}.
    """
    _, b = build_centers(event)
    if mode == "line":
        distance = point_line_distance(b, E1)
    elif mode == "half_line":
        distance = half_line_distance(b, E1)
    else:
        raise ValueError(f"unknown shadowing mode {mode!r}, expected one of {SHADOWING_MODES}")
    return bool(distance < event.r)


def classify_recollision(event: RecollisionEvent, mode: str = "ray") -> bool:
    """
    Whether the exit path from xi*u along v enters B_r(a).

    mode "ray" is the forward ray (agrees with simulate_bounce N >= 3);
    "line" uses the full line through xi*u.
    """
    a, b = build_centers(event)
    start = event.xi * event.u
    if mode == "ray":
        if bool(_start_inconsistent(a, b, start, event.r)):
            raise MechanicallyInconsistent(f"inconsistent start state for event {event.to_dict()}")
        th, _ = first_hit_times(start, event.v, a, event.r, 0.0)
        return not math.isnan(float(th))
    if mode == "line":
        return bool(point_line_distance(a - start, event.v) < event.r)
    raise ValueError(f"unknown recollision mode {mode!r}, expected one of {RECOLLISION_MODES}")


def prime_half_angle(xi, r) -> np.ndarray:
    """Half angle min(pi, 2r/xi) of the cone containing every recollision."""
    return np.minimum(np.pi, 2.0 * np.asarray(r, dtype=float) / np.asarray(xi, dtype=float))


def classify_prime(event: RecollisionEvent, axis: str = "backscatter") -> bool:
    """
    Cone test for the enlarged recollision set.

    axis "backscatter" tests angle(-u, v) <= 2r/xi, which contains every
    recollision; "literal" tests angle(u, v) <= 2r/xi.
    """
    if axis == "backscatter":
        angle = angle_between(-event.u, event.v)
    elif axis == "literal":
        angle = angle_between(event.u, event.v)
    else:
        raise ValueError(f"unknown cone axis {axis!r}, expected one of {PRIME_AXES}")
    return bool(angle <= prime_half_angle(event.xi, event.r))


def classify_batch(u: np.ndarray, xi: np.ndarray, v: np.ndarray, r=1.0) -> Dict[str, np.ndarray]:
    """All classifier readings for a batch, keyed by '<set>_<mode>'."""
    u = np.atleast_2d(u)
    v = np.atleast_2d(v)
    a, b, degenerate = centers_batch(u, xi, v, r)
    xi = np.asarray(xi, dtype=float)
    r = np.asarray(r, dtype=float)
    start = np.expand_dims(np.broadcast_to(xi, (len(u),)), -1) * u
    th, _ = first_hit_times(start, v, a, r, 0.0)
    half = prime_half_angle(xi, r)
    return {
        "degenerate": degenerate,
        "inconsistent": _start_inconsistent(a, b, start, r) & ~degenerate,
        "shadowing_line": point_line_distance(b, E1) < r,
        "shadowing_half_line": half_line_distance(b, E1) < r,
        "recollision_ray": ~np.isnan(th),
        "recollision_line": point_line_distance(a - start, v) < r,
        "prime_backscatter": angle_between(-u, v) <= half,
        "prime_literal": angle_between(u, v) <= half,
    }


def rescale(event: RecollisionEvent, factor: float) -> RecollisionEvent:
    """Map (u, xi, v, r) to (u, xi/factor, v, r/factor)."""
    if not factor > 0.0:
        raise ValueError(f"rescale factor must be positive, got {factor}")
    return RecollisionEvent(u=event.u, xi=event.xi / factor, v=event.v, r=event.r / factor)


def exit_angle(trace: BounceTrace) -> float:
    """Angle between -e and the exit velocity."""
    return float(angle_between(-E1, trace.w_exit))


# Normal frame and inequality checks

@dataclass
class NormalFrame:
    """Plane normal n with n_k = w_k.n and h_k = Z(tau_k).n (h_0 undefined, NaN)."""

    n: np.ndarray
    n_seq: np.ndarray
    h_seq: np.ndarray


def plane_normal(a: np.ndarray, b: np.ndarray, u: np.ndarray) -> np.ndarray:
    """
    Unit normal of the plane through 0, a, b, oriented so that u.n >= 0.

    Raises:
        CollinearFrame: if |a x b| <= 1e-10 |a||b|
    """
    axb = cross(a, b)
    length = float(norm(axb))
    if length <= FRAME_TOL * float(norm(a)) * float(norm(b)):
        raise CollinearFrame(f"0, a={a.tolist()}, b={b.tolist()} are collinear")
    n = axb / length
    return -n if float(dot(u, n)) < 0.0 else n


def normal_frame(trace: BounceTrace) -> NormalFrame:
    n = plane_normal(trace.a, trace.b, trace.event.u)
    n_seq = trace.w @ n
    h_seq = np.concatenate([[np.nan], trace.points @ n])
    return NormalFrame(n=n, n_seq=n_seq, h_seq=h_seq)


@dataclass
class InequalityReport:
    """
    Margins (left - right) of inequality instances.

    Checks named in `asserted` count as violations when a margin falls
    below -tolerance; the others are diagnostics.
    """

    margins: Dict[str, np.ndarray] = field(default_factory=dict)
    asserted: List[str] = field(default_factory=list)
    tolerance: float = MARGIN_TOL

    def add(self, name: str, values, asserted: bool) -> None:
        self.margins[name] = np.atleast_1d(np.asarray(values, dtype=float))
        if asserted:
            self.asserted.append(name)

    def violations(self) -> Dict[str, int]:
        return {name: int(np.sum(m < -self.tolerance)) for name, m in self.margins.items()}

    def min_margin(self, name: str) -> float:
        m = self.margins.get(name)
        return float(np.min(m)) if m is not None and m.size else float("inf")

    @property
    def passed(self) -> bool:
        counts = self.violations()
        return all(counts[name] == 0 for name in self.asserted)

    @property
    def empty(self) -> bool:
        return all(m.size == 0 for m in self.margins.values())

    def to_dataframe(self) -> pd.DataFrame:
        rows = []
        for name, values in self.margins.items():
            for index, margin in enumerate(values):
                rows.append({
                    "check": name,
                    "index": index,
                    "margin": float(margin),
                    "asserted": name in self.asserted,
                })
        return pd.DataFrame(rows, columns=["check", "index", "margin", "asserted"])


def _triple(event: RecollisionEvent) -> float:
    return abs(float(dot(E1, cross(event.u, event.v))))


def check_dispersive(trace: BounceTrace, frame: NormalFrame) -> InequalityReport:
    """
    Margins of the dispersive recursions for 1 <= k <= N-1.

    Checks:
        h_step:          h_{k+1} - h_k - xi n_k / 2                (asserted)
        n_step_proof:    n_{k+1} - n_k - h_k / 2, k <= N-2         (asserted)
        n_step_last:     same at k = N-1, where the last hit may be grazing
        n_step_display:  n_{k+1} - n_k - h_{k+1} / 2
        chained:         n_l - (xi/4)^(l-2) |e.(u x v)| for 2 <= l <= N
        chained_n3:      n_3 - (1 + xi/2) |e.(u x v)| / 2
        chained_n4:      n_4 - xi^2 |e.(u x v)| / 16

    Raises:
        PreconditionViolated: if r != 1, xi < 10 or n_1 < 0
    """
    event = trace.event
    if abs(event.r - 1.0) > UNIT_TOL or event.xi < 10.0:
        raise PreconditionViolated(f"dispersive checks need r = 1 and xi >= 10, got r={event.r}, xi={event.xi}")
    if frame.n_seq[1] < 0.0:
        raise PreconditionViolated(f"n_1 = {frame.n_seq[1]} < 0")

    report = InequalityReport()
    big_n = trace.n_collisions
    if big_n < 3:
        return report

    n_k, h_k, xi = frame.n_seq, frame.h_seq, event.xi
    ks = np.arange(1, big_n)
    proof = n_k[ks + 1] - n_k[ks] - 0.5 * h_k[ks]
    report.add("h_step", h_k[ks + 1] - h_k[ks] - 0.5 * xi * n_k[ks], asserted=True)
    report.add("n_step_proof", proof[:-1], asserted=True)
    report.add("n_step_last", proof[-1:], asserted=False)
    report.add("n_step_display", n_k[ks + 1] - n_k[ks] - 0.5 * h_k[ks + 1], asserted=False)

    triple = _triple(event)
    ells = np.arange(2, big_n + 1)
    report.add("chained", n_k[ells] - (xi / 4.0) ** (ells - 2) * triple, asserted=False)
    report.add("chained_n3", n_k[3] - 0.5 * (1.0 + 0.5 * xi) * triple, asserted=False)
    if big_n >= 4:
        report.add("chained_n4", n_k[4] - xi * xi / 16.0 * triple, asserted=False)
    return report


def check_lemma_basic(trace: BounceTrace, frame: NormalFrame) -> InequalityReport:
    """
    Monotonicity, angle and vertical bounds plus trapping-time diagnostics.

    Asserted: n_k - n_{k-1} >= 0 (1 <= k <= N, only for N >= 3);
    angle(-e, w_j) - (pi/2 - angle(n, w_j)) for all j;
    |n_2| - |e.(u x v)|/2.
    Diagnostic: xi + 1 - beta, xi + 1/|n_1| - beta, 3 xi - beta (N = 3,
    xi >= 10) and 2 N xi - beta.
    """
    event = trace.event
    n_k = frame.n_seq
    report = InequalityReport()
    big_n = trace.n_collisions

    if big_n >= 3:
        report.add("monotone", np.diff(n_k), asserted=True)
    angles = angle_between(-E1, trace.w) - (0.5 * np.pi - angle_between(frame.n, trace.w))
    report.add("angle", angles, asserted=True)
    report.add("vertical", abs(n_k[2]) - 0.5 * _triple(event), asserted=True)

    beta = trace.beta
    report.add("beta_plus_one", event.xi + event.r - beta, asserted=False)
    inverse_n1 = 1.0 / n_k[1] if n_k[1] > 0.0 else float("inf")
    report.add("beta_plus_inverse_n1", event.xi + event.r * inverse_n1 - beta, asserted=False)
    if big_n == 3 and event.xi >= 10.0 * event.r:
        report.add("beta_three_xi", 3.0 * event.xi - beta, asserted=False)
    report.add("beta_two_n_xi", 2.0 * big_n * event.xi - beta, asserted=False)
    return report


def check_exit_formula(trace: BounceTrace) -> float:
    """
    For N = 3, deviation of w_exit from v - 2(v.omega)omega with
    omega the unit normal at the return point on B_r(a).
    """
    if trace.n_collisions != 3:
        raise PreconditionViolated(f"exit formula needs N = 3, got N = {trace.n_collisions}")
    omega = (trace.position(3) - trace.a) / trace.event.r
    v = trace.event.v
    predicted = v - 2.0 * float(dot(v, omega)) * omega
    return float(norm(trace.w_exit - predicted))
