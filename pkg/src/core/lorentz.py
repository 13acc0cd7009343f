"""
Lorentz Gas Processes

The exploration process X, the Markov flight process Y and the memory process Z, coupled on shared draws.

Every path owns a LegSource: leg j of each process reads the same flight
length xi_j and outgoing direction v_j, and the processes differ only in
what they do with the draw. Y flies xi_j and turns to v_j. X reveals the
Poisson environment on the fly: the draw proposes a fresh scatterer whose
center is implied by the reflection that sends the particle to v_j, and
the proposal is thinned away when the center would lie within eps of the
path already travelled. Z remembers only the last scatterer and resolves
shadowing and direct recollisions against it.

The scatterer intensity defaults to 1/(pi eps^2), making the fresh-collision
rate exactly 1.
"""

from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple
import math
import logging

import numpy as np
import pandas as pd
from scipy import stats

from .errors import CapsuleInconsistency, ConfigError
from .geom3 import E1, dot, first_hit_times, mirror, norm, orthonormal_basis, reflection_matrix, segment_distance
from .parallel import run_work_items
from .sampling import RngStream, sample_unit_sphere, sphere_uniformity_chi2
from .two_scatterer import (
    DEGENERATE_TOL,
    N_MAX,
    RECOLLISION_MODES,
    SHADOWING_MODES,
    RecollisionEvent,
    centers_batch,
    classify_batch,
    classify_recollision,
    classify_shadowing,
    simulate_bounce,
    _start_inconsistent,
)

logger = logging.getLogger(__name__)

PROCESSES = ("X", "Y", "Z")
CAPSULE_TOL = 1e-9
LEG_BLOCK = 256


@dataclass
class GasConfig:
    """
    Parameters of a coupled gas run.

    rho defaults to 1/(pi eps^2); the switches turn off thinning and
    placed-scatterer mechanics in X and the classifiers in Z, which makes
    all three processes the same function of the draws.
    """

    eps: float = 0.05
    rho: Optional[float] = None
    horizon: float = 100.0
    seed: int = 0
    n_paths: int = 1000
    thinning: bool = True
    mechanics: bool = True
    classifiers: bool = True
    shadowing_mode: str = "half_line"
    recollision_mode: str = "ray"
    mismatch_tol: float = 1e-9
    n_max: int = N_MAX

    def __post_init__(self):
        if not 0.0 < self.eps < 0.5:
            raise ConfigError(f"eps must lie in (0, 0.5), got {self.eps}")
        if not self.horizon > 0.0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if self.n_paths < 1:
            raise ConfigError(f"n_paths must be positive, got {self.n_paths}")
        if self.shadowing_mode not in SHADOWING_MODES:
            raise ConfigError(f"shadowing_mode must be one of {SHADOWING_MODES}, got {self.shadowing_mode!r}")
        if self.recollision_mode not in RECOLLISION_MODES:
            raise ConfigError(f"recollision_mode must be one of {RECOLLISION_MODES}, got {self.recollision_mode!r}")
        if self.rho is None:
            self.rho = 1.0 / (math.pi * self.eps ** 2)
        if not self.rho > 0.0:
            raise ConfigError(f"rho must be positive, got {self.rho}")

    @property
    def rate(self) -> float:
        """Fresh-collision rate rho * pi * eps^2 per unit path length."""
        rate = self.rho * math.pi * self.eps ** 2
        return 1.0 if math.isclose(rate, 1.0, rel_tol=1e-12) else rate

    def stream(self) -> RngStream:
        return RngStream(seed=self.seed)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "GasConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown gas parameters: {sorted(unknown)}")
        return cls(**data)


class LegSource:
    """
    Shared draws of one path: the initial velocity and (xi_j, v_j) for j >= 1.

    Draws are generated in blocks in a fixed order, so leg j has the same
    value whichever process asks first.
    """

    def __init__(self, stream: RngStream):
        self._rng = stream.generator()
        self.initial_velocity = sample_unit_sphere(self._rng)
        self._xi = np.empty(0)
        self._v = np.empty((0, 3))

    def _extend(self, j: int) -> None:
        while len(self._xi) < j:
            self._xi = np.concatenate([self._xi, self._rng.exponential(size=LEG_BLOCK)])
            self._v = np.concatenate([self._v, sample_unit_sphere(self._rng, LEG_BLOCK)])

    def flight(self, j: int) -> float:
        self._extend(j)
        return float(self._xi[j - 1])

    def direction(self, j: int) -> np.ndarray:
        self._extend(j)
        return self._v[j - 1]

    @property
    def drawn(self) -> int:
        return len(self._xi)


def path_stream(config: GasConfig, path_id: int) -> RngStream:
    return config.stream().substream(path_id)


class _Rows:
    """Growable (n, 3) float buffer."""

    def __init__(self):
        self._data = np.empty((16, 3))
        self.n = 0

    def append(self, row: np.ndarray) -> int:
        if self.n == len(self._data):
            self._data = np.concatenate([self._data, np.empty_like(self._data)])
        self._data[self.n] = row
        self.n += 1
        return self.n - 1

    def view(self) -> np.ndarray:
        return self._data[: self.n]


@dataclass
class Trace:
    """Piecewise-linear path: breakpoint times, positions and outgoing velocities."""

    times: List[float] = field(default_factory=list)
    positions: List[np.ndarray] = field(default_factory=list)
    velocities: List[np.ndarray] = field(default_factory=list)

    def record(self, t: float, position: np.ndarray, velocity: np.ndarray) -> None:
        self.times.append(float(t))
        self.positions.append(np.array(position, dtype=float))
        self.velocities.append(np.array(velocity, dtype=float))

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.array(self.times), np.array(self.positions), np.array(self.velocities)

    @property
    def end_time(self) -> float:
        return self.times[-1]

    def segment_index(self, t_grid) -> np.ndarray:
        times = np.array(self.times)
        return np.clip(np.searchsorted(times, np.asarray(t_grid, dtype=float), side="right") - 1, 0, len(times) - 1)

    def position_at(self, t_grid) -> np.ndarray:
        times, positions, velocities = self.arrays()
        t_grid = np.asarray(t_grid, dtype=float)
        idx = self.segment_index(t_grid)
        return positions[idx] + (t_grid - times[idx])[..., None] * velocities[idx]

    def velocity_at(self, t: float) -> np.ndarray:
        return self.velocities[int(self.segment_index(t))]

    def to_dataframe(self, path_id: int, process: str) -> pd.DataFrame:
        times, positions, _ = self.arrays()
        return pd.DataFrame({
            "path_id": path_id,
            "process": process,
            "t": times,
            "x": positions[:, 0],
            "y": positions[:, 1],
            "z": positions[:, 2],
        })


# Process states

@dataclass
class FlightState:
    """Position, velocity and clock of a process, with its recorded trace."""

    position: np.ndarray
    velocity: np.ndarray
    horizon: float
    time: float = 0.0
    leg: int = 0
    done: bool = False
    trace: Trace = field(default_factory=Trace)

    @classmethod
    def start(cls, source: LegSource, horizon: float, **kwargs):
        state = cls(position=np.zeros(3), velocity=source.initial_velocity.copy(), horizon=horizon, **kwargs)
        state.trace.record(0.0, state.position, state.velocity)
        return state

    def advance(self, dt: float) -> None:
        self.position = self.position + dt * self.velocity
        self.time = self.time + dt

    def finish(self) -> None:
        self.advance(self.horizon - self.time)
        self.time = self.horizon
        self.done = True
        self.trace.record(self.time, self.position, self.velocity)


@dataclass
class ExplorationState(FlightState):
    """
    State of X: placed scatterers and the capsules of the travelled path.

    Capsule k is the segment between breakpoints k and k+1 with radius eps;
    `placed_after[i]` is the number of capsules recorded when center i was
    accepted.
    """

    eps: float = 0.05
    rate: float = 1.0
    remaining: Optional[float] = None
    last_hit: int = -1
    recent: Tuple[int, int] = (-1, -1)
    centers: _Rows = field(default_factory=_Rows)
    starts: _Rows = field(default_factory=_Rows)
    ends: _Rows = field(default_factory=_Rows)
    placed_after: List[int] = field(default_factory=list)
    counts: Dict[str, int] = field(default_factory=dict)
    rejection_times: List[float] = field(default_factory=list)
    indirect_times: List[float] = field(default_factory=list)

    @property
    def placed(self) -> np.ndarray:
        return self.centers.view()

    @property
    def capsules(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.starts.view(), self.ends.view()

    def bump(self, name: str) -> None:
        self.counts[name] = self.counts.get(name, 0) + 1

    def move(self, dt: float) -> None:
        before = self.position
        self.advance(dt)
        self.starts.append(before)
        self.ends.append(self.position)

    def capsule_distance(self, point: np.ndarray, upto: Optional[int] = None) -> float:
        """Distance from point to the first `upto` capsules, with a bounding-box prefilter."""
        starts, ends = self.capsules
        if upto is not None:
            starts, ends = starts[:upto], ends[:upto]
        if len(starts) == 0:
            return math.inf
        lo = np.minimum(starts, ends) - self.eps
        hi = np.maximum(starts, ends) + self.eps
        near = np.all((point >= lo) & (point <= hi), axis=1)
        if not near.any():
            return math.inf
        return float(segment_distance(point, starts[near], ends[near]).min())


@dataclass
class ScheduledHit:
    """A collision of a bounce sequence Z has committed to."""

    point: np.ndarray
    velocity: np.ndarray
    center: np.ndarray


@dataclass
class LegFlag:
    """Classifier readings of one fresh leg of Z."""

    leg: int
    time: float
    shadow: bool = False
    recollision: bool = False
    degenerate: bool = False
    beta: float = float("nan")


@dataclass
class MemoryState(FlightState):
    """State of Z: the last collision (point, incoming velocity, center) and any pending bounces."""

    eps: float = 0.05
    rate: float = 1.0
    remaining: Optional[float] = None
    anchor: Optional[np.ndarray] = None
    incoming: Optional[np.ndarray] = None
    last_center: Optional[np.ndarray] = None
    scheduled: List[ScheduledHit] = field(default_factory=list)
    flags: List[LegFlag] = field(default_factory=list)
    counts: Dict[str, int] = field(default_factory=dict)

    def bump(self, name: str) -> None:
        self.counts[name] = self.counts.get(name, 0) + 1


# Steps

def y_step(state: FlightState, source: LegSource) -> Tuple[float, np.ndarray]:
    """
    One leg of the Markov flight process: fly xi_j ~ Exp(1), then turn to v_j ~ Uni(S^2).

    Returns:
        Tuple (flight_length, new_velocity) of the draw used
    """
    j = state.leg + 1
    xi = source.flight(j)
    v = source.direction(j)
    state.leg = j
    if state.time + xi >= state.horizon:
        state.finish()
        return xi, v
    state.advance(xi)
    state.velocity = v
    state.trace.record(state.time, state.position, state.velocity)
    return xi, v


def _impact_center(q: np.ndarray, incoming: np.ndarray, outgoing: np.ndarray, eps: float) -> Optional[np.ndarray]:
    """Center of the sphere of radius eps reflecting incoming to outgoing at q, None without deflection."""
    diff = outgoing - incoming
    length = float(norm(diff))
    if length < DEGENERATE_TOL:
        return None
    return q - eps * (diff / length)


def _next_fresh(state, source: LegSource) -> float:
    if state.remaining is None:
        state.leg += 1
        xi = source.flight(state.leg)
        state.remaining = xi if state.rate == 1.0 else xi / state.rate
    return state.remaining


def x_step(state: ExplorationState, source: LegSource, config: GasConfig) -> str:
    """
    Advance X to its next event.

    The next event is the earlier of the first hit on a placed scatterer and
    the pending fresh proposal at distance `remaining`. A fresh proposal
    whose implied center is within eps of a recorded capsule is rejected
    and X flies on with the next draw.

    Returns:
        "mechanical", "fresh", "rejection", "degenerate" or "horizon"

    Raises:
        CapsuleInconsistency: if the particle is found inside a placed scatterer
    """
    remaining = _next_fresh(state, source)

    t_det, hit = math.inf, -1
    if config.mechanics and state.centers.n:
        t, inside = first_hit_times(state.position, state.velocity, state.placed, state.eps, 0.0)
        if state.last_hit >= 0:
            t[state.last_hit] = np.nan
            inside[state.last_hit] = False
        if inside.any():
            raise CapsuleInconsistency(
                f"X at t={state.time:.6g} is inside placed scatterer {int(np.flatnonzero(inside)[0])}"
            )
        if not np.all(np.isnan(t)):
            hit = int(np.nanargmin(t))
            t_det = float(t[hit])

    if state.time + min(t_det, remaining) >= state.horizon:
        before = state.position
        state.finish()
        state.starts.append(before)
        state.ends.append(state.position)
        return "horizon"

    if t_det < remaining:
        state.move(t_det)
        center = state.placed[hit]
        offset = state.position - center
        state.velocity = mirror(state.velocity, offset / norm(offset))
        state.remaining = remaining - t_det
        state.last_hit = hit
        state.trace.record(state.time, state.position, state.velocity)
        state.bump("mechanical")
        if hit not in state.recent:
            state.indirect_times.append(state.time)
            state.bump("indirect")
        return "mechanical"

    state.move(remaining)
    state.remaining = None
    v = source.direction(state.leg)
    center = _impact_center(state.position, state.velocity, v, state.eps)
    if center is None:
        state.trace.record(state.time, state.position, state.velocity)
        state.bump("degenerate")
        return "degenerate"

    if config.thinning and state.capsule_distance(center) < state.eps * (1.0 - CAPSULE_TOL):
        state.rejection_times.append(state.time)
        state.trace.record(state.time, state.position, state.velocity)
        state.bump("rejection")
        return "rejection"

    index = state.centers.append(center)
    state.placed_after.append(state.starts.n)
    state.recent = (state.recent[1], index)
    state.last_hit = index
    state.velocity = v
    state.trace.record(state.time, state.position, state.velocity)
    state.bump("fresh")
    return "fresh"


def verify_capsules(state: ExplorationState) -> int:
    """
    Exhaustively check that no center lies strictly inside a capsule recorded before it.

    Returns:
        Number of centers checked

    Raises:
        CapsuleInconsistency: on the first violation
    """
    for i, center in enumerate(state.placed):
        distance = state.capsule_distance(center, upto=state.placed_after[i])
        if distance < state.eps * (1.0 - CAPSULE_TOL):
            raise CapsuleInconsistency(
                f"center {i} at {center.tolist()} is {distance:.3e} from the path recorded before it"
            )
    return state.centers.n


def _plain_turn(state: MemoryState, v: np.ndarray) -> None:
    state.last_center = _impact_center(state.position, state.velocity, v, state.eps)
    state.incoming = state.velocity
    state.anchor = state.position
    state.velocity = v
    state.scheduled = []


def _schedule_bounce(
    state: MemoryState, anchor: np.ndarray, frame: np.ndarray, event: RecollisionEvent, n_max: int
) -> float:
    """Queue collisions 3..N of the bounce, mapped from the frame of the collision at anchor."""
    trace = simulate_bounce(event, n_max)
    state.scheduled = [
        ScheduledHit(
            point=anchor + frame @ trace.position(k),
            velocity=frame @ trace.velocity(k),
            center=anchor + frame @ trace.center(k),
        )
        for k in range(3, trace.n_collisions + 1)
    ]
    return trace.beta


def z_step(state: MemoryState, source: LegSource, config: GasConfig) -> str:
    """
    Advance Z to its next event.

    At a fresh collision the draw is read in the frame of the last
    collision (incoming velocity mapped to e): shadowing leaves the
    velocity unchanged; a direct recollision turns to v_j and schedules
    the bounce against the last scatterer; anything else is a plain turn.

    Returns:
        "bounce", "plain", "shadow", "recollision", "degenerate", "inconsistent" or "horizon"
    """
    remaining = _next_fresh(state, source)
    t_sched = math.inf
    if state.scheduled:
        t_sched = float(dot(state.scheduled[0].point - state.position, state.velocity))

    if state.time + min(t_sched, remaining) >= state.horizon:
        state.finish()
        return "horizon"

    if t_sched < remaining:
        hit = state.scheduled.pop(0)
        state.advance(t_sched)
        state.incoming = state.velocity
        state.anchor = state.position
        state.last_center = hit.center
        state.velocity = hit.velocity
        state.remaining = remaining - t_sched
        state.trace.record(state.time, state.position, state.velocity)
        state.bump("bounce")
        return "bounce"

    state.advance(remaining)
    state.remaining = None
    j = state.leg
    v = source.direction(j)
    flag = LegFlag(leg=j, time=state.time)
    state.flags.append(flag)

    if float(norm(v - state.velocity)) < DEGENERATE_TOL:
        flag.degenerate = True
        kind = "degenerate"
    elif state.anchor is None or not config.classifiers:
        _plain_turn(state, v)
        kind = "plain"
    else:
        frame = reflection_matrix(state.incoming, E1)
        event = RecollisionEvent(
            u=frame @ state.velocity,
            xi=float(norm(state.position - state.anchor)),
            v=frame @ v,
            r=state.eps,
        )
        a, b, degenerate = centers_batch(event.u, event.xi, event.v, event.r)
        if bool(degenerate):
            flag.degenerate = True
            kind = "degenerate"
        elif classify_shadowing(event, config.shadowing_mode):
            flag.shadow = True
            kind = "shadow"
        elif bool(_start_inconsistent(a, b, event.start, event.r)):
            _plain_turn(state, v)
            kind = "inconsistent"
        elif classify_recollision(event, config.recollision_mode):
            flag.recollision = True
            previous = state.anchor
            _plain_turn(state, v)
            flag.beta = _schedule_bounce(state, previous, frame, event, config.n_max)
            kind = "recollision"
        else:
            _plain_turn(state, v)
            kind = "plain"

    state.trace.record(state.time, state.position, state.velocity)
    state.bump(kind)
    return kind


# Coupled runs

def first_mismatch(a: Trace, b: Trace, tol: float = 1e-9) -> Optional[float]:
    """
    First time the two paths are more than tol apart, None if never.

    Both paths are piecewise linear, so on each interval between merged
    breakpoints the gap is |d0 + s dv| and the crossing is the root of a
    quadratic.
    """
    end = min(a.end_time, b.end_time)
    times = np.union1d(np.array(a.times), np.array(b.times))
    times = times[times <= end]
    gap = norm(a.position_at(times) - b.position_at(times))
    bad = np.flatnonzero(gap > tol)
    if bad.size == 0:
        return None
    k = int(bad[0])
    if k == 0:
        return float(times[0])
    t0 = float(times[k - 1])
    d0 = a.position_at(t0) - b.position_at(t0)
    dv = a.velocity_at(t0) - b.velocity_at(t0)
    qa = float(dot(dv, dv))
    qb = 2.0 * float(dot(d0, dv))
    qc = float(dot(d0, d0)) - tol * tol
    if qa == 0.0:
        return float(times[k])
    s = (-qb + math.sqrt(max(qb * qb - 4.0 * qa * qc, 0.0))) / (2.0 * qa)
    return t0 + min(max(s, 0.0), float(times[k]) - t0)


@dataclass
class CoupledPaths:
    """The three coupled processes of one path, with leg flags and the first X/Z mismatch."""

    path_id: int
    x_trace: Trace
    y_trace: Trace
    z_trace: Trace
    leg_flags: List[LegFlag]
    rejection_times: List[float]
    indirect_times: List[float]
    mismatch_time: Optional[float]
    x_counts: Dict[str, int] = field(default_factory=dict)
    z_counts: Dict[str, int] = field(default_factory=dict)

    def first_event_time(self) -> float:
        """Earliest flagged leg, thinning rejection or indirect hit; inf if none."""
        times = [f.time for f in self.leg_flags if f.shadow or f.recollision or f.degenerate]
        times += self.rejection_times + self.indirect_times
        return min(times) if times else math.inf

    def legs_at_risk(self) -> int:
        """Fresh Z legs up to the mismatch (all legs if there is none)."""
        if self.mismatch_time is None:
            return len(self.leg_flags)
        return sum(1 for f in self.leg_flags if f.time <= self.mismatch_time)

    def flags_histogram(self) -> Dict[str, int]:
        return {
            "shadow": sum(f.shadow for f in self.leg_flags),
            "recollision": sum(f.recollision for f in self.leg_flags),
            "degenerate": sum(f.degenerate for f in self.leg_flags),
            "rejection": len(self.rejection_times),
            "indirect": len(self.indirect_times),
            "legs": len(self.leg_flags),
        }

    def to_dataframe(self) -> pd.DataFrame:
        """Path dump with columns path_id, process, t, x, y, z."""
        return pd.concat(
            [
                self.x_trace.to_dataframe(self.path_id, "X"),
                self.y_trace.to_dataframe(self.path_id, "Y"),
                self.z_trace.to_dataframe(self.path_id, "Z"),
            ],
            ignore_index=True,
        )


def run_process(process: str, config: GasConfig, source: LegSource, horizon: Optional[float] = None):
    """Run one process on a path's draws to the horizon and return its final state."""
    horizon = config.horizon if horizon is None else horizon
    if process == "Y":
        state = FlightState.start(source, horizon)
        while not state.done:
            y_step(state, source)
    elif process == "X":
        state = ExplorationState.start(source, horizon, eps=config.eps, rate=config.rate)
        while not state.done:
            x_step(state, source, config)
    elif process == "Z":
        state = MemoryState.start(source, horizon, eps=config.eps, rate=config.rate)
        while not state.done:
            z_step(state, source, config)
    else:
        raise ValueError(f"unknown process {process!r}, expected one of {PROCESSES}")
    return state


def run_coupled_path(config: GasConfig, path_id: int) -> CoupledPaths:
    """Run X, Y and Z of one path on the same draws."""
    source = LegSource(path_stream(config, path_id))
    y = run_process("Y", config, source)
    x = run_process("X", config, source)
    z = run_process("Z", config, source)
    mismatch = first_mismatch(x.trace, z.trace, config.mismatch_tol)
    return CoupledPaths(
        path_id=path_id,
        x_trace=x.trace,
        y_trace=y.trace,
        z_trace=z.trace,
        leg_flags=z.flags,
        rejection_times=list(x.rejection_times),
        indirect_times=list(x.indirect_times),
        mismatch_time=mismatch,
        x_counts=dict(x.counts),
        z_counts=dict(z.counts),
    )


@dataclass(frozen=True)
class PathTask:
    config: Dict
    path_ids: Tuple[int, ...]


def _coupled_task(task: PathTask) -> List[CoupledPaths]:
    config = GasConfig.from_dict(task.config)
    return [run_coupled_path(config, i) for i in task.path_ids]


def _path_tasks(config: GasConfig, n_paths: int, workers: int) -> List[PathTask]:
    groups = np.array_split(np.arange(n_paths), max(1, min(n_paths, 4 * workers)))
    return [PathTask(config=config.to_dict(), path_ids=tuple(int(i) for i in g)) for g in groups if len(g)]


@dataclass
class CoupledRun:
    """All coupled paths of a run."""

    config: GasConfig
    paths: List[CoupledPaths]

    def mismatch_rate(self) -> Tuple[float, float]:
        """Mismatches per fresh leg at risk, with a Poisson standard error."""
        legs = sum(p.legs_at_risk() for p in self.paths)
        hits = sum(p.mismatch_time is not None for p in self.paths)
        if legs == 0:
            return float("nan"), float("nan")
        return hits / legs, math.sqrt(hits) / legs

    def flags_histogram(self) -> Dict[str, int]:
        total: Dict[str, int] = {}
        for path in self.paths:
            for name, value in path.flags_histogram().items():
                total[name] = total.get(name, 0) + value
        return total

    def to_dataframe(self) -> pd.DataFrame:
        """One row per path: mismatch time and flag counts."""
        rows = []
        for path in self.paths:
            row = {"path_id": path.path_id, "mismatch_time": path.mismatch_time, "legs_at_risk": path.legs_at_risk()}
            row.update(path.flags_histogram())
            rows.append(row)
        return pd.DataFrame(rows)

    def path_dump(self) -> pd.DataFrame:
        return pd.concat([p.to_dataframe() for p in self.paths], ignore_index=True)

    def summary(self) -> Dict[str, object]:
        rate, se = self.mismatch_rate()
        return {
            "mismatch_rate": rate,
            "mismatch_stderr": se,
            "mismatches": sum(p.mismatch_time is not None for p in self.paths),
            "flags": self.flags_histogram(),
            "n_paths": len(self.paths),
            "seed": self.config.seed,
        }


def run_coupled(config: GasConfig, workers: int = 1) -> CoupledRun:
    """Run config.n_paths coupled paths; results are ordered by path index."""
    chunks = run_work_items(_coupled_task, _path_tasks(config, config.n_paths, workers), workers)
    paths = [path for chunk in chunks for path in chunk]
    run = CoupledRun(config=config, paths=paths)
    rate, se = run.mismatch_rate()
    logger.info(f"eps={config.eps:g}: {len(paths)} paths, mismatch rate {rate:.3e} +- {se:.1e} per leg")
    return run


# Diffusive diagnostics

def flight_positions(t_grid: Sequence[float], n_paths: int, stream: RngStream) -> np.ndarray:
    """
    Positions of the flight process at the grid times, all paths advanced in lockstep.

    Returns:
        Array (n_paths, len(t_grid), 3)
    """
    t_grid = np.asarray(t_grid, dtype=float)
    rng = stream.generator()
    pos = np.zeros((n_paths, 3))
    vel = sample_unit_sphere(rng, n_paths)
    t = np.zeros(n_paths)
    out = np.zeros((n_paths, len(t_grid), 3))
    active = np.ones(n_paths, dtype=bool)
    while active.any():
        xi = rng.exponential(size=n_paths)
        v = sample_unit_sphere(rng, n_paths)
        t_next = t + xi
        for g, tg in enumerate(t_grid):
            hit = active & (t <= tg) & (tg < t_next)
            out[hit, g] = pos[hit] + (tg - t[hit])[:, None] * vel[hit]
        pos = pos + xi[:, None] * vel
        t = t_next
        vel = v
        active = t <= t_grid[-1]
    return out


@dataclass(frozen=True)
class PositionTask:
    config: Dict
    process: str
    path_ids: Tuple[int, ...]
    t_grid: Tuple[float, ...]


def _position_task(task: PositionTask) -> np.ndarray:
    config = GasConfig.from_dict(task.config)
    horizon = max(task.t_grid[-1], 1e-12)
    out = np.empty((len(task.path_ids), len(task.t_grid), 3))
    for row, path_id in enumerate(task.path_ids):
        state = run_process(task.process, config, LegSource(path_stream(config, path_id)), horizon)
        out[row] = state.trace.position_at(task.t_grid)
    return out


def process_positions(
    process: str, t_grid: Sequence[float], n_paths: int, config: GasConfig, workers: int = 1
) -> np.ndarray:
    """Positions (n_paths, len(t_grid), 3) of X, Y or Z at the grid times."""
    if process not in PROCESSES:
        raise ValueError(f"unknown process {process!r}, expected one of {PROCESSES}")
    t_grid = np.asarray(list(t_grid), dtype=float)
    if t_grid.size == 0 or np.any(np.diff(t_grid) <= 0.0) or t_grid[0] < 0.0:
        raise ValueError(f"t_grid must be non-negative and strictly increasing, got {t_grid.tolist()}")
    if process == "Y":
        return flight_positions(t_grid, n_paths, config.stream().substream(2 ** 32))
    groups = np.array_split(np.arange(n_paths), max(1, min(n_paths, 4 * workers)))
    tasks = [
        PositionTask(config=config.to_dict(), process=process, path_ids=tuple(int(i) for i in g), t_grid=tuple(t_grid))
        for g in groups if len(g)
    ]
    return np.concatenate(run_work_items(_position_task, tasks, workers))


def flight_msd(t) -> np.ndarray:
    """Exact mean squared displacement 2(t - 1 + e^-t) of the flight process."""
    t = np.asarray(t, dtype=float)
    return 2.0 * (t + np.expm1(-t))


def msd_curve(
    process: str, t_grid: Sequence[float], n_paths: int, config: GasConfig, workers: int = 1
) -> pd.DataFrame:
    """
    Empirical mean squared displacement with CLT error bars.

    Returns:
        DataFrame with columns t, msd, stderr
    """
    positions = process_positions(process, t_grid, n_paths, config, workers)
    squared = np.sum(positions * positions, axis=-1)
    stderr = squared.std(axis=0, ddof=1) / math.sqrt(n_paths) if n_paths > 1 else np.full(squared.shape[1], np.nan)
    return pd.DataFrame({"t": np.asarray(list(t_grid), dtype=float), "msd": squared.mean(axis=0), "stderr": stderr})


@dataclass
class GaussianityReport:
    """KS statistics of the scaled displacement components against N(0, 1)."""

    process: str
    T: float
    ks: Tuple[float, float, float]
    p_values: Tuple[float, float, float]
    correlations: Tuple[float, float, float]
    correlation_z: Tuple[float, float, float]
    msd: float
    n_paths: int

    def passed(self, alpha: float = 0.01, z_max: float = 4.0) -> bool:
        return min(self.p_values) > alpha and max(abs(z) for z in self.correlation_z) < z_max

    def to_dict(self) -> Dict:
        return asdict(self)


def increment_gaussianity(
    process: str, T: float, n_paths: int, config: GasConfig, workers: int = 1
) -> GaussianityReport:
    """
    Test X(T) / sqrt(MSD(T)/3) componentwise against the standard normal law.

    Also reports the pairwise component correlations (xy, xz, yz) and their
    z-scores corr * sqrt(n).
    """
    if T < 100.0:
        raise ValueError(f"T must be at least 100, got {T}")
    end = process_positions(process, [T], n_paths, config, workers)[:, 0, :]
    msd = float(np.mean(np.sum(end * end, axis=1)))
    scaled = end / math.sqrt(msd / 3.0)
    results = [stats.kstest(scaled[:, k], "norm") for k in range(3)]
    corr = np.corrcoef(scaled, rowvar=False)
    pairs = (corr[0, 1], corr[0, 2], corr[1, 2])
    return GaussianityReport(
        process=process,
        T=float(T),
        ks=tuple(float(r.statistic) for r in results),
        p_values=tuple(float(r.pvalue) for r in results),
        correlations=tuple(float(c) for c in pairs),
        correlation_z=tuple(float(c) * math.sqrt(n_paths) for c in pairs),
        msd=msd,
        n_paths=n_paths,
    )


# Kernel and rate checks

@dataclass
class KernelCheck:
    """Uniformity tests of the hard-sphere scattering kernel."""

    p_value: float
    chi2: float
    azimuth_pvalue: float
    polar_pvalue: float
    budget: int


def scattering_kernel_check(budget: int, rng: RngStream, incoming: np.ndarray = E1) -> KernelCheck:
    """
    Reflect a fixed incoming velocity off cosine-weighted impact normals and test the outgoing law.

    The normal V has polar angle theta from -incoming with density
    2 cos(theta) sin(theta) on [0, pi/2]; reflection should give a uniform
    outgoing direction on S^2 (chi-square over 48 equal-area bins) whose
    azimuth about the incoming axis is uniform (KS).
    """
    if budget < 10 ** 6:
        raise ValueError(f"budget must be at least 1e6, got {budget}")
    gen = rng.generator()
    w = np.asarray(incoming, dtype=float)
    axis = -w
    first, second = orthonormal_basis(axis)
    cos_theta = np.sqrt(1.0 - gen.random(budget))
    sin_theta = np.sqrt(1.0 - cos_theta * cos_theta)
    phi = gen.uniform(0.0, 2.0 * np.pi, budget)
    normals = (
        cos_theta[:, None] * axis
        + (sin_theta * np.cos(phi))[:, None] * first
        + (sin_theta * np.sin(phi))[:, None] * second
    )
    outgoing = mirror(np.broadcast_to(w, normals.shape), normals)
    chi2, p_value = sphere_uniformity_chi2(outgoing, 48)
    azimuth = np.arctan2(dot(outgoing, second), dot(outgoing, first))
    azimuth_test = stats.kstest(azimuth, "uniform", args=(-np.pi, 2.0 * np.pi))
    polar = np.arccos(np.clip(cos_theta, -1.0, 1.0))
    polar_test = stats.kstest(polar, lambda t: np.sin(np.clip(t, 0.0, np.pi / 2)) ** 2)
    return KernelCheck(
        p_value=p_value,
        chi2=chi2,
        azimuth_pvalue=float(azimuth_test.pvalue),
        polar_pvalue=float(polar_test.pvalue),
        budget=budget,
    )


def direct_event_rates(eps: float, budget: int, rng: RngStream, shadowing_mode: str = "half_line") -> Dict[str, float]:
    """
    Per-leg probabilities of shadowing and (unshadowed) direct recollision
    for independent Exp(1) flights and uniform directions at radius eps.
    """
    gen = rng.generator()
    u = sample_unit_sphere(gen, budget)
    xi = gen.exponential(size=budget)
    v = sample_unit_sphere(gen, budget)
    masks = classify_batch(u, xi, v, eps)
    valid = ~(masks["degenerate"] | masks["inconsistent"])
    shadow = masks[f"shadowing_{shadowing_mode}"]
    recollision = masks["recollision_ray"] & ~shadow & valid
    p_shadow = float(shadow.mean())
    p_recollision = float(recollision.mean())
    return {
        "shadow": p_shadow,
        "shadow_stderr": math.sqrt(p_shadow * (1.0 - p_shadow) / budget),
        "recollision": p_recollision,
        "recollision_stderr": math.sqrt(p_recollision * (1.0 - p_recollision) / budget),
    }

