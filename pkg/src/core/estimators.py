"""
Tail Estimators

Monte Carlo estimates of recollision tail masses, exit-distribution TV and indirect recollision.

The lambda suite works at radius 1 with draws from the importance design of
`sampling.lambda_strata`; the mu suite draws events from `sampling.sample_mu_batch`
at a small radius r. Both run the batched bounce kernel in fixed-size chunks,
each chunk on its own substream, and merge the chunk tallies in index order.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union
import math
import logging
import time

import numpy as np
import pandas as pd
from scipy import integrate, special, stats

from ..aggregators.mc_aggregator import WeightedTally, merge_in_order, ratio_with_stderr
from .errors import InsufficientHits, NonPositiveMass, TooFewPoints
from .geom3 import E1, angle_between, dot, equal_area_bins, norm, segment_distance, unit
from .parallel import chunk_sizes, run_work_items
from .sampling import (
    RngStream,
    exp_unit_density,
    lambda_strata,
    lambda_tail_bound,
    sample_cone,
    sample_mu_batch,
    sample_unit_sphere,
)
from .two_scatterer import N_MAX, classify_batch, simulate_bounce_batch

logger = logging.getLogger(__name__)

LONG_H = 10.0
DEFAULT_H_MIN = 0.01
MIN_BUDGET = 100_000
MIN_HITS = 100
MIN_TV_SAMPLE = 10_000
CHUNK_DRAWS = 50_000
INDIRECT_CHUNK = 1_000_000
DEFAULT_TV_BINS = 192
MAX_TV_BINS = 768
DEFAULT_NU = (0.0, 1.0, 0.0)
NU_MIN_ANGLE = math.radians(5.0)
Z_95 = float(stats.norm.ppf(0.975))

INDIRECT_EVENTS = ("endpoint", "tube")
QUADRATURE_METHODS = ("reduced", "dblquad")


class Regime(str, Enum):
    """Event families of the tail estimates."""

    SHORT = "short"
    LONG_N3 = "long-n3"
    LONG_N4PLUS = "long-n4plus"
    TRAP_N3 = "trap-n3"
    TRAP_N4PLUS = "trap-n4plus"

    @property
    def kind(self) -> str:
        return "trap" if self.value.startswith("trap") else "angle"

    @property
    def n_filter(self) -> str:
        if self.value.endswith("n3"):
            return "n3"
        if self.value.endswith("n4plus"):
            return "n4plus"
        return "any"

    @property
    def h_range(self) -> Optional[str]:
        """'short' (h <= 10), 'long' (h >= 10) or None for every flight time."""
        if self is Regime.SHORT:
            return "short"
        if self in (Regime.LONG_N3, Regime.LONG_N4PLUS):
            return "long"
        return None


def as_stream(rng: Union[RngStream, int]) -> RngStream:
    return rng if isinstance(rng, RngStream) else RngStream(seed=int(rng))


def _check_grid(s_grid: Sequence[float]) -> np.ndarray:
    s = np.asarray(list(s_grid), dtype=float)
    if s.size == 0:
        raise ValueError("threshold grid is empty")
    if np.any(~(s > 0.0)) or np.any(np.diff(s) <= 0.0):
        raise ValueError(f"thresholds must be positive and strictly increasing, got {s.tolist()}")
    return s


def _check_budget(budget: int) -> None:
    if budget < MIN_BUDGET:
        raise ValueError(f"budget must be at least {MIN_BUDGET}, got {budget}")


# Slope fits

def fit_loglog_slope(
    s_values: Sequence[float],
    p_hat: Sequence[float],
    stderr: Optional[Sequence[float]] = None,
    z: float = Z_95,
) -> Tuple[float, Tuple[float, float]]:
    """
    Fit log p = c + slope * log s.

    With strictly positive standard errors the fit is weighted by
    (p_hat / stderr)^2 and the slope variance is the unscaled covariance of
    the weighted problem; otherwise it is ordinary least squares with the
    residual-scaled covariance.

    Args:
        s_values: Thresholds
        p_hat: Estimates, all > 0
        stderr: Optional standard errors of p_hat
        z: Normal quantile of the interval

    Returns:
        Tuple (slope, (ci_lo, ci_hi))

    Raises:
        TooFewPoints: fewer than 4 points
        NonPositiveMass: any p_hat <= 0
    """
    s = np.asarray(s_values, dtype=float)
    p = np.asarray(p_hat, dtype=float)
    if s.shape != p.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {p.shape}")
    if s.size < 4:
        raise TooFewPoints(f"need at least 4 points for a slope fit, got {s.size}")
    if np.any(~(p > 0.0)):
        raise NonPositiveMass(f"log-log fit needs positive estimates, got {p.tolist()}")

    x = np.log(s)
    y = np.log(p)
    se = None if stderr is None else np.asarray(stderr, dtype=float)
    if se is not None and np.all(se > 0.0):
        coef, cov = np.polyfit(x, y, 1, w=p / se, cov="unscaled")
    else:
        coef, cov = np.polyfit(x, y, 1, cov=True)
    slope = float(coef[0])
    half = z * math.sqrt(max(float(cov[0, 0]), 0.0))
    return slope, (slope - half, slope + half)


# Result types

@dataclass
class TailEstimate:
    """Tail masses over a threshold grid, with the fitted log-log slope."""

    regime: str
    s_values: np.ndarray
    p_hat: np.ndarray
    stderr: np.ndarray
    n_effective: np.ndarray
    slope: float = float("nan")
    slope_ci: Tuple[float, float] = (float("nan"), float("nan"))
    anchor: float = float("nan")
    anchor_stderr: float = float("nan")
    range_bound: float = 0.0
    budget: int = 0
    seed: Optional[int] = None
    wall_time_s: float = 0.0
    counts: Dict[str, int] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def fit(self, window: Optional[Tuple[float, float]] = None, min_hits: int = MIN_HITS) -> None:
        """
        Fit the slope over the points with enough hits inside window.

        Points with fewer than min_hits contributing draws are dropped and
        recorded in `warnings`.

        Raises:
            InsufficientHits: if fewer than 4 points remain
        """
        keep = np.ones(len(self.s_values), dtype=bool)
        if window is not None:
            keep &= (self.s_values >= window[0]) & (self.s_values <= window[1])
        for i in np.flatnonzero(keep):
            if self.n_effective[i] < min_hits or not self.p_hat[i] > 0.0:
                keep[i] = False
                message = (
                    f"{self.regime}: s={self.s_values[i]:g} has {int(self.n_effective[i])} hits "
                    f"(< {min_hits}), dropped from fit"
                )
                self.warnings.append(message)
                logger.warning(message)
        if keep.sum() < 4:
            raise InsufficientHits(
                f"{self.regime}: only {int(keep.sum())} thresholds have at least {min_hits} hits"
            )
        self.slope, self.slope_ci = fit_loglog_slope(
            self.s_values[keep], self.p_hat[keep], self.stderr[keep]
        )

    def monotone_violations(self, k: float = 2.0) -> List[Tuple[float, float]]:
        """Pairs (s, s') with s < s' and p(s') > p(s) + k (stderr(s) + stderr(s'))."""
        bad = []
        for i in range(len(self.s_values)):
            for j in range(i + 1, len(self.s_values)):
                if self.p_hat[j] > self.p_hat[i] + k * (self.stderr[i] + self.stderr[j]):
                    bad.append((float(self.s_values[i]), float(self.s_values[j])))
        return bad

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame({
            "s_or_R": self.s_values,
            "estimate": self.p_hat,
            "stderr": self.stderr,
            "n": self.n_effective,
            "regime": self.regime,
        })

    def summary(self) -> Dict[str, object]:
        return {
            "regime": self.regime,
            "slope": self.slope,
            "ci_lo": self.slope_ci[0],
            "ci_hi": self.slope_ci[1],
            "anchor": self.anchor,
            "anchor_stderr": self.anchor_stderr,
            "range_bound": self.range_bound,
            "seed": self.seed,
            "budget": self.budget,
            "wall_time_s": self.wall_time_s,
            "counts": dict(self.counts),
            "warnings": list(self.warnings),
        }


@dataclass
class TvEstimate:
    """Binned total-variation distance of exit directions from Uni(S^2)."""

    R: float
    tv_hat: float
    stderr: float
    bins: int
    ks_costheta: float
    ks_pvalue: float = float("nan")
    bias: float = 0.0
    n_conditioned: int = 0
    seed: Optional[int] = None
    budget: int = 0
    wall_time_s: float = 0.0
    counts: Dict[str, int] = field(default_factory=dict)

    @property
    def tv_debiased(self) -> float:
        return max(0.0, self.tv_hat - self.bias)

    def to_dict(self) -> Dict[str, object]:
        return {
            "R": self.R,
            "tv_hat": self.tv_hat,
            "tv_debiased": self.tv_debiased,
            "stderr": self.stderr,
            "bias": self.bias,
            "bins": self.bins,
            "ks_costheta": self.ks_costheta,
            "ks_pvalue": self.ks_pvalue,
            "n_conditioned": self.n_conditioned,
            "seed": self.seed,
            "budget": self.budget,
            "wall_time_s": self.wall_time_s,
            "counts": dict(self.counts),
        }


# Chunked tail evaluation

@dataclass(frozen=True)
class TailTask:
    """One chunk of a tail estimate."""

    index: int
    stream: RngStream
    draws: int
    source: str
    kind: str
    n_filter: str
    thresholds: Tuple[float, ...]
    h_lo: float
    h_hi: float
    radius: float = 1.0
    mu_radius: Optional[float] = None
    n_max: int = N_MAX


def _n_mask(n_collisions: np.ndarray, n_filter: str) -> np.ndarray:
    if n_filter == "n3":
        return n_collisions == 3
    if n_filter == "n4plus":
        return n_collisions >= 4
    return n_collisions >= 3


def _event_matrix(kind: str, batch, thresholds: np.ndarray, scale: float) -> np.ndarray:
    if kind == "angle":
        angle = angle_between(-E1, batch.w_exit)
        return angle[:, None] < 1.0 / thresholds[None, :]
    if kind == "trap":
        return (batch.beta / scale)[:, None] > thresholds[None, :]
    if kind == "n_exact":
        # the last column is open ended
        n = batch.n_collisions[:, None]
        out = n == thresholds[None, :].astype(np.int64)
        out[:, -1] = batch.n_collisions >= int(thresholds[-1])
        return out
    raise ValueError(f"unknown event kind {kind!r}")


def evaluate_tail_task(task: TailTask) -> WeightedTally:
    """Run one chunk and tally weighted indicators; the last column is the regime mass."""
    rng = task.stream.generator()
    thresholds = np.asarray(task.thresholds, dtype=float)

    if task.source == "lambda":
        [stratum] = lambda_strata(task.h_lo, task.h_hi, "importance", n=task.draws, rng=rng)
        u, xi, v = stratum.u, stratum.h, stratum.v
        weight = stratum.weight * stratum.cap_weight
        if task.mu_radius is not None:
            weight = weight * exp_unit_density(task.mu_radius * xi)
        r, scale = 1.0, 1.0
        in_range = np.ones(len(xi), dtype=bool)
    elif task.source == "mu":
        events = sample_mu_batch(rng, task.radius, task.draws)
        u, xi, v = events.u, events.xi, events.v
        weight = np.ones(len(xi))
        r, scale = task.radius, task.radius
        h = xi / r
        in_range = (h >= task.h_lo) & (h <= task.h_hi)
    else:
        raise ValueError(f"unknown source {task.source!r}")

    batch = simulate_bounce_batch(u, xi, v, r, task.n_max)
    member = batch.recollided & ~batch.truncated & in_range & _n_mask(batch.n_collisions, task.n_filter)
    indicators = _event_matrix(task.kind, batch, thresholds, scale) & member[:, None]
    values = np.column_stack([indicators, member]) * weight[:, None]

    tally = WeightedTally(n_columns=len(thresholds) + 1)
    tally.add(values)
    for name, value in batch.counts().items():
        tally.count(name, value)
    logger.debug(f"chunk {task.index}: {int(member.sum())} of {task.draws} draws in the regime")
    return tally


def _h_bounds(h_range: Optional[str], h_min: float, h_max: float) -> Tuple[float, float]:
    if h_range is None:
        return h_min, h_max
    if h_range == "short":
        return h_min, min(h_max, LONG_H)
    if h_range == "long":
        return max(h_min, LONG_H), h_max
    raise ValueError(f"unknown flight-time range {h_range!r}, expected 'short' or 'long'")


def _run_tail(
    label: str,
    tasks: List[TailTask],
    s: np.ndarray,
    stream: RngStream,
    budget: int,
    workers: int,
    range_bound: float,
    fit: bool,
    fit_window: Optional[Tuple[float, float]],
) -> TailEstimate:
    start = time.time()
    tally = merge_in_order(run_work_items(evaluate_tail_task, tasks, workers))
    mean, se, hits = tally.estimate()
    estimate = TailEstimate(
        regime=label,
        s_values=s,
        p_hat=mean[:-1],
        stderr=se[:-1],
        n_effective=hits[:-1],
        anchor=float(mean[-1]),
        anchor_stderr=float(se[-1]),
        range_bound=range_bound,
        budget=budget,
        seed=stream.seed,
        counts=dict(tally.counters),
    )
    if tally.counters.get("truncated", 0):
        estimate.warnings.append(f"{tally.counters['truncated']} bounce sequences hit the collision cap")
    if fit:
        estimate.fit(fit_window)
    estimate.wall_time_s = time.time() - start
    logger.info(
        f"{label}: {budget} draws, anchor {estimate.anchor:.4g}, slope {estimate.slope:.3f} "
        f"in {estimate.wall_time_s:.1f}s"
    )
    return estimate


def _lambda_tail(
    label: str,
    kind: str,
    n_filter: str,
    h_range: Optional[str],
    s_grid: Sequence[float],
    budget: int,
    rng: Union[RngStream, int],
    h_min: float,
    h_max: float,
    mu_radius: Optional[float],
    workers: int,
    n_max: int,
    chunk: int,
    fit: bool,
    fit_window: Optional[Tuple[float, float]],
) -> TailEstimate:
    s = _check_grid(s_grid)
    _check_budget(budget)
    stream = as_stream(rng)
    lo, hi = _h_bounds(h_range, h_min, h_max)
    if mu_radius is not None:
        if not mu_radius > 0.0:
            raise ValueError(f"mu_radius must be positive, got {mu_radius}")
        hi = min(hi, 1.0 / mu_radius)
    # truncation only counts where the design cuts the regime short
    below = lo if lo == h_min else 0.0
    above = lambda_tail_bound(hi) if mu_radius is None and hi == h_max else 0.0
    range_bound = below + above
    tasks = [
        TailTask(
            index=i,
            stream=stream.substream(i),
            draws=n,
            source="lambda",
            kind=kind,
            n_filter=n_filter,
            thresholds=tuple(float(x) for x in s),
            h_lo=lo,
            h_hi=hi,
            mu_radius=mu_radius,
            n_max=n_max,
        )
        for i, n in enumerate(chunk_sizes(budget, chunk))
    ]
    return _run_tail(label, tasks, s, stream, budget, workers, range_bound, fit, fit_window)


def estimate_angle_tail(
    regime: Union[Regime, str],
    s_grid: Sequence[float],
    budget: int,
    rng: Union[RngStream, int],
    h_min: float = DEFAULT_H_MIN,
    h_max: float = math.inf,
    mu_radius: Optional[float] = None,
    workers: int = 1,
    n_max: int = N_MAX,
    chunk: int = CHUNK_DRAWS,
    fit: bool = True,
    fit_window: Optional[Tuple[float, float]] = None,
) -> TailEstimate:
    """
    Lambda mass of recollisions whose exit direction is within 1/s of -e.

    Args:
        regime: short (h <= 10, any N), long-n3 or long-n4plus (h >= 10)
        s_grid: Increasing thresholds
        budget: Importance draws (>= 1e5)
        rng: RngStream or integer seed
        h_min: Lower flight-time cutoff of the lambda design
        h_max: Upper flight-time cutoff (inf for the full range)
        mu_radius: Weight draws by the mu flight-time density at radius r,
            so the result equals the mu mass at radius r divided by r
        workers: Processes for the chunks
        n_max: Collision cap of the bounce kernel
        chunk: Draws per work item
        fit: Fit the log-log slope
        fit_window: Optional (lo, hi) threshold window for the fit

    Returns:
        TailEstimate; the anchor is the mass of the regime without the angle constraint
    """
    regime = Regime(regime)
    if regime.kind != "angle":
        raise ValueError(f"{regime.value} is a trapping regime, use estimate_trap_tail")
    return _lambda_tail(
        regime.value, "angle", regime.n_filter, regime.h_range, s_grid, budget, rng,
        h_min, h_max, mu_radius, workers, n_max, chunk, fit, fit_window,
    )


def estimate_trap_tail(
    n_filter: str,
    s_grid: Sequence[float],
    budget: int,
    rng: Union[RngStream, int],
    h_range: Optional[str] = None,
    h_min: float = DEFAULT_H_MIN,
    h_max: float = math.inf,
    mu_radius: Optional[float] = None,
    workers: int = 1,
    n_max: int = N_MAX,
    chunk: int = CHUNK_DRAWS,
    fit: bool = True,
    fit_window: Optional[Tuple[float, float]] = None,
) -> TailEstimate:
    """
    Lambda mass of recollisions with trapping time beta > s.

    Args:
        n_filter: "=3" or ">=4"
        h_range: None, "short" (h <= 10) or "long" (h >= 10)

    The remaining arguments are those of estimate_angle_tail.
    """
    filters = {"=3": Regime.TRAP_N3, ">=4": Regime.TRAP_N4PLUS}
    if n_filter not in filters:
        raise ValueError(f"unknown N filter {n_filter!r}, expected one of {sorted(filters)}")
    regime = filters[n_filter]
    label = regime.value if h_range is None else f"{regime.value}-{h_range}"
    return _lambda_tail(
        label, "trap", regime.n_filter, h_range, s_grid, budget, rng,
        h_min, h_max, mu_radius, workers, n_max, chunk, fit, fit_window,
    )


def estimate_mu_tails(
    r: float,
    regime: Union[Regime, str],
    s_grid: Sequence[float],
    budget: int,
    rng: Union[RngStream, int],
    workers: int = 1,
    n_max: int = N_MAX,
    chunk: int = CHUNK_DRAWS,
    fit: bool = True,
    fit_window: Optional[Tuple[float, float]] = None,
) -> TailEstimate:
    """
    Mu probability of a regime event at radius r.

    The flight-time split is xi <= 10r / xi >= 10r and trapping thresholds
    apply to beta / r.

    Args:
        r: Radius in (0, 0.1]
        regime: Any Regime
        s_grid: Increasing thresholds

    Raises:
        ValueError: r outside (0, 0.1] or an empty grid
    """
    if not 0.0 < r <= 0.1:
        raise ValueError(f"radius must lie in (0, 0.1], got {r}")
    regime = Regime(regime)
    s = _check_grid(s_grid)
    _check_budget(budget)
    stream = as_stream(rng)
    lo, hi = _h_bounds(regime.h_range, 0.0, math.inf)
    tasks = [
        TailTask(
            index=i,
            stream=stream.substream(i),
            draws=n,
            source="mu",
            kind=regime.kind,
            n_filter=regime.n_filter,
            thresholds=tuple(float(x) for x in s),
            h_lo=lo,
            h_hi=hi,
            radius=r,
            n_max=n_max,
        )
        for i, n in enumerate(chunk_sizes(budget, chunk))
    ]
    return _run_tail(f"mu-{regime.value}", tasks, s, stream, budget, workers, 0.0, fit, fit_window)


def mu_linearity(
    r: float,
    regime: Union[Regime, str],
    s_grid: Sequence[float],
    budget: int,
    rng: Union[RngStream, int],
    workers: int = 1,
) -> pd.DataFrame:
    """
    Ratio of mu estimates at r and r/2, which is 2 when the masses are linear in r.

    Returns:
        DataFrame with columns s, ratio, stderr, z (distance of the ratio from 2 in stderr)
    """
    stream = as_stream(rng)
    full = estimate_mu_tails(r, regime, s_grid, budget, stream.substream(0), workers, fit=False)
    half = estimate_mu_tails(r / 2.0, regime, s_grid, budget, stream.substream(1), workers, fit=False)
    rows = []
    for i, s in enumerate(full.s_values):
        ratio, se = ratio_with_stderr(full.p_hat[i], full.stderr[i], half.p_hat[i], half.stderr[i])
        rows.append({"s": s, "ratio": ratio, "stderr": se, "z": (ratio - 2.0) / se if se > 0 else np.nan})
    return pd.DataFrame(rows)


def lambda_mu_consistency(
    r: float,
    s_grid: Sequence[float],
    budget: int,
    rng: Union[RngStream, int],
    workers: int = 1,
    h_min: float = 1e-3,
) -> pd.DataFrame:
    """
    Compare the lambda trap-n3 tail weighted at radius r with the mu tail divided by r.

    Returns:
        DataFrame with columns s, lambda_estimate, mu_over_r, z
    """
    stream = as_stream(rng)
    lam = estimate_trap_tail(
        "=3", s_grid, budget, stream.substream(0), h_min=h_min, mu_radius=r, workers=workers, fit=False
    )
    mu = estimate_mu_tails(r, Regime.TRAP_N3, s_grid, budget, stream.substream(1), workers, fit=False)
    joint = np.sqrt(lam.stderr ** 2 + (mu.stderr / r) ** 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        z = (lam.p_hat - mu.p_hat / r) / joint
    return pd.DataFrame({
        "s": lam.s_values,
        "lambda_estimate": lam.p_hat,
        "mu_over_r": mu.p_hat / r,
        "z": z,
    })


def n_histogram(
    budget: int,
    rng: Union[RngStream, int],
    h_min: float = DEFAULT_H_MIN,
    h_max: float = math.inf,
    k_max: int = 6,
    workers: int = 1,
) -> pd.DataFrame:
    """
    Lambda mass of {N = k} for k = 3..k_max and of {N > k_max}.

    Returns:
        DataFrame with columns n, open_ended, mass, stderr, hits
    """
    if k_max < 3:
        raise ValueError(f"k_max must be at least 3, got {k_max}")
    ks = np.arange(3, k_max + 2, dtype=float)
    estimate = _lambda_tail(
        "n-histogram", "n_exact", "any", None, ks, budget, rng,
        h_min, h_max, None, workers, N_MAX, CHUNK_DRAWS, False, None,
    )
    return pd.DataFrame({
        "n": ks.astype(int),
        "open_ended": [False] * (len(ks) - 1) + [True],
        "mass": estimate.p_hat,
        "stderr": estimate.stderr,
        "hits": estimate.n_effective,
    })


# Exit distribution

def tv_from_directions(directions: np.ndarray, nu: np.ndarray, bins: int = DEFAULT_TV_BINS) -> TvEstimate:
    """
    Binned TV distance of unit vectors from the uniform law on S^2.

    The plug-in estimate is biased upward by about sqrt(bins / (2 pi n));
    that value is reported as `bias`. The stderr is the delta-method
    standard error of the plug-in.
    """
    directions = np.atleast_2d(directions)
    n = len(directions)
    if n == 0:
        raise InsufficientHits("no directions to bin")
    counts = np.bincount(equal_area_bins(directions, bins), minlength=bins)
    p = counts / n
    q = 1.0 / bins
    tv = 0.5 * float(np.abs(p - q).sum())
    grad = 0.5 * np.sign(p - q)
    var = (float((grad * grad * p).sum()) - float((grad * p).sum()) ** 2) / n
    cos_theta = np.clip(dot(directions, np.asarray(nu, dtype=float)), -1.0, 1.0)
    ks = stats.kstest(cos_theta, "uniform", args=(-1.0, 2.0))
    return TvEstimate(
        R=float("nan"),
        tv_hat=tv,
        stderr=math.sqrt(max(var, 0.0)),
        bins=bins,
        ks_costheta=float(ks.statistic),
        ks_pvalue=float(ks.pvalue),
        bias=math.sqrt(bins / (2.0 * math.pi * n)),
        n_conditioned=n,
    )


def default_tv_bins(n_conditioned: int) -> int:
    """Bin count growing as sqrt(n), at least 192 and at most 768, a multiple of 48."""
    scaled = int(round(math.sqrt(n_conditioned) / 48.0)) * 48
    return int(min(MAX_TV_BINS, max(DEFAULT_TV_BINS, scaled)))


@dataclass(frozen=True)
class ConeTask:
    """One chunk of draws v from the backscatter cone around -nu at flight time R."""

    index: int
    stream: RngStream
    draws: int
    R: float
    nu: Tuple[float, float, float]
    n_max: int = N_MAX


def evaluate_cone_task(task: ConeTask) -> Dict[str, object]:
    rng = task.stream.generator()
    nu = np.asarray(task.nu)
    half = min(math.pi, 2.0 / task.R)
    v, cap = sample_cone(rng, -nu, half, size=task.draws)
    u = np.tile(nu, (len(v), 1))
    batch = simulate_bounce_batch(u, task.R, v, 1.0, task.n_max)
    usable = batch.usable
    return {
        "w_exit": batch.w_exit[usable & (batch.n_collisions == 3)],
        "recollisions": int((usable & (batch.n_collisions >= 3)).sum()),
        "cap_weight": float(cap[0]),
        "counts": batch.counts(),
    }


def _cone_tasks(R: float, nu: np.ndarray, budget: int, stream: RngStream, chunk: int) -> List[ConeTask]:
    return [
        ConeTask(index=i, stream=stream.substream(i), draws=n, R=float(R), nu=tuple(float(x) for x in nu))
        for i, n in enumerate(chunk_sizes(budget, chunk))
    ]


def check_nu(nu: Sequence[float]) -> np.ndarray:
    """
    Unit first-flight direction of the cone estimates.

    With u = e the first obstacle center is undefined and every cone draw is
    degenerate, so directions within NU_MIN_ANGLE of e are rejected.
    """
    nu = unit(np.asarray(nu, dtype=float))
    if angle_between(nu, E1) < NU_MIN_ANGLE:
        raise ValueError(
            f"nu must be at least {math.degrees(NU_MIN_ANGLE):g} degrees from e = (1, 0, 0), got {nu.tolist()}"
        )
    return nu


def _merge_counts(results: List[Dict[str, object]]) -> Dict[str, int]:
    total: Dict[str, int] = {}
    for result in results:
        for name, value in result["counts"].items():
            total[name] = total.get(name, 0) + value
    return total


def estimate_exit_tv(
    R: float,
    nu: np.ndarray,
    budget: int,
    rng: Union[RngStream, int],
    bins: Optional[int] = DEFAULT_TV_BINS,
    workers: int = 1,
    chunk: int = CHUNK_DRAWS,
) -> TvEstimate:
    """
    TV distance from uniform of the exit direction given xi = R, u = nu and N = 3.

    v is drawn uniformly on the cone of half angle min(pi, 2/R) around -nu,
    which holds every recollision, so conditioning the cone draws on N = 3
    gives the conditional law of the exit direction.

    Args:
        R: Conditioning flight time (>= 10)
        nu: Direction of u, at least NU_MIN_ANGLE away from e
        budget: Cone draws
        rng: RngStream or integer seed
        bins: Equal-area bin count; None picks it from the sample size

    Raises:
        ValueError: R below 10 or nu too close to e
        InsufficientHits: conditioned sample below 1e4
    """
    if R < LONG_H:
        raise ValueError(f"R must be at least {LONG_H}, got {R}")
    nu = check_nu(nu)
    stream = as_stream(rng)
    start = time.time()
    results = run_work_items(evaluate_cone_task, _cone_tasks(R, nu, budget, stream, chunk), workers)
    w_exit = np.concatenate([res["w_exit"] for res in results]) if results else np.empty((0, 3))
    if len(w_exit) < MIN_TV_SAMPLE:
        raise InsufficientHits(
            f"R={R:g}: {len(w_exit)} conditioned exits, need at least {MIN_TV_SAMPLE}"
        )
    estimate = tv_from_directions(w_exit, nu, default_tv_bins(len(w_exit)) if bins is None else bins)
    estimate.R = float(R)
    estimate.seed = stream.seed
    estimate.budget = budget
    estimate.counts = _merge_counts(results)
    estimate.wall_time_s = time.time() - start
    logger.info(
        f"R={R:g}: tv {estimate.tv_hat:.4f} (bias {estimate.bias:.4f}) from {estimate.n_conditioned} exits"
    )
    return estimate


@dataclass
class ConeMass:
    """Solid angle of the recollision set of v at flight time R."""

    R: float
    solid_angle: float
    stderr: float
    reference: float

    @property
    def relative_error(self) -> float:
        return self.solid_angle / self.reference - 1.0


def recollision_cone_mass(
    R: float,
    budget: int,
    rng: Union[RngStream, int],
    nu: Sequence[float] = DEFAULT_NU,
    workers: int = 1,
    chunk: int = CHUNK_DRAWS,
) -> ConeMass:
    """
    Solid angle of {v : N >= 3 | xi = R, u = nu}, compared with pi / R^2.

    The estimate is 4 pi * cap_weight * (fraction of cone draws that recollide).
    """
    if not R > 0.0:
        raise ValueError(f"R must be positive, got {R}")
    if budget < 2:
        raise ValueError(f"budget must be at least 2, got {budget}")
    nu = check_nu(nu)
    stream = as_stream(rng)
    results = run_work_items(evaluate_cone_task, _cone_tasks(R, nu, budget, stream, chunk), workers)
    hits = sum(res["recollisions"] for res in results)
    area = 4.0 * math.pi * results[0]["cap_weight"]
    frac = hits / budget
    return ConeMass(
        R=float(R),
        solid_angle=area * frac,
        stderr=area * math.sqrt(frac * (1.0 - frac) / (budget - 1)),
        reference=math.pi / R ** 2,
    )


# Classifier readings

def classifier_disagreement(budget: int, rng: Union[RngStream, int], r: float = 0.05) -> Dict[str, float]:
    """
    Rates at which alternative set readings disagree on mu draws at radius r.

    Returns:
        Dict with the shadowing and recollision disagreement rates, the rate
        of ray recollisions outside each cone reading, and the valid count
    """
    if budget < 1:
        raise ValueError(f"budget must be positive, got {budget}")
    stream = as_stream(rng)
    events = sample_mu_batch(stream.generator(), r, budget)
    masks = classify_batch(events.u, events.xi, events.v, r)
    valid = ~(masks["degenerate"] | masks["inconsistent"])
    n = int(valid.sum())
    if n == 0:
        raise InsufficientHits("no valid events")

    def rate(mask: np.ndarray) -> float:
        return float((mask & valid).sum()) / n

    return {
        "valid": n,
        "shadowing_line_vs_half_line": rate(masks["shadowing_line"] != masks["shadowing_half_line"]),
        "recollision_ray_vs_line": rate(masks["recollision_ray"] != masks["recollision_line"]),
        "ray_outside_backscatter_cone": rate(masks["recollision_ray"] & ~masks["prime_backscatter"]),
        "ray_outside_literal_cone": rate(masks["recollision_ray"] & ~masks["prime_literal"]),
    }


# Indirect recollision

@dataclass(frozen=True)
class IndirectTask:
    index: int
    stream: RngStream
    draws: int
    epsilons: Tuple[float, ...]
    event: str


def evaluate_indirect_task(task: IndirectTask) -> WeightedTally:
    """Two (or three) exponential flights with uniform directions from the origin."""
    rng = task.stream.generator()
    n = task.draws
    first = rng.exponential(size=n)[:, None] * sample_unit_sphere(rng, n)
    second = rng.exponential(size=n)[:, None] * sample_unit_sphere(rng, n)
    end = first + second
    if task.event == "endpoint":
        distance = norm(end)
    else:
        third = rng.exponential(size=n)[:, None] * sample_unit_sphere(rng, n)
        distance = segment_distance(np.zeros(3), end, end + third)
    eps = np.asarray(task.epsilons)
    tally = WeightedTally(n_columns=len(eps))
    tally.add((distance[:, None] <= eps[None, :]).astype(float))
    return tally


def indirect_prob_curve(
    epsilons: Sequence[float],
    budget: int,
    rng: Union[RngStream, int],
    event: str = "endpoint",
    workers: int = 1,
    chunk: int = INDIRECT_CHUNK,
) -> pd.DataFrame:
    """
    Indirect recollision probabilities for several epsilon on common draws.

    event "endpoint" is |Y1 + Y2| <= eps; "tube" is a third flight from
    Y1 + Y2 passing within eps of the origin.

    Returns:
        DataFrame with columns epsilon, p_hat, stderr, hits
    """
    if event not in INDIRECT_EVENTS:
        raise ValueError(f"unknown indirect event {event!r}, expected one of {INDIRECT_EVENTS}")
    eps = np.asarray(list(epsilons), dtype=float)
    if np.any(eps < 0.0):
        raise ValueError(f"epsilon must be >= 0, got {eps.tolist()}")
    if budget < 2:
        raise ValueError(f"budget must be at least 2, got {budget}")
    stream = as_stream(rng)
    tasks = [
        IndirectTask(index=i, stream=stream.substream(i), draws=n, epsilons=tuple(eps.tolist()), event=event)
        for i, n in enumerate(chunk_sizes(budget, chunk))
    ]
    tally = merge_in_order(run_work_items(evaluate_indirect_task, tasks, workers))
    mean, se, hits = tally.estimate()
    # binomial standard error
    se = np.sqrt(mean * (1.0 - mean) / (tally.n - 1))
    return pd.DataFrame({"epsilon": eps, "p_hat": mean, "stderr": se, "hits": hits})


def indirect_prob_mc(
    epsilon: float,
    budget: int,
    rng: Union[RngStream, int],
    event: str = "endpoint",
    workers: int = 1,
) -> Tuple[float, float]:
    """
    Monte Carlo probability of the indirect recollision event at radius epsilon.

    Returns:
        Tuple (p_hat, stderr); (0, 0) at epsilon = 0
    """
    if epsilon == 0.0:
        return 0.0, 0.0
    row = indirect_prob_curve([epsilon], budget, rng, event, workers).iloc[0]
    return float(row["p_hat"]), float(row["stderr"])


def _lens_term(x: float) -> float:
    """x - (1 - x^2) artanh(x) for x in (0, 1]."""
    if x >= 1.0:
        return 1.0
    if x < 0.3:
        k = np.arange(1, 41)
        return float(np.sum(2.0 * x ** (2 * k + 1) / ((2 * k - 1) * (2 * k + 1))))
    return x - (1.0 - x * x) * math.atanh(x)


def indirect_prob_quadrature(epsilon: float, method: str = "reduced", rtol: float = 1e-10) -> float:
    """
    P(|Y1 + Y2| <= eps) for independent flights Y = xi * omega, xi ~ Exp(1), omega ~ Uni(S^2).

    Given the lengths x, y the cosine between the directions is uniform on
    [-1, 1], so the conditional probability is
    (1 + clamp((eps^2 - x^2 - y^2) / (2xy), -1, 1)) / 2. The "dblquad"
    method integrates that against e^(-x-y) adaptively in 2D. The
    "reduced" method integrates over the difference x - y in closed form:
    P = P(x + y <= eps) + int_eps^inf e^-s s [q - (1 - q^2) artanh q] ds
    with q = eps / s.

    Args:
        epsilon: Radius > 0
        method: "reduced" or "dblquad"
        rtol: Relative quadrature tolerance

    Returns:
        Probability
    """
    if not epsilon > 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if method not in QUADRATURE_METHODS:
        raise ValueError(f"unknown quadrature method {method!r}, expected one of {QUADRATURE_METHODS}")
    eps = float(epsilon)

    if method == "reduced":
        head = float(special.gammainc(2.0, eps))

        def integrand(s: float) -> float:
            return math.exp(-s) * s * _lens_term(eps / s)

        near, _ = integrate.quad(integrand, eps, 2.0 * eps, epsabs=0.0, epsrel=rtol, limit=200)
        far, _ = integrate.quad(integrand, 2.0 * eps, np.inf, epsabs=0.0, epsrel=rtol, limit=200)
        return head + near + far

    def conditional(y: float, x: float) -> float:
        c = (eps * eps - x * x - y * y) / (2.0 * x * y)
        return 0.5 * (1.0 + min(1.0, max(-1.0, c))) * math.exp(-x - y)

    x_max = eps + 60.0
    total = 0.0
    for lo, hi in ((0.0, eps), (eps, x_max)):
        value, _ = integrate.dblquad(
            conditional, lo, hi,
            lambda x: max(0.0, x - eps), lambda x: x + eps,
            epsabs=0.0, epsrel=rtol,
        )
        total += value
    return total
