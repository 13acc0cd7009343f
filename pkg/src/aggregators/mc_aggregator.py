"""
Monte Carlo Aggregator

Weighted running tallies for chunked Monte Carlo estimates, merged in a fixed order.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple
import logging

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


@dataclass
class WeightedTally:
    """
    Running sums of weighted indicator values over a column grid.

    Each added row is one Monte Carlo draw and each column one threshold
    (or bin). The estimate of column j is the mean of the row values, its
    standard error the sample standard deviation over sqrt(n). Tallies
    built from disjoint chunks are combined with `merge`, which is exact
    for the sums and independent of the chunk sizes.
    """

    n_columns: int
    n: int = 0
    sums: np.ndarray = field(default=None)
    sumsq: np.ndarray = field(default=None)
    hits: np.ndarray = field(default=None)
    counters: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.sums is None:
            self.sums = np.zeros(self.n_columns)
        if self.sumsq is None:
            self.sumsq = np.zeros(self.n_columns)
        if self.hits is None:
            self.hits = np.zeros(self.n_columns, dtype=np.int64)

    def add(self, values: np.ndarray) -> None:
        """
        Add a block of draws.

        Args:
            values: (n, n_columns) weighted values; zero means "not in the event"
        """
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[1] != self.n_columns:
            raise ValueError(f"expected {self.n_columns} columns, got {values.shape[1]}")
        self.n += len(values)
        # numpy sums along an axis pairwise
        self.sums += values.sum(axis=0)
        self.sumsq += (values * values).sum(axis=0)
        self.hits += np.count_nonzero(values, axis=0)

    def count(self, name: str, value: int) -> None:
        self.counters[name] = self.counters.get(name, 0) + int(value)

    def merge(self, other: "WeightedTally") -> "WeightedTally":
        if other.n_columns != self.n_columns:
            raise ValueError("cannot merge tallies with different column counts")
        merged = WeightedTally(
            n_columns=self.n_columns,
            n=self.n + other.n,
            sums=self.sums + other.sums,
            sumsq=self.sumsq + other.sumsq,
            hits=self.hits + other.hits,
            counters=dict(self.counters),
        )
        for name, value in other.counters.items():
            merged.count(name, value)
        return merged

    def mean(self) -> np.ndarray:
        if self.n == 0:
            return np.full(self.n_columns, np.nan)
        return self.sums / self.n

    def stderr(self) -> np.ndarray:
        if self.n < 2:
            return np.full(self.n_columns, np.nan)
        mean = self.sums / self.n
        var = np.maximum(self.sumsq / self.n - mean * mean, 0.0) * self.n / (self.n - 1)
        return np.sqrt(var / self.n)

    def estimate(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (mean, stderr, hits) per column."""
        return self.mean(), self.stderr(), self.hits.copy()

    def to_dataframe(self, labels: Optional[Iterable] = None) -> pd.DataFrame:
        """
        Convert the tally to a pandas DataFrame.

        Args:
            labels: Optional column labels (thresholds); defaults to 0..n_columns-1

        Returns:
            DataFrame with one row per column of the tally
        """
        labels = list(range(self.n_columns)) if labels is None else list(labels)
        mean, se, hits = self.estimate()
        return pd.DataFrame({
            "label": labels,
            "estimate": mean,
            "stderr": se,
            "hits": hits,
            "n": self.n,
        })


def merge_in_order(tallies: List[WeightedTally]) -> WeightedTally:
    """Fold tallies left to right, so the result depends only on their order."""
    if not tallies:
        raise ValueError("no tallies to merge")
    total = tallies[0]
    for tally in tallies[1:]:
        total = total.merge(tally)
    logger.debug(f"Merged {len(tallies)} tallies, {total.n} draws")
    return total


def ratio_with_stderr(num: float, num_se: float, den: float, den_se: float) -> Tuple[float, float]:
    """Delta-method ratio num/den for independent estimates."""
    if den == 0.0 or num == 0.0:
        return float("nan"), float("nan")
    ratio = num / den
    return ratio, abs(ratio) * float(np.hypot(num_se / num, den_se / den))
