"""MDAV microaggregation and the NCP within-group dispersion penalty.

The MDAV variant is the classic generic one: while at least 2k records
remain, find the record x_r farthest from the centroid and the record
x_s farthest from x_r, and form the k-nearest cluster around each, in
that order.  A remainder of k..2k-1 records becomes one final cluster;
a remainder below k is merged whole into the cluster whose centroid is
nearest.  All ties break toward the lowest vector id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InsufficientDataError, UsageError

RANGE_FLOOR = 1e-9   # for constant dimensions, avoids division by zero


@dataclass(frozen=True)
class RangeEstimate:
    """Per-dimension robust ranges R_a from an inter-quantile spread."""

    ranges: np.ndarray
    q_low: float
    q_high: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "ranges", np.asarray(self.ranges, dtype=np.float64))


@dataclass(frozen=True)
class MicroCluster:
    member_ids: tuple[int, ...]
    centroid: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "member_ids", tuple(int(i) for i in self.member_ids))
        object.__setattr__(self, "centroid", np.asarray(self.centroid, dtype=np.float64))


def l2_normalize(vectors: np.ndarray) -> np.ndarray:
    """Row-wise l2 normalization; zero rows are left unchanged."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.where(norms > 1e-12, norms, 1.0)


def estimate_ranges(vectors: np.ndarray, q_low: float = 0.05, q_high: float = 0.95) -> RangeEstimate:
    """Empirical inter-quantile range per dimension (linear interpolation)."""
    if not (0.0 <= q_low < q_high <= 1.0):
        raise UsageError("quantiles must satisfy 0 <= q_low < q_high <= 1")
    v = np.asarray(vectors, dtype=np.float64)
    if v.shape[0] < 2:
        raise InsufficientDataError("range estimation needs at least 2 vectors")
    lo = np.quantile(v, q_low, axis=0)
    hi = np.quantile(v, q_high, axis=0)
    return RangeEstimate(ranges=np.maximum(hi - lo, RANGE_FLOOR), q_low=q_low, q_high=q_high)


def ncp(
    member_ids,
    vectors: np.ndarray,
    weights: np.ndarray | None,
    ranges: RangeEstimate,
) -> float:
    """Normalized certainty penalty: sum_a w_a (max_a - min_a) / R_a."""
    ids = sorted(int(i) for i in member_ids)
    if not ids:
        raise UsageError("ncp needs at least one member")
    sub = np.asarray(vectors, dtype=np.float64)[ids]
    d = sub.shape[1]
    w = np.full(d, 1.0 / d) if weights is None else np.asarray(weights, dtype=np.float64)
    if (w < 0).any():
        raise UsageError("ncp weights must be non-negative")
    spread = sub.max(axis=0) - sub.min(axis=0)
    return float(np.sum(w * spread / ranges.ranges))


def _k_nearest(X: np.ndarray, center: np.ndarray, candidates: list[int], k: int) -> list[int]:
    cand = np.asarray(candidates)
    d2 = np.sum((X[cand] - center) ** 2, axis=1)
    order = np.lexsort((cand, d2))          # distance first, then lowest id
    return [int(cand[i]) for i in order[:k]]


def _farthest(X: np.ndarray, point: np.ndarray, candidates: list[int]) -> int:
    cand = np.asarray(candidates)
    d2 = np.sum((X[cand] - point) ** 2, axis=1)
    return int(cand[np.lexsort((cand, -d2))[0]])


def mdav(vectors: np.ndarray, k: int) -> list[MicroCluster]:
    """Cluster vectors into groups of at least k records each."""
    X = np.asarray(vectors, dtype=np.float64)
    n = X.shape[0]
    if k < 2:
        raise UsageError("mdav requires k >= 2")
    if n < k:
        raise InsufficientDataError(f"mdav needs at least k={k} vectors, got {n}")

    remaining = list(range(n))
    groups: list[list[int]] = []
    while len(remaining) >= 2 * k:
        centroid = X[remaining].mean(axis=0)
        x_r = _farthest(X, centroid, remaining)
        x_s = _farthest(X, X[x_r], remaining)
        g1 = _k_nearest(X, X[x_r], remaining, k)
        for i in g1:
            remaining.remove(i)
        g2 = _k_nearest(X, X[x_s], remaining, k)
        for i in g2:
            remaining.remove(i)
        groups.extend([g1, g2])

    if len(remaining) >= k:
        groups.append(list(remaining))
    elif remaining:
        # Merge the whole remainder into the nearest cluster so at most
        # one cluster exceeds k members.
        rc = X[remaining].mean(axis=0)
        cents = np.array([X[g].mean(axis=0) for g in groups])
        d2 = np.sum((cents - rc) ** 2, axis=1)
        groups[int(np.argmin(d2))].extend(remaining)

    return [
        MicroCluster(member_ids=tuple(sorted(g)), centroid=X[sorted(g)].mean(axis=0))
        for g in groups
    ]
