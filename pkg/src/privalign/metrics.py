"""Baseline discrepancy metrics and budget estimators.

Histogram-based metrics share one binning convention: equal-width bins
derived from the reference side's value range, padded so that noised
mass stays in range.  The chi-square statistic runs on raw counts with a
small pseudocount in the denominator; the K-L divergence runs on
smoothed, normalized histograms.  Direction conventions are fixed by the
experiment protocol and recorded in its reports.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DataError,
    InsufficientDataError,
    LayeredFeatureBundle,
    PerturbationTriple,
    ShapeMismatchError,
    UsageError,
)
from .microagg import estimate_ranges, ncp


@dataclass(frozen=True)
class HistogramConfig:
    """Shared-bin policy for chi-square and K-L.

    pad extends the reference range on both sides (use ~3 * noise scale
    so perturbed mass is captured).  alpha smooths the normalized K-L
    histograms; chi_alpha is the count-scale pseudocount in the
    chi-square denominator.
    """

    bins: int = 64
    range_policy: str = "from_reference"      # "from_reference" | "fixed"
    pad: float = 0.0
    lo: float = 0.0
    hi: float = 1.0
    alpha: float = 1e-4
    chi_alpha: float = 5e-3

    def __post_init__(self) -> None:
        if self.bins < 2:
            raise UsageError("need at least 2 bins")
        if self.alpha <= 0:
            raise UsageError("alpha must be positive")
        if self.range_policy not in ("from_reference", "fixed"):
            raise UsageError(f"unknown range policy {self.range_policy!r}")


def _all_values(bundle: LayeredFeatureBundle) -> np.ndarray:
    return np.concatenate([lyr.vectors.ravel() for lyr in bundle.layers])


def _check_shapes(a: LayeredFeatureBundle, b: LayeredFeatureBundle) -> None:
    if a.n_layers != b.n_layers:
        raise ShapeMismatchError("bundles differ in layer count")
    for la, lb in zip(a.layers, b.layers):
        if la.vectors.shape != lb.vectors.shape:
            raise ShapeMismatchError(
                f"layer {la.index} shapes differ: {la.vectors.shape} vs {lb.vectors.shape}"
            )


def _edges(reference: np.ndarray, config: HistogramConfig) -> np.ndarray:
    if config.range_policy == "fixed":
        lo, hi = config.lo, config.hi
    else:
        lo = float(reference.min()) - config.pad
        hi = float(reference.max()) + config.pad
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, config.bins + 1)


def chi_square_counts(observed: np.ndarray, expected: np.ndarray, alpha: float) -> float:
    """Pearson statistic sum (O-E)^2 / (E + alpha) over shared bins."""
    O = np.asarray(observed, dtype=np.float64)
    E = np.asarray(expected, dtype=np.float64)
    if O.shape != E.shape:
        raise ShapeMismatchError("histograms differ in bin count")
    return float(np.sum((O - E) ** 2 / (E + alpha)))


def kl_divergence_hist(p_counts: np.ndarray, q_counts: np.ndarray, alpha: float) -> float:
    """sum p ln(p/q) over alpha-smoothed normalized histograms."""
    p = np.asarray(p_counts, dtype=np.float64) + alpha
    q = np.asarray(q_counts, dtype=np.float64) + alpha
    if p.shape != q.shape:
        raise ShapeMismatchError("histograms differ in bin count")
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def rmse(a: LayeredFeatureBundle, b: LayeredFeatureBundle) -> float:
    """Root mean squared elementwise difference over all layers."""
    _check_shapes(a, b)
    num = 0.0
    count = 0
    for la, lb in zip(a.layers, b.layers):
        num += float(np.sum((la.vectors - lb.vectors) ** 2))
        count += la.vectors.size
    return float(np.sqrt(num / count))


def chi_square(a: LayeredFeatureBundle, b: LayeredFeatureBundle, config: HistogramConfig) -> float:
    """Chi-square of b's values against expected counts from a.

    Bins derive from a (the expected/reference side) under the configured
    range policy.
    """
    _check_shapes(a, b)
    va, vb = _all_values(a), _all_values(b)
    edges = _edges(va, config)
    E, _ = np.histogram(va, bins=edges)
    O, _ = np.histogram(vb, bins=edges)
    return chi_square_counts(O, E, config.chi_alpha)


def kl_divergence(a: LayeredFeatureBundle, b: LayeredFeatureBundle, config: HistogramConfig) -> float:
    """K-L divergence of a's histogram from b's, p from a and q from b.

    Bins derive from b (the reference side).
    """
    _check_shapes(a, b)
    va, vb = _all_values(a), _all_values(b)
    edges = _edges(vb, config)
    p, _ = np.histogram(va, bins=edges)
    q, _ = np.histogram(vb, bins=edges)
    return kl_divergence_hist(p, q, config.alpha)


def mmd_rbf(A: np.ndarray, B: np.ndarray, bandwidth: float | str = "median") -> float:
    """Unbiased squared-MMD estimate with an RBF kernel, returned as a root.

    bandwidth="median" uses the median pairwise distance on A union B
    (subsampled deterministically to at most 2000 rows).  Negative
    estimates clamp to zero before the root.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or len(A) == 0 or len(B) == 0:
        raise DataError("mmd_rbf needs two non-empty 2-D sample sets")
    if A.shape[1] != B.shape[1]:
        raise ShapeMismatchError("sample sets differ in dimension")
    if len(A) < 2 or len(B) < 2:
        raise InsufficientDataError("unbiased MMD needs at least 2 samples per set")

    if bandwidth == "median":
        pool = np.vstack([A, B])
        if len(pool) > 2000:
            pool = pool[np.linspace(0, len(pool) - 1, 2000).astype(int)]
        d2 = np.sum((pool[:, None, :] - pool[None, :, :]) ** 2, axis=-1)
        h2 = float(np.median(d2[np.triu_indices(len(pool), 1)]))
        h2 = max(h2, 1e-12)
    else:
        h2 = float(bandwidth) ** 2

    def gram(U: np.ndarray, V: np.ndarray) -> np.ndarray:
        d2 = np.sum((U[:, None, :] - V[None, :, :]) ** 2, axis=-1)
        return np.exp(-d2 / (2.0 * h2))

    m, n = len(A), len(B)
    kaa = gram(A, A)
    kbb = gram(B, B)
    kab = gram(A, B)
    est = (
        (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
        + (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
        - 2.0 * kab.mean()
    )
    return float(np.sqrt(max(est, 0.0)))


def wasserstein1(a: LayeredFeatureBundle, b: LayeredFeatureBundle) -> float:
    """Per-dimension 1-D empirical W1, averaged over dimensions and layers.

    For equal sample counts this is the mean absolute difference of the
    sorted per-dimension samples, which is exact for the 1-D transport
    problem.
    """
    _check_shapes(a, b)
    per_dim: list[float] = []
    for la, lb in zip(a.layers, b.layers):
        xs = np.sort(la.vectors, axis=0)
        ys = np.sort(lb.vectors, axis=0)
        per_dim.extend(np.mean(np.abs(xs - ys), axis=0).tolist())
    return float(np.mean(per_dim))


@dataclass(frozen=True)
class MomentRegModel:
    """Least-squares map from log-moment features to log epsilon."""

    coefficients: np.ndarray     # (n_features + 1,), last entry intercept
    n_train: int
    epsilons: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "coefficients", np.asarray(self.coefficients, dtype=np.float64))


def alignment_features(triples: list[PerturbationTriple]) -> np.ndarray:
    """Log-moment features of one run: mean |delta|, std delta, mean NCP.

    delta = v - t over all noised entries.  NCP is the dispersion of each
    layer's noised sensitive group under its own inter-quantile ranges
    (the toolkit's standard NCP convention); the ratio is scale-stable,
    so the two log-moments carry the budget signal.
    """
    deltas = [t.v - t.t for t in triples if t.v.size]
    if not deltas:
        raise InsufficientDataError("no noised entries to featurize")
    delta = np.concatenate([d.ravel() for d in deltas])
    ncps = []
    for t in triples:
        if t.v.shape[0] >= 2:
            ranges = estimate_ranges(t.v)
            ncps.append(ncp(range(t.v.shape[0]), t.v, None, ranges))
    mean_ncp = float(np.mean(ncps)) if ncps else 1.0
    eps_guard = 1e-300
    return np.array(
        [
            np.log(np.abs(delta).mean() + eps_guard),
            np.log(delta.std() + eps_guard),
            np.log(mean_ncp + eps_guard),
        ]
    )


def moment_reg_fit(training: list[tuple[np.ndarray, float]]) -> MomentRegModel:
    """Fit log epsilon against moment features by least squares."""
    if len({round(float(e), 12) for _, e in training}) < 2:
        raise InsufficientDataError("moment regression needs >= 2 distinct epsilons")
    X = np.array([np.asarray(f, dtype=np.float64) for f, _ in training])
    y = np.log([float(e) for _, e in training])
    if np.allclose(X, X[0]):
        raise DataError("rank-deficient features: moments are constant across runs")
    A = np.hstack([X, np.ones((len(X), 1))])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return MomentRegModel(
        coefficients=coef,
        n_train=len(training),
        epsilons=tuple(sorted({float(e) for _, e in training})),
    )


def moment_reg_predict(model: MomentRegModel, features: np.ndarray) -> float:
    x = np.append(np.asarray(features, dtype=np.float64), 1.0)
    if x.shape[0] != model.coefficients.shape[0]:
        raise ShapeMismatchError("feature vector does not match the fitted model")
    return float(np.exp(x @ model.coefficients))


def noise_mle(residuals: np.ndarray, family: str, c: float = 1.0) -> float:
    """Estimate epsilon by maximum likelihood of the residual scale.

    Laplace: scale = mean |u|; Gaussian: scale = rms(u); epsilon = c / scale.
    """
    u = np.asarray(residuals, dtype=np.float64).ravel()
    if u.size < 10:
        raise InsufficientDataError("noise MLE needs at least 10 residuals")
    fam = family.lower()
    if fam == "laplace":
        scale = float(np.abs(u).mean())
    elif fam == "gaussian":
        scale = float(np.sqrt(np.mean(u**2)))
    else:
        raise UsageError(f"unknown noise family {family!r}")
    if scale == 0.0:
        raise DataError("all residuals are zero: epsilon estimate diverges")
    return c / scale
