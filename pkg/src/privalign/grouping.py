"""Sensitivity scoring, thresholding and the three partitioning strategies.

The bottom-up strategy scores and thresholds each layer independently.
The top-down strategy starts at the top layer and walks down, mapping the
upper layer's sensitive group through a correspondence operator and
promoting matching lower-layer vectors whose score clears a relaxed
threshold.  The random strategy draws sensitive sets of given sizes
uniformly, as a baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _rng
from .core import (
    ConceptSet,
    DataError,
    GroupingResult,
    Layer,
    LayerPartition,
    LayeredFeatureBundle,
    UsageError,
    clamp_scores,
    make_partition,
)
from .microagg import estimate_ranges, l2_normalize, mdav, ncp


class MissingPrototypeError(DataError):
    pass


class CorrespondenceError(DataError):
    pass


@dataclass(frozen=True)
class SensitivityScorer:
    """How per-vector sensitivity scores are obtained.

    kinds:
      ground_truth — derive scores from planted boolean flags: sensitive
        vectors get 0.75 + 0.25 * noise, non-sensitive 0.25 * noise, with
        seeded rank noise. The two score ranges never overlap, so any
        threshold strictly between 0.25 and 0.75 recovers the flags.
      prototype — max over concepts of the clamped cosine similarity to
        the concept's embedding.
      external  — scores already attached to the bundle's layers.
    """

    kind: str
    prototypes: dict[str, np.ndarray] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("ground_truth", "prototype", "external"):
            raise UsageError(f"unknown scorer kind {self.kind!r}")


@dataclass(frozen=True)
class ThresholdPolicy:
    """Quantile threshold (default: 90th percentile) or a fixed tau."""

    kind: str = "quantile"
    q: float = 0.90
    tau: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("quantile", "fixed"):
            raise UsageError(f"unknown threshold policy {self.kind!r}")
        if self.kind == "quantile" and not (0.0 < self.q < 1.0):
            raise UsageError("quantile must be in (0, 1)")


@dataclass(frozen=True)
class MdavConfig:
    """Microaggregation diagnostics for the grouping pass."""

    enabled: bool = True
    k: int = 8
    normalize: bool = True                     # l2-normalize before MDAV/NCP
    range_quantiles: tuple[float, float] = (0.05, 0.95)


@dataclass(frozen=True)
class LinkSets:
    """Cross-layer links landed in layer i-1 by the top-down pass."""

    upper_index: int
    sensitive: frozenset[int]
    nonsensitive: frozenset[int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "sensitive", frozenset(self.sensitive))
        object.__setattr__(self, "nonsensitive", frozenset(self.nonsensitive))


def score_layer(
    layer: Layer,
    scorer: SensitivityScorer,
    concept_set: ConceptSet | None = None,
) -> np.ndarray:
    """Per-vector sensitivity scores in [0, 1]."""
    if scorer.kind == "ground_truth":
        if layer.flags is None:
            raise DataError(f"layer {layer.index} has no ground-truth flags")
        noise = _rng.substream(scorer.seed, _rng.SCORES, layer.index).random(layer.n_vectors)
        return np.where(layer.flags, 0.75 + 0.25 * noise, 0.25 * noise)

    if scorer.kind == "external":
        if layer.scores is None:
            raise DataError(f"layer {layer.index} has no attached scores")
        return np.array(layer.scores, dtype=np.float64)

    if concept_set is None:
        raise UsageError("prototype scoring requires a concept set")
    protos = scorer.prototypes or {}
    vecs = l2_normalize(layer.vectors)
    best = np.full(layer.n_vectors, -np.inf)
    for concept in sorted(concept_set.concepts):
        if concept not in protos:
            raise MissingPrototypeError(f"no prototype embedding for concept {concept!r}")
        q = np.asarray(protos[concept], dtype=np.float64)
        if q.shape[0] != layer.dim:
            raise MissingPrototypeError(
                f"prototype for {concept!r} has dim {q.shape[0]}, layer "
                f"{layer.index} has dim {layer.dim}"
            )
        qn = q / max(np.linalg.norm(q), 1e-12)
        best = np.maximum(best, vecs @ qn)
    return clamp_scores(best)


def partition_layer(
    scores: np.ndarray,
    policy: ThresholdPolicy,
    layer_index: int = 1,
) -> LayerPartition:
    """Threshold scores into a partition; ties at tau count as sensitive."""
    s = clamp_scores(scores)
    if s.size < 1:
        raise DataError("cannot partition an empty score vector")
    if policy.kind == "quantile":
        tau = float(np.quantile(s, policy.q))   # linear interpolation
    else:
        tau = float(policy.tau)
    return make_partition(layer_index, s, tau)


def _layer_diagnostics(layer: Layer, part: LayerPartition, cfg: MdavConfig):
    vecs = l2_normalize(layer.vectors) if cfg.normalize else layer.vectors
    ranges = estimate_ranges(vecs, *cfg.range_quantiles)
    ncp_s = ncp(part.sorted_sensitive(), vecs, None, ranges) if part.sensitive_ids else 0.0
    ncp_n = ncp(part.sorted_nonsensitive(), vecs, None, ranges) if part.nonsensitive_ids else 0.0
    sizes: tuple[int, ...] = ()
    if layer.n_vectors >= cfg.k:
        clusters = mdav(vecs, cfg.k)
        sizes = tuple(len(c.member_ids) for c in clusters)
    return ncp_s, ncp_n, sizes


def bua(
    bundle: LayeredFeatureBundle,
    scorer: SensitivityScorer,
    policy: ThresholdPolicy,
    concept_set: ConceptSet | None = None,
    mdav_config: MdavConfig | None = None,
) -> GroupingResult:
    """Bottom-up pass: score and partition each layer from 1 to n."""
    partitions = []
    ncp_s, ncp_n, sizes = [], [], []
    for lyr in bundle.layers:
        scores = score_layer(lyr, scorer, concept_set)
        part = partition_layer(scores, policy, lyr.index)
        partitions.append(part)
        if mdav_config is not None and mdav_config.enabled:
            s, n, sz = _layer_diagnostics(lyr, part, mdav_config)
            ncp_s.append(s)
            ncp_n.append(n)
            sizes.append(sz)
    diag = mdav_config is not None and mdav_config.enabled
    return GroupingResult(
        partitions=tuple(partitions),
        strategy="bua",
        ncp_sensitive=tuple(ncp_s) if diag else None,
        ncp_nonsensitive=tuple(ncp_n) if diag else None,
        mdav_cluster_sizes=tuple(sizes) if diag else None,
    )


def _grid_shape(bundle: LayeredFeatureBundle, index: int) -> tuple[int, int] | None:
    raw = bundle.metadata.get(f"grid.{index}")
    if raw is None:
        return None
    try:
        h, w = raw.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise CorrespondenceError(f"bad grid metadata for layer {index}: {raw!r}") from exc


def correspondence_map(
    bundle: LayeredFeatureBundle,
    upper_index: int,
    kind: str = "auto",
) -> np.ndarray:
    """Map vector ids of layer i to ids of layer i-1.

    Identity when the two layers have equal cardinality; otherwise nearest
    grid-cell-center correspondence using per-layer "grid.<i>" = "HxW"
    metadata (vectors are image-major, row-major within the grid).
    """
    upper = bundle.layer(upper_index)
    lower = bundle.layer(upper_index - 1)
    if kind not in ("auto", "identity", "nearest_spatial"):
        raise UsageError(f"unknown correspondence kind {kind!r}")
    if kind == "identity" or (kind == "auto" and upper.n_vectors == lower.n_vectors):
        if upper.n_vectors != lower.n_vectors:
            raise CorrespondenceError(
                f"identity correspondence needs equal cardinalities, layer "
                f"{upper_index} has {upper.n_vectors} vs {lower.n_vectors}"
            )
        return np.arange(upper.n_vectors)

    gu = _grid_shape(bundle, upper_index)
    gl = _grid_shape(bundle, upper_index - 1)
    if gu is None or gl is None:
        raise CorrespondenceError(
            f"layers {upper_index} and {upper_index - 1} differ in cardinality "
            "and lack grid metadata for spatial correspondence"
        )
    hu, wu = gu
    hl, wl = gl
    if upper.n_vectors % (hu * wu) or lower.n_vectors % (hl * wl):
        raise CorrespondenceError("layer cardinality is not a multiple of its grid size")
    n_images = upper.n_vectors // (hu * wu)
    if lower.n_vectors // (hl * wl) != n_images:
        raise CorrespondenceError("layers cover different image counts")

    pos = np.arange(hu * wu)
    r = pos // wu
    c = pos % wu
    # nearest cell center in the lower grid
    rl = np.clip(np.round((r + 0.5) * hl / hu - 0.5).astype(int), 0, hl - 1)
    cl = np.clip(np.round((c + 0.5) * wl / wu - 0.5).astype(int), 0, wl - 1)
    per_image = rl * wl + cl
    out = np.concatenate([g * hl * wl + per_image for g in range(n_images)])
    return out


def tda(
    bundle: LayeredFeatureBundle,
    scorer: SensitivityScorer,
    policy: ThresholdPolicy,
    concept_set: ConceptSet | None = None,
    mdav_config: MdavConfig | None = None,
    correspondence: str = "auto",
    refine_alpha: float = 0.9,
) -> GroupingResult:
    """Top-down pass with cross-layer links and score-respecting promotion.

    A lower-layer vector reached from the upper sensitive group has its
    score boosted by 1/alpha (alpha=1 disables promotion, alpha=0 force-
    includes every reached vector), so it turns sensitive exactly when its
    raw score is at least alpha * tau.  The partition keeps the boosted
    scores, which preserves the score-vs-threshold invariant.
    """
    if not (0.0 <= refine_alpha <= 1.0):
        raise UsageError("refine_alpha must be in [0, 1]")
    n = bundle.n_layers
    by_index: dict[int, LayerPartition] = {}
    links_s: dict[int, frozenset[int]] = {}
    links_n: dict[int, frozenset[int]] = {}
    promoted: dict[int, frozenset[int]] = {}
    ncp_s: dict[int, float] = {}
    ncp_n: dict[int, float] = {}
    sizes: dict[int, tuple[int, ...]] = {}

    def finish(layer: Layer, part: LayerPartition) -> None:
        by_index[layer.index] = part
        if mdav_config is not None and mdav_config.enabled:
            s, m, sz = _layer_diagnostics(layer, part, mdav_config)
            ncp_s[layer.index] = s
            ncp_n[layer.index] = m
            sizes[layer.index] = sz

    top = bundle.layers[-1]
    finish(top, partition_layer(score_layer(top, scorer, concept_set), policy, top.index))

    for i in range(n, 1, -1):
        lower = bundle.layer(i - 1)
        upper_part = by_index[i]
        scores = clamp_scores(score_layer(lower, scorer, concept_set))
        prelim = partition_layer(scores, policy, lower.index)

        mapping = correspondence_map(bundle, i, correspondence)
        reached_s = frozenset(int(mapping[j]) for j in upper_part.sensitive_ids)
        reached_n = frozenset(int(mapping[j]) for j in upper_part.nonsensitive_ids)

        # promote reached non-sensitive vectors whose score clears the
        # relaxed threshold; only promoted ids keep their boosted score,
        # so an all-agreeing pass leaves the partition untouched
        final = np.array(scores)
        rising = frozenset()
        candidates = sorted(reached_s - prelim.sensitive_ids)
        if candidates:
            raw = scores[candidates]
            boost = np.ones_like(raw) if refine_alpha == 0.0 else np.minimum(1.0, raw / refine_alpha)
            hit = boost >= prelim.tau
            rising = frozenset(int(c) for c, h in zip(candidates, hit) if h)
            final[candidates] = np.where(hit, boost, raw)
        refined = make_partition(lower.index, final, prelim.tau)

        promoted[i] = rising
        links_s[i] = frozenset(reached_s & refined.sensitive_ids)
        links_n[i] = frozenset(reached_n & refined.nonsensitive_ids)
        finish(lower, refined)

    diag = mdav_config is not None and mdav_config.enabled
    order = sorted(by_index)
    return GroupingResult(
        partitions=tuple(by_index[i] for i in order),
        strategy="tda",
        ncp_sensitive=tuple(ncp_s[i] for i in order) if diag else None,
        ncp_nonsensitive=tuple(ncp_n[i] for i in order) if diag else None,
        mdav_cluster_sizes=tuple(sizes[i] for i in order) if diag else None,
        link_sensitive=links_s,
        link_nonsensitive=links_n,
        promoted=promoted,
    )


def random_partition(
    bundle: LayeredFeatureBundle,
    sizes: dict[int, int] | list[int],
    seed: int = 0,
) -> GroupingResult:
    """Uniformly random sensitive sets of the requested per-layer sizes."""
    if not isinstance(sizes, dict):
        sizes = {lyr.index: int(s) for lyr, s in zip(bundle.layers, sizes)}
    partitions = []
    for lyr in bundle.layers:
        size = int(sizes.get(lyr.index, 0))
        if size > lyr.n_vectors:
            raise DataError(
                f"requested {size} sensitive vectors from layer {lyr.index} "
                f"of {lyr.n_vectors}"
            )
        rng = _rng.substream(seed, _rng.GROUPING, lyr.index)
        picked = rng.choice(lyr.n_vectors, size=size, replace=False) if size else np.empty(0, int)
        scores = np.zeros(lyr.n_vectors)
        scores[np.sort(picked)] = 1.0
        partitions.append(make_partition(lyr.index, scores, 0.5))
    return GroupingResult(partitions=tuple(partitions), strategy="random")
