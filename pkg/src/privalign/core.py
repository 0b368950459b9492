"""Shared data model: layered feature bundles, partitions, mechanisms.

All types are immutable after construction; numpy payloads are marked
read-only so bundles can be shared freely across workers.  Vectors are
addressed by (layer_index, position) integer ids everywhere — partitions
store ids, never copies, so grouping, perturbation and assessment agree
on identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np


class PrivalignError(Exception):
    """Base class for all toolkit errors."""


class DataError(PrivalignError):
    """Invalid or inconsistent input data (CLI exit code 2)."""


class UsageError(PrivalignError):
    """Invalid invocation or configuration (CLI exit code 1)."""


class DimensionMismatchError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class EmptySensitiveSetError(DataError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def clamp_scores(scores: np.ndarray) -> np.ndarray:
    """Clamp raw scores into [0, 1].

    Cosine similarities may be negative; the score codomain is [0, 1], so
    negative raw values map to 0 and positives are left unscaled.
    """
    return np.clip(np.asarray(scores, dtype=np.float64), 0.0, 1.0)


@dataclass(frozen=True)
class Layer:
    """One layer of a feature hierarchy: vectors plus optional annotations."""

    index: int
    vectors: np.ndarray          # (n_vectors, dim) float64
    scores: np.ndarray | None = None   # per-vector sensitivity score in [0,1]
    flags: np.ndarray | None = None    # per-vector ground-truth sensitive flag

    def __post_init__(self) -> None:
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise DataError(f"layer {self.index}: vectors must be 2-D, got {v.ndim}-D")
        object.__setattr__(self, "vectors", _readonly(v))
        if self.scores is not None:
            object.__setattr__(self, "scores", _readonly(clamp_scores(self.scores)))
        if self.flags is not None:
            object.__setattr__(self, "flags", _readonly(np.asarray(self.flags, dtype=bool)))

    @property
    def n_vectors(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class LayeredFeatureBundle:
    """Hierarchical feature sets, either original or perturbed."""

    layers: tuple[Layer, ...]
    kind: str = "original"                 # "original" | "perturbed"
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def layer(self, index: int) -> Layer:
        for lyr in self.layers:
            if lyr.index == index:
                return lyr
        raise DataError(f"no layer with index {index}")


@dataclass(frozen=True)
class ConceptSet:
    """A task-defined set of sensitive concept labels."""

    concepts: frozenset[str]
    id: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "concepts", frozenset(self.concepts))
        if not self.concepts:
            raise DataError("concept set must be non-empty")


@dataclass(frozen=True)
class ReferenceMechanism:
    """Evaluator-chosen additive noise family with declared budget.

    The noise scale is c / epsilon: Laplace uses it as the scale b,
    Gaussian as the standard deviation sigma.
    """

    family: str                  # "laplace" | "gaussian"
    epsilon: float
    c: float = 1.0

    def __post_init__(self) -> None:
        fam = self.family.lower()
        if fam not in ("laplace", "gaussian"):
            raise UsageError(f"unknown noise family {self.family!r}")
        object.__setattr__(self, "family", fam)
        if not self.epsilon > 0:
            raise UsageError("epsilon must be positive")
        if not self.c > 0:
            raise UsageError("calibration constant c must be positive")

    @property
    def scale(self) -> float:
        return self.c / self.epsilon


@dataclass(frozen=True)
class LayerPartition:
    """Sensitive / non-sensitive split of one layer's vector ids."""

    layer_index: int
    tau: float
    scores: np.ndarray                       # clamped to [0,1]
    sensitive_ids: frozenset[int]
    nonsensitive_ids: frozenset[int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "scores", _readonly(clamp_scores(self.scores)))
        object.__setattr__(self, "sensitive_ids", frozenset(self.sensitive_ids))
        object.__setattr__(self, "nonsensitive_ids", frozenset(self.nonsensitive_ids))

    @property
    def n_vectors(self) -> int:
        return len(self.scores)

    def sorted_sensitive(self) -> list[int]:
        return sorted(self.sensitive_ids)

    def sorted_nonsensitive(self) -> list[int]:
        return sorted(self.nonsensitive_ids)


def make_partition(layer_index: int, scores: np.ndarray, tau: float) -> LayerPartition:
    """Build a partition from scores and a threshold (ties go sensitive)."""
    s = clamp_scores(scores)
    sens = np.flatnonzero(s >= tau)
    nons = np.flatnonzero(s < tau)
    return LayerPartition(
        layer_index=layer_index,
        tau=float(tau),
        scores=s,
        sensitive_ids=frozenset(int(i) for i in sens),
        nonsensitive_ids=frozenset(int(i) for i in nons),
    )


@dataclass(frozen=True)
class PerturbationTriple:
    """Raw values t, injected noise u and observed values v for one layer.

    Invariant: v = t + u holds exactly (v is computed as t + u, never
    re-derived from rounded storage).
    """

    layer_index: int
    ids: tuple[int, ...]       # vector ids the rows correspond to, ascending
    t: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        for name in ("t", "u", "v"):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name), dtype=np.float64)))
        if not (self.t.shape == self.u.shape == self.v.shape):
            raise ShapeMismatchError("t, u, v must have identical shapes")
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))


@dataclass(frozen=True)
class GroupingResult:
    """Per-layer partitions produced by one grouping strategy."""

    partitions: tuple[LayerPartition, ...]
    strategy: str
    ncp_sensitive: tuple[float, ...] | None = None
    ncp_nonsensitive: tuple[float, ...] | None = None
    mdav_cluster_sizes: tuple[tuple[int, ...], ...] | None = None
    link_sensitive: dict[int, frozenset[int]] | None = None
    link_nonsensitive: dict[int, frozenset[int]] | None = None
    promoted: dict[int, frozenset[int]] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "partitions", tuple(self.partitions))

    def partition(self, layer_index: int) -> LayerPartition:
        for p in self.partitions:
            if p.layer_index == layer_index:
                return p
        raise DataError(f"no partition for layer {layer_index}")


def validate_bundle(bundle: LayeredFeatureBundle) -> list[str]:
    """Check bundle invariants; returns a list of violations (empty = ok).

    Violations are data, not failures: callers decide whether to raise.
    """
    violations: list[str] = []
    if bundle.kind not in ("original", "perturbed"):
        violations.append(f"unknown bundle kind {bundle.kind!r}")
    if bundle.n_layers < 1:
        violations.append("bundle has no layers")
        return violations
    expected = 1
    for lyr in bundle.layers:
        if lyr.index != expected:
            violations.append(
                f"non-contiguous layer indices: expected {expected}, found {lyr.index}"
            )
            expected = lyr.index + 1
        else:
            expected += 1
        if lyr.n_vectors < 1 or lyr.dim < 1:
            violations.append(f"empty layer {lyr.index}")
            continue
        if not np.isfinite(lyr.vectors).all():
            violations.append(f"non-finite value, layer {lyr.index}")
        if lyr.scores is not None and len(lyr.scores) != lyr.n_vectors:
            violations.append(f"score count mismatch, layer {lyr.index}")
        if lyr.flags is not None and len(lyr.flags) != lyr.n_vectors:
            violations.append(f"flag count mismatch, layer {lyr.index}")
    return violations


def pool_sensitive_features(
    bundle: LayeredFeatureBundle,
    grouping: GroupingResult,
    layer_selection: Iterable[int] | None = None,
) -> np.ndarray:
    """Concatenate sensitive-group vectors from the selected layers.

    Rows are ordered by (layer, id).  All selected layers must share one
    feature dimension; mixed dimensions require per-layer assessment.
    """
    if len(grouping.partitions) != bundle.n_layers:
        raise ShapeMismatchError(
            f"grouping has {len(grouping.partitions)} partitions for "
            f"{bundle.n_layers} layers"
        )
    selection = sorted(layer_selection) if layer_selection is not None else [
        lyr.index for lyr in bundle.layers
    ]
    dims = {bundle.layer(i).dim for i in selection}
    if len(dims) > 1:
        raise DimensionMismatchError(
            f"selected layers have mixed dimensions {sorted(dims)}; "
            "assess per layer instead"
        )
    blocks = []
    for i in selection:
        lyr = bundle.layer(i)
        ids = grouping.partition(i).sorted_sensitive()
        if ids:
            blocks.append(lyr.vectors[ids])
    if not blocks:
        dim = dims.pop() if dims else 0
        return np.empty((0, dim), dtype=np.float64)
    return np.concatenate(blocks, axis=0)
