"""Calibrated additive noise and sensitive-subset perturbation.

Noise for layer i always comes from the sub-stream (seed, PERTURB, i),
independent of epsilon.  A useful consequence: for a fixed seed the
standard draws are shared across budgets, so noise at epsilon' is an
exact rescaling of noise at epsilon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _rng
from .core import (
    GroupingResult,
    Layer,
    LayeredFeatureBundle,
    PerturbationTriple,
    ReferenceMechanism,
    ShapeMismatchError,
    UsageError,
)


@dataclass(frozen=True)
class NoiseConfig:
    mechanism: ReferenceMechanism
    seed: int = 0
    target: str = "sensitive_only"   # "sensitive_only" | "all"

    def __post_init__(self) -> None:
        if self.target not in ("sensitive_only", "all"):
            raise UsageError(f"unknown noise target {self.target!r}")


def _draw(rng: np.random.Generator, count: int, dim: int, mechanism: ReferenceMechanism) -> np.ndarray:
    if count == 0:
        return np.empty((0, dim), dtype=np.float64)
    if mechanism.family == "laplace":
        return rng.laplace(0.0, mechanism.scale, size=(count, dim))
    return rng.normal(0.0, mechanism.scale, size=(count, dim))


def sample_noise(count: int, dim: int, config: NoiseConfig) -> np.ndarray:
    """Draw an i.i.d. (count, dim) noise matrix at scale c/epsilon."""
    if count < 0 or dim < 1:
        raise UsageError("count must be >= 0 and dim >= 1")
    rng = _rng.substream(config.seed, _rng.PERTURB, 0)
    return _draw(rng, count, dim, config.mechanism)


def perturb_sensitive(
    bundle: LayeredFeatureBundle,
    grouping: GroupingResult,
    config: NoiseConfig,
) -> tuple[LayeredFeatureBundle, list[PerturbationTriple]]:
    """Add noise to sensitive vectors; copy non-sensitive vectors unchanged.

    Returns the perturbed bundle plus one PerturbationTriple per layer
    recording (t, u, v) with v = t + u exactly.  With target="all" every
    vector is noised and the triples cover the whole layer.
    """
    if len(grouping.partitions) != bundle.n_layers:
        raise ShapeMismatchError(
            f"grouping covers {len(grouping.partitions)} layers, "
            f"bundle has {bundle.n_layers}"
        )
    if bundle.kind != "original":
        raise UsageError("perturb_sensitive expects an original bundle")

    new_layers: list[Layer] = []
    triples: list[PerturbationTriple] = []
    for lyr in bundle.layers:
        part = grouping.partition(lyr.index)
        if part.n_vectors != lyr.n_vectors:
            raise ShapeMismatchError(
                f"partition for layer {lyr.index} covers {part.n_vectors} "
                f"vectors, layer has {lyr.n_vectors}"
            )
        if config.target == "all":
            ids = list(range(lyr.n_vectors))
        else:
            ids = part.sorted_sensitive()
        rng = _rng.substream(config.seed, _rng.PERTURB, lyr.index)
        t = lyr.vectors[ids] if ids else np.empty((0, lyr.dim))
        u = _draw(rng, len(ids), lyr.dim, config.mechanism)
        v = t + u
        out = np.array(lyr.vectors, dtype=np.float64)
        if ids:
            out[ids] = v
        new_layers.append(Layer(index=lyr.index, vectors=out, scores=lyr.scores, flags=lyr.flags))
        triples.append(PerturbationTriple(layer_index=lyr.index, ids=tuple(ids), t=t, u=u, v=v))

    perturbed = LayeredFeatureBundle(
        layers=tuple(new_layers), kind="perturbed", metadata=dict(bundle.metadata)
    )
    return perturbed, triples
