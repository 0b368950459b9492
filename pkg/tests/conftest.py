from __future__ import annotations

import numpy as np
import pytest

from privalign import (
    GroupingResult,
    LayeredFeatureBundle,
    SyntheticConfig,
    generate_synthetic,
)
from privalign.core import Layer, make_partition


@pytest.fixture()
def synthetic_bundle():
    bundle, flags = generate_synthetic(SyntheticConfig(), seed=0)
    return bundle, flags


def single_layer_bundle(vectors: np.ndarray, flags=None, scores=None) -> LayeredFeatureBundle:
    return LayeredFeatureBundle(
        layers=(Layer(index=1, vectors=vectors, flags=flags, scores=scores),),
        kind="original",
    )


def all_sensitive_grouping(bundle: LayeredFeatureBundle) -> GroupingResult:
    parts = tuple(
        make_partition(lyr.index, np.ones(lyr.n_vectors), 0.5) for lyr in bundle.layers
    )
    return GroupingResult(partitions=parts, strategy="manual")


def flags_grouping(bundle: LayeredFeatureBundle) -> GroupingResult:
    parts = []
    for lyr in bundle.layers:
        scores = np.where(lyr.flags, 1.0, 0.0)
        parts.append(make_partition(lyr.index, scores, 0.5))
    return GroupingResult(partitions=tuple(parts), strategy="manual")
