from __future__ import annotations

import numpy as np
import pytest

from privalign import (
    DimensionMismatchError,
    LayeredFeatureBundle,
    PerturbationTriple,
    ReferenceMechanism,
    UsageError,
    pool_sensitive_features,
    validate_bundle,
)
from privalign.core import Layer, clamp_scores, make_partition

from conftest import flags_grouping


def test_validate_well_formed_synthetic(synthetic_bundle):
    bundle, _ = synthetic_bundle
    assert validate_bundle(bundle) == []


def test_validate_reports_nan_with_layer():
    good = np.zeros((3, 2))
    bad = np.zeros((3, 2))
    bad[1, 0] = np.nan
    bundle = LayeredFeatureBundle(
        layers=(Layer(index=1, vectors=good), Layer(index=2, vectors=bad)),
    )
    violations = validate_bundle(bundle)
    assert any("non-finite" in v and "layer 2" in v for v in violations)


def test_validate_reports_noncontiguous_indices():
    bundle = LayeredFeatureBundle(
        layers=(Layer(index=1, vectors=np.zeros((2, 2))), Layer(index=3, vectors=np.zeros((2, 2)))),
    )
    violations = validate_bundle(bundle)
    assert any("non-contiguous" in v for v in violations)


def test_validate_infinity_is_a_violation():
    bad = np.full((2, 2), np.inf)
    bundle = LayeredFeatureBundle(layers=(Layer(index=1, vectors=bad),))
    assert any("non-finite" in v for v in validate_bundle(bundle))


def test_pool_counts_sum_of_sensitive_sizes(synthetic_bundle):
    bundle, _ = synthetic_bundle
    grouping = flags_grouping(bundle)
    pooled = pool_sensitive_features(bundle, grouping)
    # 4 layers x 60 sensitive vectors of dimension 8
    assert pooled.shape == (240, 8)


def test_pool_preserves_layer_then_id_order(synthetic_bundle):
    bundle, _ = synthetic_bundle
    grouping = flags_grouping(bundle)
    pooled = pool_sensitive_features(bundle, grouping, [2, 1])
    ids1 = grouping.partition(1).sorted_sensitive()
    np.testing.assert_array_equal(pooled[: len(ids1)], bundle.layer(1).vectors[ids1])


def test_pool_empty_sensitive_group():
    vectors = np.random.default_rng(0).normal(size=(5, 3))
    bundle = LayeredFeatureBundle(layers=(Layer(index=1, vectors=vectors),))
    part = make_partition(1, np.zeros(5), 0.5)
    from privalign import GroupingResult

    grouping = GroupingResult(partitions=(part,), strategy="manual")
    pooled = pool_sensitive_features(bundle, grouping, [1])
    assert pooled.shape == (0, 3)


def test_pool_mixed_dimensions_is_an_error():
    rng = np.random.default_rng(0)
    bundle = LayeredFeatureBundle(
        layers=(
            Layer(index=1, vectors=rng.normal(size=(4, 8))),
            Layer(index=2, vectors=rng.normal(size=(4, 16))),
        ),
    )
    from privalign import GroupingResult

    grouping = GroupingResult(
        partitions=(
            make_partition(1, np.ones(4), 0.5),
            make_partition(2, np.ones(4), 0.5),
        ),
        strategy="manual",
    )
    with pytest.raises(DimensionMismatchError):
        pool_sensitive_features(bundle, grouping, [1, 2])


def test_partition_is_disjoint_and_exhaustive():
    scores = np.linspace(0, 1, 11)
    part = make_partition(1, scores, 0.42)
    assert part.sensitive_ids & part.nonsensitive_ids == frozenset()
    assert part.sensitive_ids | part.nonsensitive_ids == frozenset(range(11))
    assert all(part.scores[i] >= part.tau for i in part.sensitive_ids)
    assert all(part.scores[i] < part.tau for i in part.nonsensitive_ids)


def test_scores_clamped_to_unit_interval():
    out = clamp_scores(np.array([-0.5, 0.2, 1.7]))
    np.testing.assert_allclose(out, [0.0, 0.2, 1.0])


def test_triple_reconstruction_is_exact():
    rng = np.random.default_rng(3)
    t = rng.normal(size=(10, 4))
    u = rng.normal(size=(10, 4))
    triple = PerturbationTriple(layer_index=1, ids=tuple(range(10)), t=t, u=u, v=t + u)
    assert np.max(np.abs(triple.v - (triple.t + triple.u))) == 0.0


def test_mechanism_scale_and_validation():
    mech = ReferenceMechanism(family="laplace", epsilon=0.1, c=2.0)
    assert mech.scale == pytest.approx(20.0)
    with pytest.raises(UsageError):
        ReferenceMechanism(family="laplace", epsilon=-1.0)
    with pytest.raises(UsageError):
        ReferenceMechanism(family="cauchy", epsilon=1.0)
