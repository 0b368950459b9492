from __future__ import annotations

import numpy as np
import pytest

from privalign import (
    ConceptSet,
    CorrespondenceError,
    DataError,
    LayeredFeatureBundle,
    MdavConfig,
    MissingPrototypeError,
    SensitivityScorer,
    ThresholdPolicy,
    bua,
    correspondence_map,
    partition_layer,
    random_partition,
    score_layer,
    tda,
)
from privalign.core import Layer

from conftest import single_layer_bundle


def brute_force_count_at_quantile(scores, q):
    tau = np.quantile(scores, q)
    return int(np.sum(scores >= tau))


# --- scoring ------------------------------------------------------------

def test_prototype_score_identical_direction_is_one():
    proto = np.array([1.0, 2.0, 2.0])
    layer = Layer(index=1, vectors=np.array([proto * 3.0]))
    scorer = SensitivityScorer(kind="prototype", prototypes={"person": proto})
    scores = score_layer(layer, scorer, ConceptSet(concepts={"person"}))
    assert scores[0] == pytest.approx(1.0)


def test_prototype_score_orthogonal_clamps_to_zero():
    layer = Layer(index=1, vectors=np.array([[1.0, 0.0], [-1.0, 0.0]]))
    scorer = SensitivityScorer(kind="prototype", prototypes={"car": np.array([0.0, 1.0])})
    scores = score_layer(layer, scorer, ConceptSet(concepts={"car"}))
    np.testing.assert_allclose(scores, [0.0, 0.0])


def test_prototype_score_takes_max_over_concepts():
    v = np.array([[1.0, 0.0]])
    protos = {
        "a": np.array([0.3, np.sqrt(1 - 0.09)]),   # cos = 0.3
        "b": np.array([0.7, np.sqrt(1 - 0.49)]),   # cos = 0.7
    }
    layer = Layer(index=1, vectors=v)
    scorer = SensitivityScorer(kind="prototype", prototypes=protos)
    scores = score_layer(layer, scorer, ConceptSet(concepts={"a", "b"}))
    assert scores[0] == pytest.approx(0.7)


def test_prototype_missing_concept_is_an_error():
    layer = Layer(index=1, vectors=np.eye(2))
    scorer = SensitivityScorer(kind="prototype", prototypes={})
    with pytest.raises(MissingPrototypeError):
        score_layer(layer, scorer, ConceptSet(concepts={"person"}))


def test_ground_truth_scores_separate_cleanly(synthetic_bundle):
    bundle, flags = synthetic_bundle
    scorer = SensitivityScorer(kind="ground_truth", seed=0)
    for lyr, f in zip(bundle.layers, flags):
        s = score_layer(lyr, scorer)
        assert s[f].min() >= 0.75
        assert s[~f].max() < 0.25


def test_external_scorer_uses_attached_scores():
    scores = np.array([0.1, 0.9, 0.4])
    layer = Layer(index=1, vectors=np.zeros((3, 2)), scores=scores)
    out = score_layer(layer, SensitivityScorer(kind="external"))
    np.testing.assert_allclose(out, scores)
    bare = Layer(index=1, vectors=np.zeros((3, 2)))
    with pytest.raises(DataError):
        score_layer(bare, SensitivityScorer(kind="external"))


# --- thresholding -------------------------------------------------------

def test_quantile_count_matches_brute_force():
    rng = np.random.default_rng(0)
    scores = rng.permutation(np.linspace(0.001, 0.999, 200))
    part = partition_layer(scores, ThresholdPolicy(kind="quantile", q=0.9))
    assert len(part.sensitive_ids) == 20
    assert len(part.sensitive_ids) == brute_force_count_at_quantile(scores, 0.9)


def test_fixed_threshold_above_codomain_gives_empty_group():
    part = partition_layer(np.linspace(0, 1, 10), ThresholdPolicy(kind="fixed", tau=1.1))
    assert part.sensitive_ids == frozenset()


def test_all_equal_scores_tie_to_sensitive():
    part = partition_layer(np.full(7, 0.4), ThresholdPolicy(kind="quantile", q=0.9))
    assert len(part.sensitive_ids) == 7


# --- BUA ----------------------------------------------------------------

def test_bua_recovers_planted_partition(synthetic_bundle):
    bundle, flags = synthetic_bundle
    result = bua(
        bundle,
        SensitivityScorer(kind="ground_truth", seed=0),
        ThresholdPolicy(kind="quantile", q=0.70),
    )
    for part, f in zip(result.partitions, flags):
        assert part.sensitive_ids == frozenset(np.flatnonzero(f))


def test_bua_single_layer():
    rng = np.random.default_rng(1)
    bundle = single_layer_bundle(rng.normal(size=(20, 4)), flags=rng.random(20) < 0.3)
    result = bua(
        bundle,
        SensitivityScorer(kind="ground_truth", seed=0),
        ThresholdPolicy(kind="quantile", q=0.7),
    )
    assert len(result.partitions) == 1


def test_bua_ncp_diagnostics_when_mdav_enabled(synthetic_bundle):
    bundle, _ = synthetic_bundle
    result = bua(
        bundle,
        SensitivityScorer(kind="ground_truth", seed=0),
        ThresholdPolicy(kind="quantile", q=0.70),
        mdav_config=MdavConfig(enabled=True, k=8),
    )
    assert result.ncp_sensitive is not None and len(result.ncp_sensitive) == 4
    assert result.ncp_nonsensitive is not None
    assert all(v >= 0 for v in result.ncp_sensitive)
    assert result.mdav_cluster_sizes is not None
    assert all(min(sizes) >= 8 for sizes in result.mdav_cluster_sizes)


def test_bua_is_deterministic(synthetic_bundle):
    bundle, _ = synthetic_bundle
    scorer = SensitivityScorer(kind="ground_truth", seed=0)
    policy = ThresholdPolicy(kind="quantile", q=0.7)
    a = bua(bundle, scorer, policy)
    b = bua(bundle, scorer, policy)
    for pa, pb in zip(a.partitions, b.partitions):
        assert pa.sensitive_ids == pb.sensitive_ids
        assert pa.tau == pb.tau


# --- TDA ----------------------------------------------------------------

def test_tda_matches_bua_on_synthetic(synthetic_bundle):
    bundle, _ = synthetic_bundle
    scorer = SensitivityScorer(kind="ground_truth", seed=0)
    policy = ThresholdPolicy(kind="quantile", q=0.70)
    top = tda(bundle, scorer, policy)
    bottom = bua(bundle, scorer, policy)
    for pt, pb in zip(top.partitions, bottom.partitions):
        assert pt.sensitive_ids == pb.sensitive_ids
        assert pt.nonsensitive_ids == pb.nonsensitive_ids


def test_tda_links_are_subsets_after_refinement(synthetic_bundle):
    bundle, _ = synthetic_bundle
    result = tda(
        bundle,
        SensitivityScorer(kind="ground_truth", seed=0),
        ThresholdPolicy(kind="quantile", q=0.70),
    )
    for upper in range(2, 5):
        part = result.partition(upper - 1)
        assert result.link_sensitive[upper] <= part.sensitive_ids
        assert result.link_nonsensitive[upper] <= part.nonsensitive_ids


def test_tda_identity_links_equal_lower_sensitive_group(synthetic_bundle):
    # identical per-layer partitions + identity correspondence: the
    # sensitive link set is exactly the lower sensitive group
    bundle, flags = synthetic_bundle
    result = tda(
        bundle,
        SensitivityScorer(kind="ground_truth", seed=0),
        ThresholdPolicy(kind="quantile", q=0.70),
    )
    # planted flags are layer-independent draws, so intersect explicitly
    for upper in range(2, 5):
        upper_sens = result.partition(upper).sensitive_ids
        lower_sens = result.partition(upper - 1).sensitive_ids
        assert result.link_sensitive[upper] == upper_sens & lower_sens


def test_tda_promotion_respects_relaxed_threshold():
    # Upper layer all sensitive; lower scores straddle alpha * tau.
    vec = np.zeros((4, 2))
    upper = Layer(index=2, vectors=vec, scores=np.array([1.0, 1.0, 1.0, 1.0]))
    lower = Layer(index=1, vectors=vec, scores=np.array([0.95, 0.85, 0.50, 0.10]))
    bundle = LayeredFeatureBundle(layers=(lower, upper))
    result = tda(
        bundle,
        SensitivityScorer(kind="external"),
        ThresholdPolicy(kind="fixed", tau=0.9),
        refine_alpha=0.9,
    )
    part = result.partition(1)
    # 0.85 >= 0.9 * 0.9 = 0.81 promotes; 0.50 and 0.10 do not
    assert part.sensitive_ids == frozenset({0, 1})
    assert result.promoted[2] == frozenset({1})


def test_tda_alpha_one_disables_promotion():
    vec = np.zeros((3, 2))
    upper = Layer(index=2, vectors=vec, scores=np.array([1.0, 1.0, 1.0]))
    lower = Layer(index=1, vectors=vec, scores=np.array([0.95, 0.85, 0.1]))
    bundle = LayeredFeatureBundle(layers=(lower, upper))
    result = tda(
        bundle,
        SensitivityScorer(kind="external"),
        ThresholdPolicy(kind="fixed", tau=0.9),
        refine_alpha=1.0,
    )
    assert result.partition(1).sensitive_ids == frozenset({0})
    assert result.promoted[2] == frozenset()


def test_tda_refinement_never_shrinks_sensitive_sets(synthetic_bundle):
    bundle, _ = synthetic_bundle
    scorer = SensitivityScorer(kind="ground_truth", seed=0)
    policy = ThresholdPolicy(kind="quantile", q=0.70)
    refined = tda(bundle, scorer, policy, refine_alpha=0.5)
    prelim = bua(bundle, scorer, policy)
    for pr, pb in zip(refined.partitions, prelim.partitions):
        assert pr.sensitive_ids >= pb.sensitive_ids


def test_tda_disjoint_layers_have_empty_links():
    vec = np.zeros((4, 2))
    upper = Layer(index=2, vectors=vec, scores=np.array([1.0, 1.0, 0.0, 0.0]))
    lower = Layer(index=1, vectors=vec, scores=np.array([0.0, 0.0, 1.0, 1.0]))
    bundle = LayeredFeatureBundle(layers=(lower, upper))
    result = tda(
        bundle,
        SensitivityScorer(kind="external"),
        ThresholdPolicy(kind="fixed", tau=0.9),
        refine_alpha=1.0,
    )
    assert result.link_sensitive[2] == frozenset()
    assert result.link_nonsensitive[2] == frozenset()


# --- correspondence -----------------------------------------------------

def test_correspondence_identity_for_equal_cardinality(synthetic_bundle):
    bundle, _ = synthetic_bundle
    mapping = correspondence_map(bundle, 2)
    np.testing.assert_array_equal(mapping, np.arange(200))


def test_correspondence_nearest_grid():
    rng = np.random.default_rng(0)
    lower = Layer(index=1, vectors=rng.normal(size=(9, 3)))    # 3x3
    upper = Layer(index=2, vectors=rng.normal(size=(4, 3)))    # 2x2
    bundle = LayeredFeatureBundle(
        layers=(lower, upper), metadata={"grid.1": "3x3", "grid.2": "2x2"}
    )
    mapping = correspondence_map(bundle, 2)
    # upper centers at 1/4 and 3/4 land on lower corner cells (centers 1/6, 5/6)
    np.testing.assert_array_equal(mapping, [0, 2, 6, 8])


def test_correspondence_multi_image_blocks():
    rng = np.random.default_rng(1)
    lower = Layer(index=1, vectors=rng.normal(size=(18, 2)))   # 2 images x 3x3
    upper = Layer(index=2, vectors=rng.normal(size=(2, 2)))    # 2 images x 1x1
    bundle = LayeredFeatureBundle(
        layers=(lower, upper), metadata={"grid.1": "3x3", "grid.2": "1x1"}
    )
    mapping = correspondence_map(bundle, 2)
    # each image's single upper cell maps to its own image's center cell
    np.testing.assert_array_equal(mapping, [4, 13])


def test_correspondence_missing_grids_is_an_error():
    rng = np.random.default_rng(0)
    bundle = LayeredFeatureBundle(
        layers=(
            Layer(index=1, vectors=rng.normal(size=(16, 3))),
            Layer(index=2, vectors=rng.normal(size=(4, 3))),
        )
    )
    with pytest.raises(CorrespondenceError):
        correspondence_map(bundle, 2)


# --- random baseline ----------------------------------------------------

def test_random_partition_sizes_and_determinism(synthetic_bundle):
    bundle, _ = synthetic_bundle
    a = random_partition(bundle, {i: 60 for i in range(1, 5)}, seed=4)
    b = random_partition(bundle, {i: 60 for i in range(1, 5)}, seed=4)
    for pa, pb in zip(a.partitions, b.partitions):
        assert len(pa.sensitive_ids) == 60
        assert pa.sensitive_ids == pb.sensitive_ids
    c = random_partition(bundle, {i: 60 for i in range(1, 5)}, seed=5)
    assert any(
        pa.sensitive_ids != pc.sensitive_ids for pa, pc in zip(a.partitions, c.partitions)
    )


def test_random_partition_size_zero_and_overflow(synthetic_bundle):
    bundle, _ = synthetic_bundle
    empty = random_partition(bundle, {i: 0 for i in range(1, 5)}, seed=0)
    assert all(len(p.sensitive_ids) == 0 for p in empty.partitions)
    with pytest.raises(DataError):
        random_partition(bundle, {1: 201, 2: 0, 3: 0, 4: 0}, seed=0)
