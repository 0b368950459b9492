from __future__ import annotations

import base64
import json
import subprocess
import sys
import warnings
from pathlib import Path

import numpy as np
import pytest

from lfb_extract import (
    ExtractorConfig,
    UnsupportedModelError,
    architecture_shape,
    dedupe_concepts,
    extract_layers,
    normalize_prototype,
    score_vectors,
    text_prototypes,
)
from lfb_extract.models import ModelLoadError

RESNET_DIMS = (64, 128, 256, 512)


def run_primary(*args: str) -> subprocess.CompletedProcess:
    """Invoke the auditing toolkit through its CLI (the external interface)."""
    return subprocess.run(
        [sys.executable, "-m", "privalign.cli", *args],
        capture_output=True,
        text=True,
    )


def prototype_file(tmp_path: Path, seed: int = 0) -> Path:
    # one unit prototype per residual-stage dimension
    rng = np.random.default_rng(seed)
    doc = {
        "person": {str(i + 1): rng.normal(size=d).tolist() for i, d in enumerate(RESNET_DIMS)}
    }
    path = tmp_path / "prototypes.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def extracted(tmp_path_factory, image_dir):
    tmp_path = tmp_path_factory.mktemp("extract")
    out = tmp_path / "resnet18.lfb.json"
    config = ExtractorConfig(
        model_id="resnet18",
        images=sorted(image_dir.iterdir()),
        out_path=out,
        concepts=["person"],
        prototype_file=prototype_file(tmp_path),
        image_size=64,
        seed=0,
    )
    extract_layers(config)
    return out


def test_manifest_matches_architecture(extracted):
    manifest = json.loads(extracted.read_text())
    assert manifest["format_version"] == "1"
    assert manifest["kind"] == "original"
    assert manifest["n_layers"] == 4
    expected = architecture_shape("resnet18", 64)
    for entry, (per_image, dim) in zip(manifest["layers"], expected):
        assert entry["n_vectors"] == 4 * per_image   # 4 images concatenated
        assert entry["dim"] == dim
        assert len(entry["scores"]) == entry["n_vectors"]
    assert manifest["metadata"]["model"] == "resnet18"
    assert manifest["metadata"]["grid.1"] == "16x16"
    assert manifest["metadata"]["grid.4"] == "2x2"


def test_payload_is_consistent_float32(extracted):
    manifest = json.loads(extracted.read_text())
    payload = base64.b64decode(manifest["payload"]["data"])
    total = sum(e["n_vectors"] * e["dim"] * 4 for e in manifest["layers"])
    assert len(payload) == total == manifest["payload"]["byte_length"]
    first = manifest["layers"][0]
    block = np.frombuffer(payload, dtype="<f4", count=first["n_vectors"] * first["dim"])
    assert np.isfinite(block).all()


def test_extraction_is_deterministic(tmp_path, image_dir):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.lfb.json"
        extract_layers(
            ExtractorConfig(
                model_id="resnet18",
                images=sorted(image_dir.iterdir()),
                out_path=out,
                image_size=64,
                seed=3,
            )
        )
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_primary_toolkit_accepts_bundle_end_to_end(tmp_path, extracted):
    """The [round-trip] contract: group, perturb and assess all exit 0."""
    grouping = tmp_path / "grouping.json"
    perturbed = tmp_path / "perturbed.lfb.json"
    assessment = tmp_path / "assessment.json"

    out = run_primary(
        "group", "--bundle", str(extracted), "--scorer", "external",
        "--quantile", "0.9", "--out", str(grouping),
    )
    assert out.returncode == 0, out.stderr

    out = run_primary(
        "perturb", "--bundle", str(extracted), "--grouping", str(grouping),
        "--epsilon", "0.1", "--mechanism", "gaussian", "--seed", "0",
        "--out", str(perturbed),
    )
    assert out.returncode == 0, out.stderr

    out = run_primary(
        "assess", "--original", str(extracted), "--perturbed", str(perturbed),
        "--grouping", str(grouping), "--epsilon", "0.1",
        "--mechanism", "gaussian", "--seed", "0", "--out", str(assessment),
    )
    assert out.returncode == 0, out.stderr
    doc = json.loads(assessment.read_text())
    # residual stages have mixed dims: per-layer assessment path
    assert doc["pooled"] is False
    assert doc["bas"] > 0.0


def test_vit_layer_count_and_patch_grid(tmp_path, image_dir):
    out = tmp_path / "vit.lfb.json"
    extract_layers(
        ExtractorConfig(
            model_id="vit_b_32",
            images=sorted(image_dir.iterdir())[:2],
            out_path=out,
            seed=0,
        )
    )
    manifest = json.loads(out.read_text())
    # patch embedding plus 12 encoder blocks, 49 patches per image
    assert manifest["n_layers"] == 13
    for entry in manifest["layers"]:
        assert entry["n_vectors"] == 2 * 49
        assert entry["dim"] == 768
    assert manifest["metadata"]["grid.1"] == "7x7"


def test_layer_selection_reindexes_contiguously(tmp_path, image_dir):
    out = tmp_path / "sel.lfb.json"
    extract_layers(
        ExtractorConfig(
            model_id="resnet18",
            images=sorted(image_dir.iterdir()),
            out_path=out,
            layer_selection=[2, 4],
            image_size=64,
        )
    )
    manifest = json.loads(out.read_text())
    assert [e["index"] for e in manifest["layers"]] == [1, 2]
    assert [e["dim"] for e in manifest["layers"]] == [128, 512]
    assert manifest["metadata"]["source_stage.2"] == "4"


def test_missing_stage_is_an_error(tmp_path, image_dir):
    with pytest.raises(UnsupportedModelError):
        extract_layers(
            ExtractorConfig(
                model_id="resnet18",
                images=sorted(image_dir.iterdir()),
                out_path=tmp_path / "x.lfb.json",
                layer_selection=[9],
                image_size=64,
            )
        )


def test_unreadable_images_skipped_and_recorded(tmp_path, image_dir):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not an image")
    out = tmp_path / "skip.lfb.json"
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        extract_layers(
            ExtractorConfig(
                model_id="resnet18",
                images=[bad, *sorted(image_dir.iterdir())],
                out_path=out,
                image_size=64,
            )
        )
    assert any("skipped" in str(w.message) for w in caught)
    manifest = json.loads(out.read_text())
    assert "broken.png" in manifest["metadata"]["skipped_images"]
    assert manifest["layers"][0]["n_vectors"] == 4 * 256


def test_no_readable_images_writes_nothing(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"junk")
    out = tmp_path / "none.lfb.json"
    with pytest.raises(ModelLoadError):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            extract_layers(
                ExtractorConfig(model_id="resnet18", images=[bad], out_path=out)
            )
    assert not out.exists()


def test_text_prototypes_unsupported_without_text_tower():
    with pytest.raises(UnsupportedModelError, match="text tower"):
        text_prototypes(["person"], "resnet18")


def test_prototype_normalization_and_self_similarity():
    q = normalize_prototype(np.array([3.0, 4.0]))
    assert np.linalg.norm(q) == pytest.approx(1.0)
    scores = score_vectors(q[None, :] * 7.5, {"person": q}, ["person"], layer_index=1)
    assert scores[0] == pytest.approx(1.0)


def test_duplicate_concepts_deduplicated_with_warning():
    with pytest.warns(UserWarning, match="duplicate"):
        assert dedupe_concepts(["person", "car", "person"]) == ["person", "car"]


def test_cli_extract(tmp_path, image_dir):
    from lfb_extract.cli import main

    out = tmp_path / "cli.lfb.json"
    code = main([
        "extract", "--model", "resnet18", "--images", str(image_dir),
        "--image-size", "64", "--out", str(out),
    ])
    assert code == 0
    assert out.exists()
