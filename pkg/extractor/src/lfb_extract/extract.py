"""Layer-wise feature extraction into LFB bundles.

The extractor concatenates per-image feature vectors (never averages):
downstream assessment operates on vector populations.  Sensitivity
scores are attached when concept prototypes are available for a layer's
dimension; encoders without a text tower cannot synthesize prototypes,
so embeddings must then come from a prototype file.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .lfb_writer import BundleDoc, LayerRecord, write_bundle
from .models import (
    ModelLoadError,
    UnsupportedModelError,
    capture_layers,
    load_model,
    model_spec,
)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class ExtractorConfig:
    model_id: str
    images: list[Path]
    out_path: Path
    concepts: list[str] = field(default_factory=list)
    prototype_file: Path | None = None
    layer_selection: list[int] | None = None   # model stages; None = all
    image_size: int | None = None              # None = model default
    pretrained: bool = False
    seed: int = 0


def _load_image(path: Path, size: int) -> torch.Tensor | None:
    try:
        img = Image.open(path).convert("RGB")
    except Exception:
        return None
    img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = ((arr - IMAGENET_MEAN) / IMAGENET_STD).astype(np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1))


def normalize_prototype(vector: np.ndarray) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    return v / max(float(np.linalg.norm(v)), 1e-12)


def dedupe_concepts(labels: list[str]) -> list[str]:
    seen: list[str] = []
    for label in labels:
        if label in seen:
            warnings.warn(f"duplicate concept label {label!r} dropped", stacklevel=2)
        else:
            seen.append(label)
    return seen


def text_prototypes(concepts: list[str], model_id: str) -> dict[str, np.ndarray]:
    """Concept embeddings from the model's text tower.

    None of the registered image encoders carries a text tower, so this
    raises; supply a prototype file instead and scores are computed from
    it.
    """
    spec = model_spec(model_id)
    concepts = dedupe_concepts(concepts)
    if not spec.has_text_tower:
        raise UnsupportedModelError(
            f"model family {spec.family!r} has no text tower; supply sensitivity "
            "scores or prototype embeddings externally"
        )
    raise ModelLoadError(f"text tower for {model_id} is not available")  # pragma: no cover


def load_prototype_file(path: Path) -> dict[str, dict[int, np.ndarray] | np.ndarray]:
    """Read concept -> embedding (or concept -> {layer: embedding}) JSON."""
    doc = json.loads(Path(path).read_text())
    out: dict[str, dict[int, np.ndarray] | np.ndarray] = {}
    for concept, value in doc.items():
        if isinstance(value, dict):
            out[concept] = {
                int(layer): normalize_prototype(np.array(vec, dtype=np.float64))
                for layer, vec in value.items()
            }
        else:
            out[concept] = normalize_prototype(np.array(value, dtype=np.float64))
    return out


def _prototype_for(prototypes, concept: str, layer_index: int, dim: int) -> np.ndarray | None:
    entry = prototypes.get(concept)
    if entry is None:
        return None
    if isinstance(entry, dict):
        vec = entry.get(layer_index)
        return vec if vec is not None and vec.shape[0] == dim else None
    return entry if entry.shape[0] == dim else None


def score_vectors(vectors: np.ndarray, prototypes, concepts: list[str], layer_index: int) -> np.ndarray | None:
    """Max clamped cosine similarity over the concepts with a matching prototype."""
    dim = vectors.shape[1]
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    unit = vectors / np.where(norms > 1e-12, norms, 1.0)
    best: np.ndarray | None = None
    for concept in concepts:
        q = _prototype_for(prototypes, concept, layer_index, dim)
        if q is None:
            continue
        sims = unit @ q
        best = sims if best is None else np.maximum(best, sims)
    if best is None:
        return None
    return np.clip(best, 0.0, 1.0)


def extract_layers(config: ExtractorConfig) -> Path:
    """Extract layer-wise features from the configured encoder to disk."""
    spec = model_spec(config.model_id)
    size = config.image_size or spec.input_size
    if spec.family == "vit" and size != spec.input_size:
        raise UnsupportedModelError(
            f"{config.model_id} has a fixed input resolution of {spec.input_size}"
        )

    tensors = []
    kept: list[str] = []
    skipped: list[str] = []
    for path in config.images:
        t = _load_image(Path(path), size)
        if t is None:
            warnings.warn(f"cannot decode image {path}; skipped", stacklevel=2)
            skipped.append(str(path))
        else:
            tensors.append(t)
            kept.append(str(path))
    if not tensors:
        raise ModelLoadError("no readable images; nothing to extract")

    model = load_model(config.model_id, pretrained=config.pretrained, seed=config.seed)
    batch = torch.stack(tensors)
    captured = capture_layers(model, spec, batch)

    if config.layer_selection:
        wanted = set(config.layer_selection)
        missing = wanted - {c.stage for c in captured}
        if missing:
            raise UnsupportedModelError(
                f"model {config.model_id} has no stage(s) {sorted(missing)}"
            )
        captured = [c for c in captured if c.stage in wanted]

    concepts = dedupe_concepts(config.concepts)
    prototypes = load_prototype_file(config.prototype_file) if config.prototype_file else {}

    doc = BundleDoc(kind="original")
    doc.metadata = {
        "model": config.model_id,
        "dataset": f"{len(kept)} images",
        "concept_set": ",".join(concepts),
        "images": ";".join(kept),
        "image_size": str(size),
        "pretrained": str(config.pretrained).lower(),
        "seed": str(config.seed),
    }
    if skipped:
        doc.metadata["skipped_images"] = ";".join(skipped)

    for out_index, layer in enumerate(captured, start=1):
        scores = score_vectors(layer.vectors, prototypes, concepts, layer.stage) if concepts else None
        if concepts and scores is None:
            warnings.warn(
                f"no prototype with dim {layer.vectors.shape[1]} for stage "
                f"{layer.stage}; layer left unscored",
                stacklevel=2,
            )
        doc.layers.append(LayerRecord(index=out_index, vectors=layer.vectors, scores=scores))
        doc.metadata[f"grid.{out_index}"] = f"{layer.grid[0]}x{layer.grid[1]}"
        doc.metadata[f"source_stage.{out_index}"] = str(layer.stage)

    for concept in concepts:
        entry = prototypes.get(concept)
        if isinstance(entry, np.ndarray):
            doc.metadata[f"prototype.{concept}"] = json.dumps([round(float(x), 9) for x in entry])

    return write_bundle(doc, config.out_path)
