"""Bridge from vision encoders to the LFB bundle format."""

from .extract import (
    ExtractorConfig,
    dedupe_concepts,
    extract_layers,
    load_prototype_file,
    normalize_prototype,
    score_vectors,
    text_prototypes,
)
from .lfb_writer import BundleDoc, LayerRecord, write_bundle
from .models import (
    ModelLoadError,
    UnsupportedModelError,
    architecture_shape,
    capture_layers,
    load_model,
    model_spec,
)

__version__ = "0.1.0"
