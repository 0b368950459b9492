"""Writer for the LFB bundle format.

Independent implementation of the on-disk contract: JSON manifest plus a
payload of contiguous 32-bit little-endian floats, layer-major, inlined
as base64 below 8 MiB and stored in a sibling ".bin" file above.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = "1"
INLINE_LIMIT = 8 * 1024 * 1024


@dataclass
class LayerRecord:
    index: int
    vectors: np.ndarray                 # (n_vectors, dim) float32
    scores: np.ndarray | None = None
    flags: np.ndarray | None = None


@dataclass
class BundleDoc:
    layers: list[LayerRecord] = field(default_factory=list)
    kind: str = "original"
    metadata: dict[str, str] = field(default_factory=dict)


def write_bundle(doc: BundleDoc, path: str | Path) -> Path:
    path = Path(path)
    payload = b"".join(
        np.ascontiguousarray(lyr.vectors, dtype="<f4").tobytes() for lyr in doc.layers
    )
    entries = []
    offset = 0
    for lyr in doc.layers:
        n, d = lyr.vectors.shape
        entry = {"index": lyr.index, "n_vectors": n, "dim": d, "byte_offset": offset}
        if lyr.scores is not None:
            entry["scores"] = [float(s) for s in lyr.scores]
        if lyr.flags is not None:
            entry["flags"] = [int(f) for f in lyr.flags]
        entries.append(entry)
        offset += n * d * 4

    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": doc.kind,
        "metadata": dict(doc.metadata),
        "n_layers": len(doc.layers),
        "layers": entries,
        "payload": {"byte_length": len(payload)},
    }
    if len(payload) < INLINE_LIMIT:
        manifest["payload"]["encoding"] = "base64"
        manifest["payload"]["data"] = base64.b64encode(payload).decode("ascii")
    else:
        bin_path = path.with_suffix(path.suffix + ".bin")
        bin_path.write_bytes(payload)
        manifest["payload"]["encoding"] = "file"
        manifest["payload"]["path"] = bin_path.name
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path
