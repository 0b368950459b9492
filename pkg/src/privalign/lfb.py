"""The LFB on-disk format for layered feature bundles.

A bundle is a JSON manifest plus a payload of contiguous 32-bit
little-endian IEEE-754 floats, laid out layer-major, then vector-major,
then dimension-major.  Payloads below 8 MiB are inlined in the manifest
as base64; larger payloads live in a sibling ".bin" file referenced by
the manifest.  Per-layer score and flag arrays are inline JSON.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .core import DataError, Layer, LayeredFeatureBundle, validate_bundle

FORMAT_VERSION = "1"
INLINE_LIMIT = 8 * 1024 * 1024


class MalformedManifestError(DataError):
    pass


class FormatVersionError(DataError):
    pass


class TruncatedPayloadError(DataError):
    pass


def _payload_bytes(bundle: LayeredFeatureBundle) -> bytes:
    parts = [
        np.ascontiguousarray(lyr.vectors, dtype="<f4").tobytes() for lyr in bundle.layers
    ]
    return b"".join(parts)


def write_bundle(bundle: LayeredFeatureBundle, path: str | Path) -> Path:
    """Write a bundle; returns the manifest path.

    Feature values are stored as float32: writing is lossless exactly
    when the in-memory values are float32-representable (always true for
    bundles that came from read_bundle or from the synthetic generator).
    """
    path = Path(path)
    payload = _payload_bytes(bundle)
    layers = []
    offset = 0
    for lyr in bundle.layers:
        entry = {
            "index": lyr.index,
            "n_vectors": lyr.n_vectors,
            "dim": lyr.dim,
            "byte_offset": offset,
        }
        if lyr.scores is not None:
            entry["scores"] = [float(s) for s in lyr.scores]
        if lyr.flags is not None:
            entry["flags"] = [int(f) for f in lyr.flags]
        layers.append(entry)
        offset += lyr.n_vectors * lyr.dim * 4

    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": bundle.kind,
        "metadata": dict(bundle.metadata),
        "n_layers": bundle.n_layers,
        "layers": layers,
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


def read_bundle(path: str | Path) -> LayeredFeatureBundle:
    """Read and validate a bundle written by write_bundle."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedManifestError(f"cannot parse manifest {path}: {exc}") from exc

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(
            f"unsupported format_version {version!r} (expected {FORMAT_VERSION!r})"
        )
    for key in ("kind", "n_layers", "layers", "payload"):
        if key not in manifest:
            raise MalformedManifestError(f"manifest missing key {key!r}")
    if manifest["n_layers"] != len(manifest["layers"]):
        raise MalformedManifestError("n_layers does not match the layer list")

    payload_info = manifest["payload"]
    encoding = payload_info.get("encoding")
    if encoding == "base64":
        payload = base64.b64decode(payload_info.get("data", ""))
    elif encoding == "file":
        bin_path = path.parent / payload_info.get("path", "")
        if not bin_path.exists():
            raise TruncatedPayloadError(f"payload file {bin_path} is missing")
        payload = bin_path.read_bytes()
    else:
        raise MalformedManifestError(f"unknown payload encoding {encoding!r}")

    declared = payload_info.get("byte_length")
    if declared is not None and declared != len(payload):
        raise TruncatedPayloadError(
            f"payload length {len(payload)} does not match declared {declared}"
        )

    layers = []
    expected_offset = 0
    for entry in manifest["layers"]:
        try:
            index = int(entry["index"])
            n_vectors = int(entry["n_vectors"])
            dim = int(entry["dim"])
            offset = int(entry["byte_offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedManifestError(f"bad layer entry {entry!r}") from exc
        if offset != expected_offset:
            raise MalformedManifestError(
                f"layer {index}: byte_offset {offset} inconsistent, expected {expected_offset}"
            )
        nbytes = n_vectors * dim * 4
        if offset + nbytes > len(payload):
            raise TruncatedPayloadError(
                f"payload truncated in layer {index}: need {offset + nbytes} bytes, "
                f"have {len(payload)}"
            )
        raw = np.frombuffer(payload, dtype="<f4", count=n_vectors * dim, offset=offset)
        vectors = raw.reshape(n_vectors, dim).astype(np.float64)
        scores = np.array(entry["scores"], dtype=np.float64) if "scores" in entry else None
        flags = np.array(entry["flags"], dtype=bool) if "flags" in entry else None
        layers.append(Layer(index=index, vectors=vectors, scores=scores, flags=flags))
        expected_offset = offset + nbytes

    if expected_offset != len(payload):
        raise TruncatedPayloadError(
            f"payload has {len(payload) - expected_offset} trailing bytes"
        )

    bundle = LayeredFeatureBundle(
        layers=tuple(layers),
        kind=manifest["kind"],
        metadata={str(k): str(v) for k, v in manifest.get("metadata", {}).items()},
    )
    violations = validate_bundle(bundle)
    if violations:
        raise DataError("invalid bundle: " + "; ".join(violations))
    return bundle
