"""Vision-encoder registry and layer-wise feature capture.

ResNet backbones expose their residual stages as layers 1..4; ViT
backbones expose the patch-embedding output as layer 1 and each encoder
block output as the following layers (class token dropped).  Feature
maps are flattened to one vector per spatial location or patch, per
image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torchvision import models as tvm


class UnsupportedModelError(ValueError):
    pass


class ModelLoadError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    name: str
    family: str                  # "resnet" | "vit"
    builder: object
    weights: object | None       # torchvision weights enum when pretrained
    input_size: int              # native input resolution for ViT
    has_text_tower: bool = False


REGISTRY: dict[str, ModelSpec] = {
    "resnet18": ModelSpec("resnet18", "resnet", tvm.resnet18, None, 224),
    "resnet50": ModelSpec("resnet50", "resnet", tvm.resnet50, None, 224),
    "vit_b_32": ModelSpec("vit_b_32", "vit", tvm.vit_b_32, None, 224),
    "vit_b_16": ModelSpec("vit_b_16", "vit", tvm.vit_b_16, None, 224),
}


def model_spec(model_id: str) -> ModelSpec:
    if model_id not in REGISTRY:
        raise UnsupportedModelError(
            f"unknown model {model_id!r}; available: {sorted(REGISTRY)}"
        )
    return REGISTRY[model_id]


def load_model(model_id: str, pretrained: bool = False, seed: int = 0) -> torch.nn.Module:
    """Build the encoder; random init unless pretrained weights are requested."""
    spec = model_spec(model_id)
    torch.manual_seed(seed)   # deterministic random init
    try:
        if pretrained:
            weights = "DEFAULT"
            model = spec.builder(weights=weights)
        else:
            model = spec.builder(weights=None)
    except Exception as exc:
        raise ModelLoadError(f"cannot load {model_id}: {exc}") from exc
    model.eval()
    return model


@dataclass
class CapturedLayer:
    stage: int                   # position in the model's own layer order
    vectors: np.ndarray          # (n_images * grid_h * grid_w, channels)
    grid: tuple[int, int]


def _flatten_map(t: torch.Tensor) -> tuple[np.ndarray, tuple[int, int]]:
    # (N, C, H, W) -> (N*H*W, C)
    n, c, h, w = t.shape
    flat = t.permute(0, 2, 3, 1).reshape(n * h * w, c)
    return flat.detach().cpu().numpy().astype(np.float32), (h, w)


def _flatten_tokens(t: torch.Tensor, drop_first: bool) -> tuple[np.ndarray, tuple[int, int]]:
    # (N, tokens, C) -> (N*patches, C); drop the class token when present
    if drop_first:
        t = t[:, 1:, :]
    n, p, c = t.shape
    side = int(round(p**0.5))
    flat = t.reshape(n * p, c)
    return flat.detach().cpu().numpy().astype(np.float32), (side, side)


@torch.no_grad()
def capture_layers(model: torch.nn.Module, spec: ModelSpec, batch: torch.Tensor) -> list[CapturedLayer]:
    """Run one forward pass and collect every layer's flattened features."""
    captured: list[CapturedLayer] = []
    if spec.family == "resnet":
        x = model.conv1(batch)
        x = model.bn1(x)
        x = model.relu(x)
        x = model.maxpool(x)
        for stage, block in enumerate(
            (model.layer1, model.layer2, model.layer3, model.layer4), start=1
        ):
            x = block(x)
            vectors, grid = _flatten_map(x)
            captured.append(CapturedLayer(stage=stage, vectors=vectors, grid=grid))
        return captured

    # ViT: patch embedding, then encoder blocks
    x = model.conv_proj(batch)                      # (N, hidden, H, W)
    vectors, grid = _flatten_map(x)
    captured.append(CapturedLayer(stage=1, vectors=vectors, grid=grid))
    n = x.shape[0]
    x = x.flatten(2).transpose(1, 2)                # (N, patches, hidden)
    cls = model.class_token.expand(n, -1, -1)
    x = torch.cat([cls, x], dim=1) + model.encoder.pos_embedding
    x = model.encoder.dropout(x)
    for stage, block in enumerate(model.encoder.layers, start=2):
        x = block(x)
        vectors, grid = _flatten_tokens(x, drop_first=True)
        captured.append(CapturedLayer(stage=stage, vectors=vectors, grid=grid))
    return captured


def architecture_shape(model_id: str, image_size: int) -> list[tuple[int, int]]:
    """Expected (vectors_per_image, dim) per layer, for manifest checks."""
    spec = model_spec(model_id)
    if spec.family == "resnet":
        channels = {"resnet18": (64, 128, 256, 512), "resnet50": (256, 512, 1024, 2048)}[
            spec.name
        ]
        side = image_size // 4
        shapes = []
        for c in channels:
            shapes.append((side * side, c))
            side //= 2
        return shapes
    patch = {"vit_b_32": 32, "vit_b_16": 16}[spec.name]
    side = image_size // patch
    hidden = 768
    return [(side * side, hidden)] * 13   # patch embedding + 12 blocks
