from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from PIL import Image, ImageDraw


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory) -> Path:
    """Four small synthetic images with distinct content."""
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(0)
    for i in range(4):
        arr = rng.integers(0, 255, size=(96, 96, 3), dtype=np.uint8)
        img = Image.fromarray(arr)
        draw = ImageDraw.Draw(img)
        draw.rectangle([16 + 8 * i, 16, 48 + 8 * i, 48], fill=(255, 16 * i, 0))
        draw.ellipse([40, 40 + 4 * i, 80, 80], fill=(0, 255, 128))
        img.save(root / f"img_{i}.png")
    return root
