from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from detforge.catalog import load_catalog

DATA_DIR = Path(__file__).parent / "data"
BUNDLED_CATALOG = (
    Path(__file__).parent.parent / "src" / "detforge" / "data" / "machinery_catalog.json"
)


@pytest.fixture(scope="session")
def machinery_catalog():
    return load_catalog(BUNDLED_CATALOG)


@pytest.fixture()
def small_catalog(tmp_path):
    """Three classes exercising synonyms and co-occurrence."""
    doc = {
        "version": "1",
        "classes": [
            {"name": "bulldozer", "synonyms": ["dozer", "crawler tractor"],
             "co_occurring": [], "diversify": True, "instances": []},
            {"name": "mining truck", "synonyms": [],
             "co_occurring": ["mining excavator"], "diversify": True, "instances": []},
            {"name": "mining excavator", "synonyms": [],
             "co_occurring": ["mining truck"], "diversify": True, "instances": []},
        ],
    }
    path = tmp_path / "catalog.json"
    path.write_text(json.dumps(doc))
    return load_catalog(path)


def structured_image(seed: int, size: tuple[int, int] = (160, 120)) -> Image.Image:
    """Deterministic photo-like test image: gradient + blobs + mild noise."""
    rng = np.random.default_rng(seed)
    w, h = size
    x = np.linspace(0, 1, w)
    y = np.linspace(0, 1, h)
    grid_x, grid_y = np.meshgrid(x, y)
    base = 120 + 80 * np.sin(3 * grid_x + seed % 7) * np.cos(2 * grid_y)
    for _ in range(4):
        cx, cy = rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)
        r = rng.uniform(0.05, 0.2)
        mask = (grid_x - cx) ** 2 + (grid_y - cy) ** 2 < r ** 2
        base = np.where(mask, rng.uniform(30, 220), base)
    base = base + rng.normal(0, 4, base.shape)
    channels = [
        np.clip(base * factor, 0, 255).astype(np.uint8)
        for factor in (1.0, 0.85, 0.7)
    ]
    return Image.merge("RGB", [Image.fromarray(c) for c in channels])


@pytest.fixture(scope="session")
def fixture_images(tmp_path_factory) -> list[Path]:
    """20 deterministic photo-like images for perceptual-hash checks."""
    root = tmp_path_factory.mktemp("phash_fixture")
    paths = []
    for i in range(20):
        img = structured_image(1000 + i)
        path = root / f"fixture_{i:02d}.png"
        img.save(path)
        paths.append(path)
    return paths
