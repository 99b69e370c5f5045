import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def solid(h, w, color):
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:, :] = color
    return img


def random_image(rng, h, w):
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


def random_mask(rng, h, w, p=0.5):
    return rng.random((h, w)) < p


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class ColorAxisScorer:
    """Rigged scorer: solid block colors and their names map to shared axes.

    ``shift`` rotates text embeddings to a different color globally;
    ``text_map`` redirects specific color words first (for per-record rigs).
    """

    def __init__(self, shift: int = 0, text_map: dict | None = None):
        from visprompt.synthetic import BLOCK_COLORS

        self.colors = BLOCK_COLORS
        self.shift = shift
        self.text_map = text_map or {}
        self.dim = len(self.colors) + 1

    def _axis(self, idx: int) -> np.ndarray:
        vec = np.zeros(self.dim)
        vec[idx] = 1.0
        return vec

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        mean = img.reshape(-1, 3).mean(axis=0)
        for idx, (_, color) in enumerate(self.colors):
            if np.linalg.norm(mean - np.asarray(color)) < 40:
                return self._axis(idx)
        return self._axis(self.dim - 1)

    def embed_text(self, text: str) -> np.ndarray:
        for idx, (name, _) in enumerate(self.colors):
            if name in text:
                name = self.text_map.get(name, name)
                idx = next(i for i, (other, _) in enumerate(self.colors) if other == name)
                return self._axis((idx + self.shift) % len(self.colors))
        return self._axis(self.dim - 1)
