"""Scorer/segmenter adapters behind one small interface.

Checkpoint tags pick the implementation:

* ``builtin`` — dependency-light deterministic models (patch embeddings,
  color-region segmentation). No weights needed; useful for tests, protocol
  validation, and offline development.
* ``clip:<checkpoint>`` — CLIP text/image towers via ``transformers``.
* ``sam:<checkpoint>`` — promptable segmentation via ``transformers``.

Real checkpoints need torch + transformers plus downloaded weights; loading
raises ``ModelLoadError`` when they are missing.
"""

from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image
from scipy import ndimage

EMBED_DIM = 512


class ModelLoadError(RuntimeError):
    pass


def _normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0:
        raise ValueError("cannot normalize a zero embedding")
    return (vec / norm).astype(np.float32)


class BuiltinScorer:
    """Deterministic embeddings with no learned weights.

    Images embed as a normalized 13x13 RGB thumbnail (plus a constant
    component so the vector is never zero); texts embed as hashed character
    trigram counts. Purely structural, but stable across calls and
    platforms, which is what the protocol tests need.
    """

    tag = "builtin-patch-v1"
    dim = EMBED_DIM

    def embed_image(self, img: Image.Image) -> np.ndarray:
        thumb = img.convert("RGB").resize((13, 13), Image.BILINEAR)
        pixels = np.asarray(thumb, dtype=np.float64).reshape(-1) / 255.0
        vec = np.zeros(self.dim)
        vec[0] = 1.0
        vec[1:1 + pixels.size] = pixels
        return _normalize(vec)

    def embed_text(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        vec[int.from_bytes(digest[:4], "big") % self.dim] += 1.0
        data = text.lower()
        for i in range(max(len(data) - 2, 1)):
            gram = data[i:i + 3]
            bucket = int.from_bytes(hashlib.sha256(gram.encode()).digest()[:4], "big")
            vec[bucket % self.dim] += 1.0
        return _normalize(vec)


class BuiltinSegmenter:
    """Color-coherent region growing from a box or point seed.

    Segments the 4-connected component of pixels whose color stays within a
    fixed tolerance of the seed color. Exact on flat synthetic rasters,
    approximate elsewhere; it exists so the full wire protocol can run
    without model weights.
    """

    tag = "builtin-region-v1"
    tolerance = 24

    def _grow(self, arr: np.ndarray, seed_yx: tuple[int, int]) -> np.ndarray:
        seed_color = arr[seed_yx].astype(np.int64)
        close = (np.abs(arr.astype(np.int64) - seed_color).max(axis=2)
                 <= self.tolerance)
        labels, _ = ndimage.label(close, structure=ndimage.generate_binary_structure(2, 1))
        return labels == labels[seed_yx]

    @staticmethod
    def _quality(mask: np.ndarray) -> float:
        area = int(mask.sum())
        if not area:
            return 0.0
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        tight = (rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1)
        return float(area / tight)

    def segment_boxes(self, img: Image.Image, boxes) -> list[tuple[np.ndarray, float]]:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
        h, w = arr.shape[:2]
        out = []
        for x, y, bw, bh in boxes:
            cy = min(max(int(y + bh / 2), 0), h - 1)
            cx = min(max(int(x + bw / 2), 0), w - 1)
            mask = self._grow(arr, (cy, cx))
            out.append((mask, self._quality(mask)))
        return out

    def segment_points(self, img: Image.Image, points) -> list[tuple[np.ndarray, float]]:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
        h, w = arr.shape[:2]
        out = []
        for x, y in points:
            py = min(max(int(y), 0), h - 1)
            px = min(max(int(x), 0), w - 1)
            mask = self._grow(arr, (py, px))
            out.append((mask, self._quality(mask)))
        return out


class ClipScorer:
    """CLIP text/image embedding towers served from a local checkpoint."""

    def __init__(self, checkpoint: str, device: str = "cpu"):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise ModelLoadError(f"clip backend needs torch+transformers: {exc}") from exc
        try:
            self.model = CLIPModel.from_pretrained(checkpoint).to(device).eval()
            self.processor = CLIPProcessor.from_pretrained(checkpoint)
        except Exception as exc:
            raise ModelLoadError(f"failed to load clip checkpoint {checkpoint!r}: {exc}") from exc
        self.torch = torch
        self.device = device
        self.tag = f"clip:{checkpoint}"
        self.dim = int(self.model.config.projection_dim)

    def embed_image(self, img: Image.Image) -> np.ndarray:
        inputs = self.processor(images=img.convert("RGB"), return_tensors="pt").to(self.device)
        with self.torch.no_grad():
            features = self.model.get_image_features(**inputs)[0]
        return _normalize(features.cpu().numpy().astype(np.float64))

    def embed_text(self, text: str) -> np.ndarray:
        inputs = self.processor(text=[text], return_tensors="pt",
                                padding=True, truncation=True).to(self.device)
        with self.torch.no_grad():
            features = self.model.get_text_features(**inputs)[0]
        return _normalize(features.cpu().numpy().astype(np.float64))


class SamSegmenter:
    """Promptable segmentation; returns the single best mask per query."""

    def __init__(self, checkpoint: str, device: str = "cpu"):
        try:
            import torch
            from transformers import SamModel, SamProcessor
        except ImportError as exc:
            raise ModelLoadError(f"sam backend needs torch+transformers: {exc}") from exc
        try:
            self.model = SamModel.from_pretrained(checkpoint).to(device).eval()
            self.processor = SamProcessor.from_pretrained(checkpoint)
        except Exception as exc:
            raise ModelLoadError(f"failed to load sam checkpoint {checkpoint!r}: {exc}") from exc
        self.torch = torch
        self.device = device
        self.tag = f"sam:{checkpoint}"

    def _best_masks(self, image: Image.Image, **prompt) -> list[tuple[np.ndarray, float]]:
        inputs = self.processor(image.convert("RGB"), **prompt,
                                return_tensors="pt").to(self.device)
        with self.torch.no_grad():
            outputs = self.model(**inputs, multimask_output=True)
        masks = self.processor.image_processor.post_process_masks(
            outputs.pred_masks.cpu(), inputs["original_sizes"].cpu(),
            inputs["reshaped_input_sizes"].cpu())[0]
        scores = outputs.iou_scores.cpu().numpy()[0]
        out = []
        for query_masks, query_scores in zip(masks.numpy(), scores):
            best = int(np.argmax(query_scores))
            out.append((query_masks[best].astype(bool), float(query_scores[best])))
        return out

    def segment_boxes(self, img: Image.Image, boxes) -> list[tuple[np.ndarray, float]]:
        xyxy = [[[x, y, x + w, y + h] for x, y, w, h in boxes]]
        return self._best_masks(img, input_boxes=xyxy)

    def segment_points(self, img: Image.Image, points) -> list[tuple[np.ndarray, float]]:
        coords = [[[list(p)] for p in points]]
        return self._best_masks(img, input_points=coords)


def build_scorer(tag: str, device: str = "cpu"):
    if tag == "builtin":
        return BuiltinScorer()
    if tag.startswith("clip:"):
        return ClipScorer(tag.split(":", 1)[1], device=device)
    raise ModelLoadError(f"unknown scorer tag {tag!r} (use 'builtin' or 'clip:<checkpoint>')")


def build_segmenter(tag: str, device: str = "cpu"):
    if tag == "builtin":
        return BuiltinSegmenter()
    if tag.startswith("sam:"):
        return SamSegmenter(tag.split(":", 1)[1], device=device)
    raise ModelLoadError(f"unknown segmenter tag {tag!r} (use 'builtin' or 'sam:<checkpoint>')")
