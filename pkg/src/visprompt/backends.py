"""Backends: deterministic fixtures, an HTTP model client, and a disk cache.

The whole primary test suite runs on the fixtures alone. The remote client
speaks a small JSON-over-HTTP protocol::

    POST /v1/embed_image   {"image_png_b64": "..."}    -> {"embedding": [...], "dim": E, "model": "tag"}
    POST /v1/embed_text    {"text": "..."}             -> same shape
    POST /v1/segment       {"image_png_b64": "...", "boxes": [[x,y,w,h], ...]}
                           or {..., "points": [[x,y], ...]}
                           -> {"masks": [{"size": [H,W], "counts": [...], "quality": q}, ...]}
    GET  /v1/health        -> {"ok": true, "models": {"scorer": "tag", "segmenter": "tag"}}

Responses are validated before use and before any cache write.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import requests

from . import imagecore, proposals
from .imagecore import Box
from .proposals import SegmentationError

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    pass


class ProtocolError(BackendError):
    """The server response violated the wire protocol."""

    def __init__(self, endpoint: str, attempts: int, message: str):
        super().__init__(f"{endpoint} (after {attempts} attempt(s)): {message}")
        self.endpoint = endpoint
        self.attempts = attempts


def _hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def image_bytes(img: np.ndarray) -> bytes:
    """Canonical byte serialization of an image for hashing/fixtures."""
    h, w = img.shape[:2]
    return b"image/%d/%d/" % (h, w) + img.tobytes()


def text_bytes(text: str) -> bytes:
    return b"text/" + text.encode("utf-8")


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------

class FixtureScorer:
    """Seeded pseudo-random unit embeddings, overridable per exact input.

    Unprogrammed inputs map through sha256 to a seeded generator, so the
    same bytes always give the same vector, across runs and platforms.
    """

    def __init__(self, seed: int = 0, dim: int = 512,
                 programmed: dict[str, np.ndarray] | None = None):
        self.seed = seed
        self.dim = dim
        self.programmed = dict(programmed or {})
        self.calls = {"embed_image": 0, "embed_text": 0}

    def program_image(self, img: np.ndarray, vector: np.ndarray) -> None:
        self.programmed[_hash_bytes(image_bytes(img))] = np.asarray(vector, dtype=np.float64)

    def program_text(self, text: str, vector: np.ndarray) -> None:
        self.programmed[_hash_bytes(text_bytes(text))] = np.asarray(vector, dtype=np.float64)

    def _vector(self, data: bytes) -> np.ndarray:
        digest = _hash_bytes(data)
        if digest in self.programmed:
            return self.programmed[digest].copy()
        words = [self.seed] + [int(digest[i:i + 8], 16) for i in range(0, 64, 8)]
        rng = np.random.default_rng(words)
        vec = rng.standard_normal(self.dim)
        return vec / np.linalg.norm(vec)

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        self.calls["embed_image"] += 1
        return self._vector(image_bytes(imagecore.ensure_image(img)))

    def embed_text(self, text: str) -> np.ndarray:
        self.calls["embed_text"] += 1
        if not text:
            raise ValueError("cannot embed empty text")
        return self._vector(text_bytes(text))


class FixtureSegmenter:
    """Deterministic segmenter for tests.

    By default box queries return the box interior and point queries return
    a centered square patch; both can be overridden with callables.
    """

    def __init__(self,
                 box_fn: Callable[[np.ndarray, Box], tuple[np.ndarray, float]] | None = None,
                 point_fn: Callable[[np.ndarray, tuple[float, float]], tuple[np.ndarray, float]] | None = None):
        self.box_fn = box_fn
        self.point_fn = point_fn
        self.calls = {"segment_boxes": 0, "segment_points": 0}

    def segment_boxes(self, img, boxes: Sequence[Box]):
        self.calls["segment_boxes"] += 1
        h, w = img.shape[:2]
        out = []
        for box in boxes:
            if self.box_fn is not None:
                out.append(self.box_fn(img, box))
            else:
                out.append((imagecore.rasterize_box(box, h, w), 1.0))
        return out

    def segment_points(self, img, points: Sequence[tuple[float, float]]):
        self.calls["segment_points"] += 1
        h, w = img.shape[:2]
        side = max(2, min(h, w) // 4)
        out = []
        for point in points:
            if self.point_fn is not None:
                out.append(self.point_fn(img, point))
            else:
                box = Box(point[0] - side / 2, point[1] - side / 2, side, side)
                out.append((imagecore.rasterize_box(box, h, w), 1.0))
        return out


class ColorRegionSegmenter:
    """Exact-color connected-component segmenter for synthetic rasters.

    A box query returns the component of the box-center color restricted to
    pixels matching it; a point query returns the component containing the
    point. Useful for pipeline tests on flat-colored images; not a model.
    """

    def _component(self, img: np.ndarray, seed_yx: tuple[int, int]) -> np.ndarray:
        from scipy import ndimage

        same = (img == img[seed_yx]).all(axis=2)
        labels, _ = ndimage.label(same, structure=imagecore.CROSS)
        return labels == labels[seed_yx]

    def segment_boxes(self, img, boxes: Sequence[Box]):
        h, w = img.shape[:2]
        out = []
        for box in boxes:
            cy = min(max(int(box.cy), 0), h - 1)
            cx = min(max(int(box.cx), 0), w - 1)
            mask = self._component(img, (cy, cx))
            out.append((mask, 1.0))
        return out

    def segment_points(self, img, points: Sequence[tuple[float, float]]):
        h, w = img.shape[:2]
        out = []
        for x, y in points:
            py = min(max(int(y), 0), h - 1)
            px = min(max(int(x), 0), w - 1)
            mask = self._component(img, (py, px))
            area = int(mask.sum())
            tight = proposals.box_from_mask(mask) if area else None
            quality = area / tight.area if tight else 0.0
            out.append((mask, float(quality)))
        return out


# ---------------------------------------------------------------------------
# disk cache
# ---------------------------------------------------------------------------

class DiskCache:
    """Content-addressed JSON cache; corrupt or truncated entries read as misses.

    Writes go to a temp file then rename, so concurrent writers of one key
    leave a valid entry. An unwritable root disables the cache with a
    warning instead of failing the run.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.enabled = True
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            probe = self.root / ".probe"
            probe.write_text("ok")
            probe.unlink()
        except OSError as exc:
            log.warning("cache disabled: %s not writable (%s)", self.root, exc)
            self.enabled = False

    @staticmethod
    def key(*parts: bytes | str) -> str:
        h = hashlib.sha256()
        for part in parts:
            data = part.encode("utf-8") if isinstance(part, str) else part
            h.update(len(data).to_bytes(8, "big"))
            h.update(data)
        return h.hexdigest()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str):
        if not self.enabled:
            return None
        path = self._path(key)
        try:
            raw = path.read_bytes()
        except OSError:
            return None
        try:
            entry = json.loads(raw)
            payload = json.dumps(entry["value"], separators=(",", ":"), sort_keys=True)
            if entry["sha256"] != hashlib.sha256(payload.encode()).hexdigest():
                raise ValueError("checksum mismatch")
            return entry["value"]
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("cache entry %s unreadable (%s); treating as miss", path, exc)
            return None

    def put(self, key: str, value) -> None:
        if not self.enabled:
            return
        path = self._path(key)
        payload = json.dumps(value, separators=(",", ":"), sort_keys=True)
        entry = json.dumps({
            "sha256": hashlib.sha256(payload.encode()).hexdigest(),
            "created_at": time.time(),
            "value": value,
        })
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
            with os.fdopen(fd, "w") as fh:
                fh.write(entry)
            os.replace(tmp, path)
        except OSError as exc:
            log.warning("cache write failed for %s (%s); disabling cache", path, exc)
            self.enabled = False

    def stats(self) -> dict:
        files = list(self.root.glob("*/*.json")) if self.enabled else []
        return {"entries": len(files), "bytes": sum(f.stat().st_size for f in files),
                "root": str(self.root), "enabled": self.enabled}

    def clear(self) -> int:
        files = list(self.root.glob("*/*.json")) if self.enabled else []
        for f in files:
            f.unlink(missing_ok=True)
        return len(files)


# ---------------------------------------------------------------------------
# remote client
# ---------------------------------------------------------------------------

@dataclass
class RemoteConfig:
    base_url: str
    timeout: float = 30.0
    retries: int = 3
    batch_size: int = 8
    backoff: float = 0.25
    cache: DiskCache | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        self.base_url = self.base_url.rstrip("/")


class _RemoteBase:
    def __init__(self, config: RemoteConfig):
        self.config = config
        self._local = threading.local()
        self._model_tags: dict | None = None
        self._tags_lock = threading.Lock()

    @property
    def session(self) -> requests.Session:
        # Session objects are not thread-safe; keep one per worker thread.
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def health(self) -> dict:
        payload = self._request("GET", "/v1/health", None)
        models = payload.get("models")
        if not payload.get("ok") or not isinstance(models, dict):
            raise ProtocolError("/v1/health", 1, f"bad health payload: {payload}")
        return payload

    def _tag(self, role: str) -> str:
        with self._tags_lock:
            if self._model_tags is None:
                self._model_tags = self.health()["models"]
            return str(self._model_tags.get(role, "unknown"))

    def _request(self, method: str, endpoint: str, body: dict | None) -> dict:
        url = self.config.base_url + endpoint
        last_error = None
        for attempt in range(1, self.config.retries + 1):
            try:
                if method == "GET":
                    resp = self.session.get(url, timeout=self.config.timeout)
                else:
                    resp = self.session.post(url, json=body, timeout=self.config.timeout)
                resp.raise_for_status()
                return resp.json()
            except (requests.RequestException, ValueError) as exc:
                last_error = exc
                if attempt < self.config.retries:
                    time.sleep(self.config.backoff * (2 ** (attempt - 1)))
        raise ProtocolError(endpoint, self.config.retries, f"request failed: {last_error}")

    def _map_concurrent(self, fn, items: list):
        """Run fn over items with up to batch_size in flight; order preserved."""
        if len(items) <= 1 or self.config.batch_size <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.config.batch_size) as pool:
            return list(pool.map(fn, items))


class RemoteScorer(_RemoteBase):
    """ScorerBackend over the wire, with optional transparent caching."""

    def _embed(self, endpoint: str, body: dict, cache_key_parts: tuple) -> np.ndarray:
        cache = self.config.cache
        key = None
        if cache is not None:
            key = DiskCache.key(endpoint, self._tag("scorer"), *cache_key_parts)
            hit = cache.get(key)
            if hit is not None:
                return np.asarray(hit, dtype=np.float32).astype(np.float64)
        payload = self._request("POST", endpoint, body)
        vec = self._validated_embedding(endpoint, payload)
        if cache is not None and key is not None:
            cache.put(key, [float(v) for v in vec.astype(np.float32)])
        return vec.astype(np.float64)

    def _validated_embedding(self, endpoint: str, payload: dict) -> np.ndarray:
        try:
            embedding = np.asarray(payload["embedding"], dtype=np.float32)
            dim = int(payload["dim"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(endpoint, self.config.retries, f"malformed payload: {exc}")
        if embedding.ndim != 1 or embedding.size != dim:
            raise ProtocolError(endpoint, self.config.retries,
                                f"embedding size {embedding.size} != dim {dim}")
        norm = float(np.linalg.norm(embedding))
        if abs(norm - 1.0) > 1e-3:
            raise ProtocolError(endpoint, self.config.retries,
                                f"embedding norm {norm:.6f} not within 1e-3 of 1")
        return embedding

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        png = imagecore.encode_png(img)
        body = {"image_png_b64": base64.b64encode(png).decode("ascii")}
        return self._embed("/v1/embed_image", body, (image_bytes(img),))

    def embed_text(self, text: str) -> np.ndarray:
        return self._embed("/v1/embed_text", {"text": text}, (text_bytes(text),))

    def embed_images(self, imgs: Sequence[np.ndarray]) -> list[np.ndarray]:
        return self._map_concurrent(self.embed_image, list(imgs))

    def embed_texts(self, texts: Sequence[str]) -> list[np.ndarray]:
        return self._map_concurrent(self.embed_text, list(texts))


class RemoteSegmenter(_RemoteBase):
    """SegmenterBackend over the wire."""

    def _segment(self, img: np.ndarray, extra: dict, cache_parts: tuple) -> list[tuple[np.ndarray, float]]:
        endpoint = "/v1/segment"
        cache = self.config.cache
        key = None
        if cache is not None:
            key = DiskCache.key(endpoint, self._tag("segmenter"), *cache_parts)
            hit = cache.get(key)
            if hit is not None:
                return [(proposals.rle_decode(m), float(m.get("quality", 0.0))) for m in hit]
        png = imagecore.encode_png(img)
        body = {"image_png_b64": base64.b64encode(png).decode("ascii"), **extra}
        payload = self._request("POST", endpoint, body)
        masks = payload.get("masks")
        if not isinstance(masks, list):
            raise ProtocolError(endpoint, self.config.retries, "payload missing 'masks' list")
        shape = img.shape[:2]
        decoded = []
        for i, entry in enumerate(masks):
            try:
                mask = proposals.rle_decode(entry)
                quality = float(entry.get("quality", 0.0))
            except (ValueError, TypeError, AttributeError) as exc:
                raise ProtocolError(endpoint, self.config.retries, f"mask {i}: {exc}")
            if mask.shape != shape:
                raise SegmentationError(
                    f"query {i}: server mask shape {mask.shape} != image shape {shape}")
            decoded.append((mask, quality))
        if cache is not None and key is not None:
            cache.put(key, masks)
        return decoded

    def _segment_chunked(self, img, field: str, queries: list) -> list[tuple[np.ndarray, float]]:
        size = self.config.batch_size
        chunks = [queries[i:i + size] for i in range(0, len(queries), size)] or [[]]

        def run(chunk):
            parts = (image_bytes(img), field, json.dumps(chunk))
            return self._segment(img, {field: chunk}, parts)

        results = self._map_concurrent(run, chunks)
        return [mask for chunk_result in results for mask in chunk_result]

    def segment_boxes(self, img, boxes: Sequence[Box]):
        box_list = [[b.x, b.y, b.w, b.h] for b in boxes]
        return self._segment_chunked(img, "boxes", box_list)

    def segment_points(self, img, points: Sequence[tuple[float, float]]):
        point_list = [[float(x), float(y)] for x, y in points]
        return self._segment_chunked(img, "points", point_list)
