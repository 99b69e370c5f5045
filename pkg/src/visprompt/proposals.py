"""Region-candidate generation: box- and point-prompted segmentation, NMS, mask cleanup.

A segmenter backend turns geometric queries into binary masks; this module
owns everything deterministic around it: grid keypoint layout, duplicate
suppression by mask IoU, island/hole filtering, tight-box extraction, and the
run-length wire format for masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
from scipy import ndimage

from .imagecore import CROSS, Box, ensure_mask


class SegmentationError(RuntimeError):
    """A segmenter backend produced an unusable result for a specific query."""


@runtime_checkable
class SegmenterBackend(Protocol):
    """Mask source: implementations provide one or both query modes."""

    def segment_boxes(self, img: np.ndarray, boxes: Sequence[Box]) -> list[tuple[np.ndarray, float]]:
        ...

    def segment_points(self, img: np.ndarray, points: Sequence[tuple[float, float]]) -> list[tuple[np.ndarray, float]]:
        ...


@dataclass(frozen=True)
class GridSpec:
    """g x g keypoint grid over the image (g per side)."""

    g: int = 16

    def __post_init__(self):
        if self.g < 1:
            raise ValueError(f"grid size must be >= 1, got {self.g}")


@dataclass
class MaskProposal:
    """A segmented candidate: mask, its tight box, and the segmenter's quality."""

    mask: np.ndarray
    box: Box
    quality: float
    query_box: Box | None = field(default=None)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def grid_points(height: int, width: int, g: int) -> list[tuple[float, float]]:
    """Cell-center keypoints, row-major: ((j+0.5)*W/g, (i+0.5)*H/g)."""
    if g < 1:
        raise ValueError(f"grid size must be >= 1, got {g}")
    return [((j + 0.5) * width / g, (i + 0.5) * height / g)
            for i in range(g) for j in range(g)]


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two masks; 0 when both are empty."""
    ensure_mask(a)
    ensure_mask(b, a.shape)
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    return inter / union if union else 0.0


def mask_nms(props: Sequence[MaskProposal], thr: float) -> list[MaskProposal]:
    """Greedy duplicate suppression on mask IoU.

    Candidates are visited by descending quality (ties: larger area, then
    input order) and kept only if their IoU with every kept mask stays below
    the threshold. The output preserves visit order.
    """
    if not 0.0 <= thr <= 1.0:
        raise ValueError(f"NMS threshold must be in [0, 1], got {thr}")
    order = sorted(range(len(props)), key=lambda i: (-props[i].quality, -props[i].area, i))
    kept: list[MaskProposal] = []
    for i in order:
        if all(mask_iou(props[i].mask, k.mask) < thr for k in kept):
            kept.append(props[i])
    return kept


def _components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    return ndimage.label(mask, structure=CROSS)


def _filter_pass(mask: np.ndarray, min_island: float, max_hole: float) -> np.ndarray:
    labels, n = _components(mask)
    if n == 0:
        return mask.copy()
    areas = np.bincount(labels.ravel())[1:]
    largest = int(areas.max())
    out = mask.copy()
    # drop small islands
    for comp in np.flatnonzero(areas < min_island * largest):
        out[labels == comp + 1] = False
    # fill small interior holes
    bg_labels, bg_n = _components(~out)
    if bg_n:
        border = set(np.unique(np.concatenate([
            bg_labels[0, :], bg_labels[-1, :], bg_labels[:, 0], bg_labels[:, -1]])))
        bg_areas = np.bincount(bg_labels.ravel())[1:]
        for comp in range(1, bg_n + 1):
            if comp in border:
                continue
            if bg_areas[comp - 1] < max_hole * largest:
                out[bg_labels == comp] = True
    return out


def filter_mask(mask: np.ndarray, min_island: float = 0.1, max_hole: float = 0.1) -> np.ndarray:
    """Drop small disconnected islands and fill small interior holes.

    Thresholds are fractions of the largest 4-connected component's area, so
    behavior is resolution independent. The pass repeats until stable (hole
    filling can grow the reference component), which makes the op idempotent.
    """
    ensure_mask(mask)
    if not 0.0 <= min_island <= 1.0 or not 0.0 <= max_hole <= 1.0:
        raise ValueError("filter fractions must be in [0, 1]")
    current = mask
    for _ in range(8):
        step = _filter_pass(current, min_island, max_hole)
        if np.array_equal(step, current):
            break
        current = step
    return current if current is not mask else mask.copy()


def box_from_mask(mask: np.ndarray) -> Box:
    """Tight axis-aligned bounding box over the set bits (inclusive extents)."""
    ensure_mask(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("cannot take the bounding box of an empty mask")
    return Box(x=float(cols[0]), y=float(rows[0]),
               w=float(cols[-1] - cols[0] + 1), h=float(rows[-1] - rows[0] + 1))


def _checked_mask(mask: np.ndarray, shape: tuple[int, int], index: int, what: str) -> np.ndarray:
    if mask.shape != shape:
        raise SegmentationError(
            f"{what} {index}: segmenter returned mask of shape {mask.shape}, expected {shape}")
    return ensure_mask(mask)


def propose_from_boxes(backend: SegmenterBackend, img: np.ndarray, boxes: Sequence[Box],
                       mask_filter: bool = True, min_island: float = 0.1,
                       max_hole: float = 0.1) -> list[MaskProposal]:
    """Segment each query box; one proposal per box, in query order.

    The proposal's box is the tight box of the (optionally filtered) mask;
    the original query box is retained on the proposal for evaluation. An
    empty segmenter mask falls back to the rasterized query box so the
    proposal count always matches the query count.
    """
    if not hasattr(backend, "segment_boxes"):
        raise TypeError("backend does not support box-prompted segmentation")
    if not boxes:
        return []
    shape = img.shape[:2]
    try:
        raw = backend.segment_boxes(img, list(boxes))
    except SegmentationError:
        raise
    except Exception as exc:
        raise SegmentationError(f"box batch 0..{len(boxes) - 1}: segmentation failed: {exc}") from exc
    if len(raw) != len(boxes):
        raise SegmentationError(
            f"segmenter returned {len(raw)} masks for {len(boxes)} boxes")
    out = []
    for i, (box, (mask, quality)) in enumerate(zip(boxes, raw)):
        mask = _checked_mask(mask, shape, i, "box")
        cleaned = filter_mask(mask, min_island, max_hole) if mask_filter else mask
        if not cleaned.any():
            cleaned = mask
        if not cleaned.any():
            from .imagecore import rasterize_box

            cleaned = rasterize_box(box, *shape)
            if not cleaned.any():
                raise SegmentationError(f"box {i}: empty mask and query box outside image")
        out.append(MaskProposal(mask=cleaned, box=box_from_mask(cleaned),
                                quality=float(quality), query_box=box))
    return out


def propose_grid(backend: SegmenterBackend, img: np.ndarray, grid: GridSpec = GridSpec(),
                 nms_thr: float = 0.7, mask_filter: bool = True, min_island: float = 0.1,
                 max_hole: float = 0.1) -> list[MaskProposal]:
    """Proposal generation with no prior boxes: segment a keypoint grid, then NMS."""
    if not hasattr(backend, "segment_points"):
        raise TypeError("backend does not support point-prompted segmentation")
    shape = img.shape[:2]
    points = grid_points(shape[0], shape[1], grid.g)
    try:
        raw = backend.segment_points(img, points)
    except SegmentationError:
        raise
    except Exception as exc:
        raise SegmentationError(f"point batch 0..{len(points) - 1}: segmentation failed: {exc}") from exc
    if len(raw) != len(points):
        raise SegmentationError(
            f"segmenter returned {len(raw)} masks for {len(points)} points")
    candidates = []
    for i, (mask, quality) in enumerate(raw):
        mask = _checked_mask(mask, shape, i, "point")
        if not mask.any():
            continue
        cleaned = filter_mask(mask, min_island, max_hole) if mask_filter else mask
        if not cleaned.any():
            continue
        candidates.append(MaskProposal(mask=cleaned, box=box_from_mask(cleaned),
                                       quality=float(quality)))
    return mask_nms(candidates, nms_thr)


# ---------------------------------------------------------------------------
# COCO-style uncompressed RLE (column-major runs, starting with the zero run)
# ---------------------------------------------------------------------------

def rle_encode(mask: np.ndarray) -> dict:
    ensure_mask(mask)
    h, w = mask.shape
    flat = mask.flatten(order="F")
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    boundaries = np.concatenate([[0], changes, [flat.size]])
    counts = [int(c) for c in np.diff(boundaries)]
    if flat[0]:
        counts.insert(0, 0)
    return {"size": [int(h), int(w)], "counts": counts}


def rle_decode(obj: dict) -> np.ndarray:
    try:
        h, w = (int(v) for v in obj["size"])
        counts = list(obj["counts"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed RLE object: {exc}") from exc
    if h < 1 or w < 1:
        raise ValueError(f"malformed RLE size {obj.get('size')}")
    if any((not isinstance(c, int)) or c < 0 for c in counts):
        raise ValueError("RLE counts must be nonnegative integers")
    if sum(counts) != h * w:
        raise ValueError(f"RLE counts sum to {sum(counts)}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return flat.reshape((h, w), order="F")


def rle_to_json(mask: np.ndarray) -> str:
    return json.dumps(rle_encode(mask), separators=(",", ":"))
