"""Deterministic synthetic benchmark sets for smoke runs and golden tests.

Each record's image is a gray canvas with solid colored blocks; captions and
part labels name the block colors, so a color-aware scorer can be rigged to
hit or miss every record. Generation depends only on the seed.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import imagecore
from .imagecore import Box

BLOCK_COLORS: tuple[tuple[str, tuple[int, int, int]], ...] = (
    ("red", (200, 40, 40)),
    ("green", (40, 170, 60)),
    ("blue", (50, 80, 210)),
    ("yellow", (220, 200, 50)),
)
CANVAS_GRAY = (128, 128, 128)


def _paint(img: np.ndarray, box: Box, color) -> None:
    mask = imagecore.rasterize_box(box, *img.shape[:2])
    img[mask] = color


def _quadrant_boxes(side: int, rng: np.random.Generator) -> list[Box]:
    half = side // 2
    boxes = []
    for qy in (0, half):
        for qx in (0, half):
            w = int(rng.integers(half // 3, half - 6))
            h = int(rng.integers(half // 3, half - 6))
            x = qx + int(rng.integers(2, half - w - 2))
            y = qy + int(rng.integers(2, half - h - 2))
            boxes.append(Box(x, y, w, h))
    return boxes


def make_rec_dataset(out_dir, count: int = 20, seed: int = 7, side: int = 64) -> Path:
    """Write `count` single-caption records; returns the JSONL path.

    Every image holds four disjoint colored blocks (one per quadrant); the
    caption names the ground-truth block's color and the four block boxes
    are the proposals.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    jsonl_path = out_dir / "rec.jsonl"
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for i in range(count):
            rng = np.random.default_rng([seed, 101, i])
            img = np.empty((side, side, 3), dtype=np.uint8)
            img[:, :] = CANVAS_GRAY
            boxes = _quadrant_boxes(side, rng)
            order = rng.permutation(len(BLOCK_COLORS))
            for box, color_idx in zip(boxes, order):
                _paint(img, box, BLOCK_COLORS[color_idx][1])
            target = i % len(boxes)
            target_color = BLOCK_COLORS[order[target]][0]
            image_path = images_dir / f"rec_{i:03d}.png"
            imagecore.save_png(img, image_path)
            fh.write(json.dumps({
                "image": str(image_path),
                "proposals": [[b.x, b.y, b.w, b.h] for b in boxes],
                "caption": f"the {target_color} block",
                "gt_box": [boxes[target].x, boxes[target].y, boxes[target].w, boxes[target].h],
            }, sort_keys=True) + "\n")
    return jsonl_path


def make_part_dataset(out_dir, count: int = 10, seed: int = 7, side: int = 96) -> Path:
    """Write `count` part-detection records; returns the JSONL path.

    Each image carries one large object region containing two or three
    colored part blocks; labels are the part colors.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    jsonl_path = out_dir / "part.jsonl"
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for i in range(count):
            rng = np.random.default_rng([seed, 202, i])
            img = np.empty((side, side, 3), dtype=np.uint8)
            img[:, :] = CANVAS_GRAY
            object_box = Box(8, 8, side - 16, side - 16)
            _paint(img, object_box, (90, 90, 90))
            n_parts = 2 + (i % 2)
            order = rng.permutation(len(BLOCK_COLORS))[:n_parts]
            cells = int(np.ceil(np.sqrt(n_parts)))
            cell = int(object_box.w) // cells
            gt = []
            for slot, color_idx in enumerate(order):
                cx = int(object_box.x) + (slot % cells) * cell
                cy = int(object_box.y) + (slot // cells) * cell
                w = int(rng.integers(cell // 3, cell - 8))
                h = int(rng.integers(cell // 3, cell - 8))
                x = cx + int(rng.integers(3, cell - w - 3))
                y = cy + int(rng.integers(3, cell - h - 3))
                box = Box(x, y, w, h)
                _paint(img, box, BLOCK_COLORS[color_idx][1])
                gt.append({"label": BLOCK_COLORS[color_idx][0],
                           "box": [box.x, box.y, box.w, box.h]})
            image_path = images_dir / f"part_{i:03d}.png"
            imagecore.save_png(img, image_path)
            fh.write(json.dumps({
                "image": str(image_path),
                "object_box": [object_box.x, object_box.y, object_box.w, object_box.h],
                "labels": [entry["label"] for entry in gt],
                "gt": gt,
            }, sort_keys=True) + "\n")
    return jsonl_path
