"""Independent reference implementations used to check the fast paths.

Everything here is written the slow, obvious way on purpose: dense loops,
breadth-first search, factorial enumeration. None of it shares code with the
package under test.
"""

from __future__ import annotations

import itertools
import math
from collections import deque

import numpy as np


def dense_gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """O(H*W*K^2) direct 2-D convolution with clamp-to-edge sampling.

    Kernel: product of 1-D Gaussians sampled at integer offsets, truncated
    at radius ceil(3*sigma) capped at max(H, W) - 1, normalized over the
    whole window. Final rounding is half-up.
    """
    if sigma < 0.1:
        return img.copy()
    h, w = img.shape[:2]
    radius = min(math.ceil(3 * sigma), max(h, w) - 1)
    if radius < 1:
        return img.copy()
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel2d = np.outer(g, g)
    kernel2d /= kernel2d.sum()
    buf = img.astype(np.float64)
    out = np.zeros_like(buf)
    for y in range(h):
        ys = np.clip(y + np.arange(-radius, radius + 1), 0, h - 1)
        for x in range(w):
            xs = np.clip(x + np.arange(-radius, radius + 1), 0, w - 1)
            window = buf[np.ix_(ys, xs)]
            out[y, x] = (window * kernel2d[..., None]).sum(axis=(0, 1))
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def count_ellipse_pixels(cx, cy, rx, ry, height, width) -> int:
    """Pixel-center in-ellipse test by explicit enumeration."""
    count = 0
    for py in range(height):
        for px in range(width):
            nx = (px + 0.5 - cx) / rx
            ny = (py + 0.5 - cy) / ry
            if nx * nx + ny * ny <= 1.0:
                count += 1
    return count


def box_pixels(x, y, w, h, height, width) -> set[tuple[int, int]]:
    """Integer pixels (px, py) with x <= px < x+w and y <= py < y+h, in-image."""
    out = set()
    for py in range(height):
        for px in range(width):
            if x <= px < x + w and y <= py < y + h:
                out.add((px, py))
    return out


def brute_nms(masks: list[np.ndarray], qualities: list[float], thr: float) -> list[int]:
    """Greedy NMS, recomputing IoU from scratch each time; returns kept indices."""
    def iou(a, b):
        inter = np.logical_and(a, b).sum()
        union = np.logical_or(a, b).sum()
        return inter / union if union else 0.0

    order = sorted(range(len(masks)),
                   key=lambda i: (-qualities[i], -int(masks[i].sum()), i))
    kept: list[int] = []
    for i in order:
        if all(iou(masks[i], masks[j]) < thr for j in kept):
            kept.append(i)
    return kept


def bfs_components(mask: np.ndarray) -> list[set[tuple[int, int]]]:
    """4-connected components of the True pixels, via breadth-first search."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    components = []
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            group = set()
            queue = deque([(sy, sx)])
            seen[sy, sx] = True
            while queue:
                y, x = queue.popleft()
                group.add((y, x))
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            components.append(group)
    return components


def exhaustive_assignment(sim: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    """Enumerate all min(N, M)-pair assignments; returns (best total,
    lexicographically smallest optimal pair list)."""
    n, m = sim.shape
    k = min(n, m)
    best_total = -math.inf
    best_pairs: list[tuple[int, int]] | None = None
    for rows in itertools.combinations(range(n), k):
        for cols in itertools.permutations(range(m), k):
            pairs = sorted(zip(rows, cols))
            total = math.fsum(float(sim[r, c]) for r, c in pairs)
            if total > best_total or (total == best_total and pairs < best_pairs):
                best_total = total
                best_pairs = pairs
    return best_total, best_pairs


def relation_formula(head: np.ndarray, anchor: np.ndarray, rel: np.ndarray,
                     agg: str) -> np.ndarray:
    """Direct evaluation of the anchored relation reweighting for one text."""
    n = head.shape[0]
    out = np.zeros(n)
    for i in range(n):
        terms = [anchor[j] * rel[i, j] for j in range(n) if j != i]
        if agg == "max":
            support = max(terms) if terms else 0.0
        else:
            support = sum(terms)
        out[i] = head[i] * support
    return out
