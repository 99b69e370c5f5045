"""Deterministic raster primitives for prompt rendering.

Conventions used across the package:

* images are ``numpy`` arrays of shape ``(H, W, 3)``, dtype ``uint8``, sRGB;
* binary masks are boolean arrays of shape ``(H, W)``;
* every function is pure: inputs are never mutated, identical inputs give
  bit-identical outputs;
* fractional values round half-up to the nearest integer, everywhere.

Rasterization is binary coverage by pixel-center / pixel-index test, with no
anti-aliasing, so the output of every drawing primitive is reproducible
across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

Color = tuple[int, int, int]

RED: Color = (255, 0, 0)
GREEN: Color = (0, 255, 0)
YELLOW: Color = (255, 255, 0)
CYAN: Color = (0, 255, 255)
BLUE: Color = (0, 0, 255)
PURPLE: Color = (128, 0, 128)
DARK_RED: Color = (240, 0, 30)

PALETTE: dict[str, Color] = {
    "red": RED,
    "green": GREEN,
    "yellow": YELLOW,
    "cyan": CYAN,
    "blue": BLUE,
    "purple": PURPLE,
    "dark-red": DARK_RED,
}

# 4-connected (cross) structuring element shared by all morphology here.
CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: top-left corner (x, y) plus positive extent (w, h)."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive, got w={self.w} h={self.h}")

    @property
    def cx(self) -> float:
        return self.x + self.w / 2

    @property
    def cy(self) -> float:
        return self.y + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Ellipse:
    """Axis-aligned ellipse: center (cx, cy) and semi-axes (rx, ry)."""

    cx: float
    cy: float
    rx: float
    ry: float

    def __post_init__(self):
        if self.rx <= 0 or self.ry <= 0:
            raise ValueError(f"ellipse semi-axes must be positive, got rx={self.rx} ry={self.ry}")


def inscribed_ellipse(box: Box) -> Ellipse:
    """The ellipse inscribed in ``box`` (semi-axes w/2, h/2, centered)."""
    return Ellipse(cx=box.cx, cy=box.cy, rx=box.w / 2, ry=box.h / 2)


def round_half_up(values: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves up. Returns uint8 after clipping."""
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def ensure_image(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 image, got shape={img.shape} dtype={img.dtype}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    return img


def ensure_mask(mask: np.ndarray, shape: tuple[int, int] | None = None) -> np.ndarray:
    if mask.ndim != 2 or mask.dtype != np.bool_:
        raise ValueError(f"expected (H, W) bool mask, got shape={mask.shape} dtype={mask.dtype}")
    if shape is not None and mask.shape != tuple(shape):
        raise ValueError(f"mask shape {mask.shape} does not match image shape {tuple(shape)}")
    return mask


# ---------------------------------------------------------------------------
# point ops
# ---------------------------------------------------------------------------

def _gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur.

    The kernel is truncated at radius ceil(3*sigma), capped at max(H, W) - 1,
    normalized over that window, and applied per channel in float64 with
    clamp-to-edge padding. A single half-up rounding happens at the end.
    sigma below 0.1 is treated as the identity.
    """
    ensure_image(img)
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma < 0.1:
        return img.copy()
    h, w = img.shape[:2]
    radius = min(math.ceil(3 * sigma), max(h, w) - 1)
    if radius < 1:
        return img.copy()
    kernel = _gaussian_kernel(sigma, radius)
    buf = img.astype(np.float64)
    buf = ndimage.correlate1d(buf, kernel, axis=0, mode="nearest")
    buf = ndimage.correlate1d(buf, kernel, axis=1, mode="nearest")
    return round_half_up(buf)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Rec.601 luma, replicated to all three channels."""
    ensure_image(img)
    buf = img.astype(np.float64)
    y = round_half_up(0.299 * buf[..., 0] + 0.587 * buf[..., 1] + 0.114 * buf[..., 2])
    return np.repeat(y[..., None], 3, axis=2)


def alpha_blend(img: np.ndarray, color: Color, alpha: float, support: np.ndarray) -> np.ndarray:
    """Blend ``color`` over ``img`` at opacity ``alpha`` inside ``support``."""
    ensure_image(img)
    ensure_mask(support, img.shape[:2])
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    tint = np.asarray(color, dtype=np.float64)
    blended = round_half_up((1.0 - alpha) * img.astype(np.float64) + alpha * tint)
    return np.where(support[..., None], blended, img)


def composite(fg: np.ndarray, bg: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Per-pixel select: foreground where the support bit is set, else background."""
    ensure_image(fg)
    ensure_image(bg)
    if fg.shape != bg.shape:
        raise ValueError(f"foreground {fg.shape} and background {bg.shape} differ")
    ensure_mask(support, fg.shape[:2])
    return np.where(support[..., None], fg, bg)


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def _index_range(lo: float, extent: float, limit: int) -> tuple[int, int]:
    # integer indices i with lo <= i < lo + extent, clamped to [0, limit)
    start = max(int(math.ceil(lo)), 0)
    stop = min(int(math.ceil(lo + extent)), limit)
    return start, max(stop, start)


def rasterize_box(box: Box, height: int, width: int) -> np.ndarray:
    """Bits set where the integer pixel coordinate falls in the half-open box."""
    mask = np.zeros((height, width), dtype=bool)
    x0, x1 = _index_range(box.x, box.w, width)
    y0, y1 = _index_range(box.y, box.h, height)
    mask[y0:y1, x0:x1] = True
    return mask


def rasterize_ellipse(ellipse: Ellipse, height: int, width: int) -> np.ndarray:
    """Bits set where the pixel center lies inside the ellipse."""
    px = np.arange(width, dtype=np.float64) + 0.5
    py = np.arange(height, dtype=np.float64) + 0.5
    nx = (px - ellipse.cx) / ellipse.rx
    ny = (py - ellipse.cy) / ellipse.ry
    return (nx[None, :] ** 2 + ny[:, None] ** 2) <= 1.0


def _stroke_band_box(box: Box, thickness: float, height: int, width: int) -> np.ndarray:
    half = thickness / 2
    outer = rasterize_box(Box(box.x - half, box.y - half, box.w + thickness, box.h + thickness), height, width)
    if box.w - thickness > 0 and box.h - thickness > 0:
        inner = rasterize_box(Box(box.x + half, box.y + half, box.w - thickness, box.h - thickness), height, width)
        return outer & ~inner
    return outer


def _stroke_band_ellipse(ellipse: Ellipse, thickness: float, height: int, width: int) -> np.ndarray:
    half = thickness / 2
    outer = rasterize_ellipse(Ellipse(ellipse.cx, ellipse.cy, ellipse.rx + half, ellipse.ry + half), height, width)
    if ellipse.rx - half > 0 and ellipse.ry - half > 0:
        inner = rasterize_ellipse(Ellipse(ellipse.cx, ellipse.cy, ellipse.rx - half, ellipse.ry - half), height, width)
        return outer & ~inner
    return outer


def draw_box_outline(img: np.ndarray, box: Box, color: Color, thickness: float) -> np.ndarray:
    """Stroke the box boundary: outward/inward dilation band filled with color."""
    ensure_image(img)
    if thickness < 1:
        raise ValueError(f"thickness must be >= 1, got {thickness}")
    band = _stroke_band_box(box, thickness, *img.shape[:2])
    out = img.copy()
    out[band] = color
    return out


def draw_ellipse_outline(img: np.ndarray, ellipse: Ellipse, color: Color, thickness: float) -> np.ndarray:
    ensure_image(img)
    if thickness < 1:
        raise ValueError(f"thickness must be >= 1, got {thickness}")
    band = _stroke_band_ellipse(ellipse, thickness, *img.shape[:2])
    out = img.copy()
    out[band] = color
    return out


def draw_disc(img: np.ndarray, center: tuple[float, float], radius: float, color: Color) -> np.ndarray:
    """Filled circle at ``center`` (x, y)."""
    ensure_image(img)
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    disc = rasterize_ellipse(Ellipse(center[0], center[1], radius, radius), *img.shape[:2])
    out = img.copy()
    out[disc] = color
    return out


def dilate(mask: np.ndarray, steps: int) -> np.ndarray:
    """4-connected dilation repeated ``steps`` times (0 is identity)."""
    ensure_mask(mask)
    if steps <= 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=CROSS, iterations=steps)


def erode(mask: np.ndarray, steps: int) -> np.ndarray:
    """4-connected erosion repeated ``steps`` times (0 is identity)."""
    ensure_mask(mask)
    if steps <= 0:
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=CROSS, iterations=steps)


def mask_contour(mask: np.ndarray, thickness: float) -> np.ndarray:
    """Boundary band of a mask: dilate(ceil(t/2)) minus erode(floor(t/2))."""
    ensure_mask(mask)
    if thickness < 1:
        raise ValueError(f"thickness must be >= 1, got {thickness}")
    if not mask.any():
        return np.zeros_like(mask)
    grown = dilate(mask, math.ceil(thickness / 2))
    kept = erode(mask, math.floor(thickness / 2))
    return grown & ~kept


# ---------------------------------------------------------------------------
# geometry ops
# ---------------------------------------------------------------------------

def crop_window(box: Box, height: int, width: int) -> tuple[int, int, int, int]:
    """Integer pixel window (x0, y0, x1, y1) a crop of ``box`` covers."""
    x0, x1 = _index_range(box.x, box.w, width)
    y0, y1 = _index_range(box.y, box.h, height)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"crop box {box} lies fully outside the {height}x{width} image")
    return x0, y0, x1, y1


def crop(img: np.ndarray, box: Box) -> np.ndarray:
    """Copy the part of ``box`` that intersects the image."""
    ensure_image(img)
    h, w = img.shape[:2]
    x0, y0, x1, y1 = crop_window(box, h, w)
    return img[y0:y1, x0:x1].copy()


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-center sampling."""
    ensure_image(img)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output dims must be >= 1, got {out_h}x{out_w}")
    h, w = img.shape[:2]
    fy = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    fx = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(fy).astype(int)
    x0 = np.floor(fx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (fy - y0)[:, None, None]
    wx = (fx - x0)[None, :, None]
    buf = img.astype(np.float64)
    top = buf[np.ix_(y0, x0)] * (1 - wx) + buf[np.ix_(y0, x1)] * wx
    bottom = buf[np.ix_(y1, x0)] * (1 - wx) + buf[np.ix_(y1, x1)] * wx
    return round_half_up(top * (1 - wy) + bottom * wy)


def pad_to_square(img: np.ndarray, fill: Color | str = (0, 0, 0)) -> np.ndarray:
    """Center the image on a square canvas of side max(H, W).

    ``fill`` is either a solid color or the string ``"blur"``: edge-replicate
    into the padding, blur the canvas, and keep the original center exact.
    """
    ensure_image(img)
    h, w = img.shape[:2]
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    pads = ((top, side - h - top), (left, side - w - left), (0, 0))
    if fill == "blur":
        canvas = np.pad(img, pads, mode="edge")
        pad_amount = max(side - h, side - w)
        if pad_amount > 0:
            blurred = gaussian_blur(canvas, max(1.0, pad_amount / 3))
            support = np.zeros((side, side), dtype=bool)
            support[top:top + h, left:left + w] = True
            canvas = composite(canvas, blurred, support)
        return canvas
    canvas = np.empty((side, side, 3), dtype=np.uint8)
    canvas[:, :] = np.asarray(fill, dtype=np.uint8)
    canvas[top:top + h, left:left + w] = img
    return canvas


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Decode a PNG or JPEG file into an (H, W, 3) uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_png(img: np.ndarray, path) -> None:
    """Write an image as PNG (lossless, so pixel-exact tests survive a round trip)."""
    ensure_image(img)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def encode_png(img: np.ndarray) -> bytes:
    import io

    ensure_image(img)
    buf = io.BytesIO()
    Image.fromarray(img, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    import io

    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
