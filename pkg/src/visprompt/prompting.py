"""Visual prompt taxonomy: render (image, region, kind, style) into a prompted image.

Fifteen prompt kinds are supported, addressed by short lowercase codes on the
CLI (``p a1 a2 b1 b2 b3 b4 c1 c2 c3 c4 d1 d2 d3 d4``). The letter picks the
geometry (crop/point, box, inscribed circle, mask) and the digit the marking
(line, color fill, grayscale reverse, blur reverse). Reverse kinds degrade
everything *outside* the region and leave the region itself untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage

from . import imagecore
from .imagecore import Box, Color, ensure_image, ensure_mask, inscribed_ellipse


class PromptKind(Enum):
    CROP = "p"
    KEYPOINT = "a1"
    COLOR_CROP = "a2"
    BOX = "b1"
    COLOR_BOX = "b2"
    GRAY_REVERSE_BOX = "b3"
    BLUR_REVERSE_BOX = "b4"
    CIRCLE = "c1"
    COLOR_CIRCLE = "c2"
    GRAY_REVERSE_CIRCLE = "c3"
    BLUR_REVERSE_CIRCLE = "c4"
    CONTOUR = "d1"
    COLOR_MASK = "d2"
    GRAY_REVERSE_MASK = "d3"
    BLUR_REVERSE_MASK = "d4"

    @property
    def code(self) -> str:
        return self.value

    @property
    def requires_mask(self) -> bool:
        return self.value.startswith("d")

    @property
    def is_crop(self) -> bool:
        return self in (PromptKind.CROP, PromptKind.COLOR_CROP)

    @property
    def is_reverse(self) -> bool:
        return self.value in ("b3", "b4", "c3", "c4", "d3", "d4")

    @classmethod
    def from_code(cls, code: str) -> "PromptKind":
        try:
            return cls(code.strip().lower())
        except ValueError:
            valid = " ".join(k.value for k in cls)
            raise ValueError(f"unknown prompt kind {code!r}; valid kinds: {valid}") from None


def parse_ensemble(spec: str) -> list[PromptKind]:
    """Parse an ensemble string like ``p|d1|d3|d4`` into prompt kinds."""
    kinds = [PromptKind.from_code(part) for part in spec.split("|") if part.strip()]
    if not kinds:
        raise ValueError(f"empty prompt ensemble: {spec!r}")
    return kinds


SQUARE_MODES = ("stretch", "pad", "center_crop")


@dataclass(frozen=True)
class PromptStyle:
    """Rendering hyperparameters, defaulting to the best-performing settings."""

    line_color: Color = imagecore.RED
    line_thickness: float = 2
    fill_color: Color = imagecore.GREEN
    alpha: float = 0.5
    blur_sigma: float = 100.0
    keypoint_radius: float = 6
    expand_scale: float = 1.0
    square_mode: str = "pad"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.expand_scale <= 0:
            raise ValueError(f"expand_scale must be positive, got {self.expand_scale}")
        if self.line_thickness < 1:
            raise ValueError(f"line_thickness must be >= 1, got {self.line_thickness}")
        if self.square_mode not in SQUARE_MODES:
            raise ValueError(f"square_mode must be one of {SQUARE_MODES}, got {self.square_mode!r}")


@dataclass(frozen=True)
class Region:
    """A proposal's geometry: always a box, optionally a pixel mask."""

    box: Box
    mask: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.mask is not None:
            ensure_mask(self.mask)


class DegenerateRegionError(ValueError):
    """Region shrank to nothing (e.g. erosion during expand with s < 1)."""


def region_support(kind: PromptKind, region: Region, height: int, width: int,
                   keypoint_radius: float = 6) -> np.ndarray:
    """The pixel support a prompt kind marks or preserves."""
    if kind.requires_mask:
        if region.mask is None:
            raise ValueError(f"prompt kind {kind.code} requires a region mask")
        return ensure_mask(region.mask, (height, width)).copy()
    if kind == PromptKind.KEYPOINT:
        disc = imagecore.Ellipse(region.box.cx, region.box.cy, keypoint_radius, keypoint_radius)
        return imagecore.rasterize_ellipse(disc, height, width)
    if kind.value.startswith("c"):
        return imagecore.rasterize_ellipse(inscribed_ellipse(region.box), height, width)
    return imagecore.rasterize_box(region.box, height, width)


def _disk_structure(radius: float) -> np.ndarray | None:
    r = int(math.floor(radius))
    if r <= 0:
        return None
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= radius * radius


def expand_region(region: Region, scale: float) -> Region:
    """Grow or shrink a region about its center by ``scale`` in both axes.

    The box is rescaled analytically; the mask is dilated (scale > 1) or
    eroded (scale < 1) with a disc whose radius is |scale - 1| times the
    mask's equivalent-circle radius.
    """
    if scale <= 0:
        raise ValueError(f"expand scale must be positive, got {scale}")
    if scale == 1.0:
        return region
    box = region.box
    new_box = Box(
        x=box.cx - scale * box.w / 2,
        y=box.cy - scale * box.h / 2,
        w=scale * box.w,
        h=scale * box.h,
    )
    mask = region.mask
    if mask is not None:
        area = int(mask.sum())
        r_eq = math.sqrt(area / math.pi) if area else 0.0
        structure = _disk_structure(abs(scale - 1.0) * r_eq)
        if structure is not None and area:
            if scale > 1.0:
                mask = ndimage.binary_dilation(mask, structure=structure)
            else:
                mask = ndimage.binary_erosion(mask, structure=structure)
                if not mask.any():
                    raise DegenerateRegionError(
                        f"expand scale {scale} eroded the region mask to empty"
                    )
        else:
            mask = mask.copy()
    return Region(box=new_box, mask=mask)


def render_prompt(img: np.ndarray, region: Region, kind: PromptKind,
                  style: PromptStyle | None = None) -> np.ndarray:
    """Render one visual prompt onto a copy of the image.

    Crop kinds return the cutout; every other kind returns a full-size image.
    The style's expand scale is applied to the region before any support is
    built, so all kinds share one geometry path.
    """
    ensure_image(img)
    style = style or PromptStyle()
    region = expand_region(region, style.expand_scale)
    h, w = img.shape[:2]

    if kind == PromptKind.CROP:
        return imagecore.crop(img, region.box)
    if kind == PromptKind.COLOR_CROP:
        cut = imagecore.crop(img, region.box)
        full = np.ones(cut.shape[:2], dtype=bool)
        return imagecore.alpha_blend(cut, style.fill_color, style.alpha, full)
    if kind == PromptKind.KEYPOINT:
        return imagecore.draw_disc(img, (region.box.cx, region.box.cy),
                                   style.keypoint_radius, style.line_color)
    if kind == PromptKind.BOX:
        return imagecore.draw_box_outline(img, region.box, style.line_color, style.line_thickness)
    if kind == PromptKind.CIRCLE:
        return imagecore.draw_ellipse_outline(img, inscribed_ellipse(region.box),
                                              style.line_color, style.line_thickness)
    if kind == PromptKind.CONTOUR:
        if region.mask is None:
            raise ValueError("contour prompt requires a region mask")
        band = imagecore.mask_contour(ensure_mask(region.mask, (h, w)), style.line_thickness)
        out = img.copy()
        out[band] = style.line_color
        return out

    support = region_support(kind, region, h, w, style.keypoint_radius)
    digit = kind.value[1]
    if digit == "2":
        return imagecore.alpha_blend(img, style.fill_color, style.alpha, support)
    if digit == "3":
        return imagecore.composite(img, imagecore.to_grayscale(img), support)
    if digit == "4":
        return imagecore.composite(img, imagecore.gaussian_blur(img, style.blur_sigma), support)
    raise AssertionError(f"unhandled prompt kind {kind}")


def render_prompts(img: np.ndarray, regions: list[Region], kind: PromptKind,
                   style: PromptStyle | None = None) -> list[np.ndarray]:
    """Render one prompt kind for many regions of the same image.

    Equivalent to mapping :func:`render_prompt`, but the whole-image
    blurred/grayscale intermediate of reverse kinds is computed once and
    shared read-only across the regions.
    """
    ensure_image(img)
    style = style or PromptStyle()
    if not kind.is_reverse:
        return [render_prompt(img, region, kind, style) for region in regions]
    if kind.value[1] == "3":
        companion = imagecore.to_grayscale(img)
    else:
        companion = imagecore.gaussian_blur(img, style.blur_sigma)
    h, w = img.shape[:2]
    out = []
    for region in regions:
        region = expand_region(region, style.expand_scale)
        support = region_support(kind, region, h, w, style.keypoint_radius)
        out.append(imagecore.composite(img, companion, support))
    return out


def prepare_input(img: np.ndarray, mode: str, side: int) -> np.ndarray:
    """Turn an arbitrary-aspect image into a square scorer input."""
    ensure_image(img)
    if side < 1:
        raise ValueError(f"side must be >= 1, got {side}")
    if mode == "stretch":
        return imagecore.resize(img, side, side)
    if mode == "pad":
        return imagecore.resize(imagecore.pad_to_square(img), side, side)
    if mode == "center_crop":
        h, w = img.shape[:2]
        s = min(h, w)
        cut = imagecore.crop(img, Box((w - s) // 2, (h - s) // 2, s, s))
        return imagecore.resize(cut, side, side)
    raise ValueError(f"square mode must be one of {SQUARE_MODES}, got {mode!r}")


def default_square_mode(kind: PromptKind) -> str:
    """Per-kind preprocessing default: stretch for crops, pad for whole-image prompts."""
    return "stretch" if kind.is_crop else "pad"
