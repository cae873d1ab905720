"""Pixel-space primitives: boxes, raster masks, grid tiling and patch IoU.

Boxes are half-open on their max edges, so a box ``(0, 0, 8, 8)`` covers
exactly 64 pixels. Grids are indexed row-major from the top-left cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence, Union

import numpy as np

from . import kernels
from .errors import InvalidArgument


@dataclass(frozen=True)
class BBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise InvalidArgument(f"BBox.{name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if not (0 <= self.x_min < self.x_max and 0 <= self.y_min < self.y_max):
            raise InvalidArgument(f"degenerate or negative box {self.as_list()}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    def intersection_area(self, other: "BBox") -> int:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if w <= 0 or h <= 0:
            return 0
        return w * h

    def fits(self, width: int, height: int) -> bool:
        return self.x_max <= width and self.y_max <= height

    def as_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_seq(cls, seq: Sequence[int]) -> "BBox":
        if len(seq) != 4:
            raise InvalidArgument(f"box needs 4 coordinates, got {len(seq)}")
        return cls(*seq)


class RasterMask:
    """Binary mask over a ``width`` x ``height`` image, stored row-major."""

    __slots__ = ("width", "height", "bits")

    def __init__(self, bits: np.ndarray):
        bits = np.asarray(bits)
        if bits.ndim != 2:
            raise InvalidArgument(f"mask must be 2-D, got shape {bits.shape}")
        self.bits = np.ascontiguousarray(bits != 0)
        self.bits.setflags(write=False)
        self.height, self.width = self.bits.shape

    @classmethod
    def from_box(cls, box: BBox, width: int, height: int) -> "RasterMask":
        if not box.fits(width, height):
            raise InvalidArgument(f"box {box.as_list()} outside {width}x{height} image")
        bits = np.zeros((height, width), dtype=bool)
        bits[box.y_min:box.y_max, box.x_min:box.x_max] = True
        return cls(bits)

    @classmethod
    def empty(cls, width: int, height: int) -> "RasterMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def to_rle(self) -> dict:
        """Row-major run lengths; the first run counts zeros."""
        return {"width": self.width, "height": self.height, "counts": kernels.rle_encode(self.bits)}

    @classmethod
    def from_rle(cls, doc: dict) -> "RasterMask":
        try:
            width, height, counts = int(doc["width"]), int(doc["height"]), doc["counts"]
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgument(f"malformed mask RLE: {exc}") from exc
        if width <= 0 or height <= 0:
            raise InvalidArgument(f"mask dimensions must be positive, got {width}x{height}")
        if not all(isinstance(c, int) and not isinstance(c, bool) for c in counts):
            raise InvalidArgument("mask RLE counts must be integers")
        try:
            flat = kernels.rle_decode(counts, width * height)
        except ValueError as exc:
            raise InvalidArgument(f"malformed mask RLE: {exc}") from exc
        return cls(flat.reshape(height, width))

    def __eq__(self, other):
        if not isinstance(other, RasterMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    def __repr__(self):
        return f"RasterMask({self.width}x{self.height}, popcount={self.popcount})"


Region = Union[BBox, RasterMask]


@dataclass(frozen=True)
class PatchRect:
    index: int
    rect: BBox


def grid_edges(size: int, M: int) -> list[int]:
    """Cell boundaries along one axis; the last cell absorbs the remainder."""
    base = size // M
    return [i * base for i in range(M)] + [size]


def tile_image(width: int, height: int, M: int) -> list[PatchRect]:
    if M < 1:
        raise InvalidArgument(f"grid side must be >= 1, got {M}")
    if width < M or height < M:
        raise InvalidArgument(f"image {width}x{height} is smaller than a {M}x{M} grid")
    xs = grid_edges(width, M)
    ys = grid_edges(height, M)
    return [
        PatchRect(r * M + c, BBox(xs[c], ys[r], xs[c + 1], ys[r + 1]))
        for r in range(M)
        for c in range(M)
    ]


def _region_area(region: Region) -> int:
    return region.area if isinstance(region, BBox) else region.popcount


def region_patch_iou(region: Region, patch: BBox) -> float:
    """Pixel-count IoU between a box or mask region and a patch rectangle."""
    if isinstance(region, RasterMask):
        if not patch.fits(region.width, region.height):
            raise InvalidArgument("patch lies outside the mask")
        inter = int(np.count_nonzero(region.bits[patch.y_min:patch.y_max, patch.x_min:patch.x_max]))
    else:
        inter = region.intersection_area(patch)
    area = _region_area(region)
    if area == 0:
        return 0.0
    return inter / (area + patch.area - inter)


def patch_overlaps(region: Region, width: int, height: int, M: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer (intersection, union) pixel counts of ``region`` with every patch."""
    xs = np.asarray(grid_edges(width, M), dtype=np.int64)
    ys = np.asarray(grid_edges(height, M), dtype=np.int64)
    if width < M or height < M:
        raise InvalidArgument(f"image {width}x{height} is smaller than a {M}x{M} grid")
    patch_area = np.outer(np.diff(ys), np.diff(xs)).ravel()
    if isinstance(region, RasterMask):
        if (region.width, region.height) != (width, height):
            raise InvalidArgument(
                f"mask is {region.width}x{region.height}, image is {width}x{height}"
            )
        inter = kernels.patch_intersections(region.bits, xs, ys)
    else:
        if not region.fits(width, height):
            raise InvalidArgument(f"box {region.as_list()} outside {width}x{height} image")
        ox = np.clip(np.minimum(xs[1:], region.x_max) - np.maximum(xs[:-1], region.x_min), 0, None)
        oy = np.clip(np.minimum(ys[1:], region.y_max) - np.maximum(ys[:-1], region.y_min), 0, None)
        inter = np.outer(oy, ox).ravel()
    union = _region_area(region) + patch_area - inter
    return inter.astype(np.int64), union.astype(np.int64)


def patch_ious(region: Region, width: int, height: int, M: int) -> list[float]:
    inter, union = patch_overlaps(region, width, height, M)
    if _region_area(region) == 0:
        return [0.0] * (M * M)
    return [int(i) / int(u) for i, u in zip(inter, union)]


def dynamic_threshold(ious: Iterable[float], lam: float) -> float:
    """Scaled mean of the strictly positive IoUs; zero when none are positive."""
    positive = [float(v) for v in ious if v > 0]
    if not positive:
        return 0.0
    return lam * (math.fsum(positive) / len(positive))


def area_filter(boxes: Sequence[BBox], image_w: int, image_h: int, delta: float) -> list[BBox]:
    """Drop boxes strictly smaller than ``delta`` of the image area.

    ``delta`` is read as the decimal it was written as, so 0.01 of a
    1000x1000 image is exactly 10000 pixels.
    """
    threshold = area_floor(image_w, image_h, delta)
    return [b for b in boxes if b.area >= threshold]


def area_floor(image_w: int, image_h: int, delta: float) -> Fraction:
    """Smallest box area that survives :func:`area_filter`, as an exact rational."""
    if not 0 <= delta <= 1:
        raise InvalidArgument(f"delta must lie in [0, 1], got {delta}")
    return Fraction(str(delta)) * image_w * image_h
