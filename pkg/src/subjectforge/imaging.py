"""Image plumbing: PNG codecs, crops and annotated overlays.

Images travel through the package as ``uint8`` arrays of shape (H, W, 3).
"""

from __future__ import annotations

import base64
import functools
import io
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .errors import InvalidArgument
from .geometry import BBox, RasterMask


def as_rgb(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise InvalidArgument(f"expected an RGB image, got shape {arr.shape}")
    return np.ascontiguousarray(arr[..., :3], dtype=np.uint8)


def image_size(image: np.ndarray) -> tuple[int, int]:
    """(width, height)."""
    return int(image.shape[1]), int(image.shape[0])


def png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(as_rgb(image), "RGB").save(buf, format="PNG")
    return buf.getvalue()


def from_png_bytes(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return as_rgb(np.asarray(im.convert("RGB")))


def to_base64_png(image: np.ndarray) -> str:
    return base64.b64encode(png_bytes(image)).decode("ascii")


def from_base64_png(text: str) -> np.ndarray:
    return from_png_bytes(base64.b64decode(text, validate=True))


def save_png(image: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(png_bytes(image))
    tmp.replace(path)


def load_png(path: Path) -> np.ndarray:
    return from_png_bytes(Path(path).read_bytes())


def crop(image: np.ndarray, box: BBox) -> np.ndarray:
    w, h = image_size(image)
    if not box.fits(w, h):
        raise InvalidArgument(f"box {box.as_list()} outside {w}x{h} image")
    return image[box.y_min:box.y_max, box.x_min:box.x_max].copy()


def masked_crop(image: np.ndarray, box: BBox, mask: RasterMask) -> np.ndarray:
    """Box crop with every pixel outside ``mask`` zeroed."""
    out = crop(image, box)
    keep = mask.bits[box.y_min:box.y_max, box.x_min:box.x_max]
    out[~keep] = 0
    return out


@functools.lru_cache(maxsize=1)
def _label_font() -> ImageFont.ImageFont:
    # The built-in bitmap font renders ~40x faster than the TrueType default.
    return ImageFont.load_default_imagefont()


def _colour(i: int) -> tuple[int, int, int]:
    palette = [(230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
               (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212)]
    return palette[i % len(palette)]


def draw_overlay(image: np.ndarray, boxes: Sequence[BBox], labels: Sequence[str]) -> np.ndarray:
    """Draw numbered boxes and their labels on a copy of ``image``."""
    canvas = Image.fromarray(as_rgb(image), "RGB")
    draw = ImageDraw.Draw(canvas)
    for i, (box, label) in enumerate(zip(boxes, labels)):
        colour = _colour(i)
        draw.rectangle([box.x_min, box.y_min, box.x_max - 1, box.y_max - 1], outline=colour, width=1)
        draw.text((box.x_min + 1, box.y_min + 1), label, fill=colour, font=_label_font())
    return np.asarray(canvas)
