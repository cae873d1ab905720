"""Typed, validated client over the seven model roles.

A backend only moves JSON-shaped dictionaries; :class:`ModelGateway` owns
input checks and schema validation of every response, so nothing
half-validated leaves this module.
"""

from __future__ import annotations

import logging
import math
import threading
import uuid
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from ..errors import GatewayError, InvalidArgument, ProtocolError
from ..geometry import BBox, RasterMask
from ..imaging import as_rgb, from_base64_png, image_size

logger = logging.getLogger(__name__)

ROLES = (
    "text_gen",
    "image_gen",
    "vision_language",
    "image_transform",
    "detector",
    "segmenter",
    "embedder",
)


@dataclass(frozen=True)
class ModelEndpoint:
    role: str
    base_url: str = ""
    auth_token_env: str | None = None
    timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    dim: int | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise InvalidArgument(f"unknown model role {self.role!r}")
        if not self.timeout > 0:
            raise InvalidArgument("timeout must be positive")
        if self.max_retries < 0:
            raise InvalidArgument("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise InvalidArgument("max_in_flight must be >= 1")

    @classmethod
    def from_dict(cls, role: str, doc: Mapping) -> "ModelEndpoint":
        allowed = {"base_url", "auth_token_env", "timeout", "max_retries", "max_in_flight", "dim"}
        unknown = set(doc) - allowed
        if unknown:
            raise InvalidArgument(f"endpoint {role}: unknown keys {sorted(unknown)}")
        return cls(role=role, **dict(doc))


@dataclass(frozen=True)
class Detection:
    category: str
    box: BBox
    score: float

    def __post_init__(self):
        if not isinstance(self.category, str) or not self.category:
            raise InvalidArgument("detection category must be a non-empty string")
        if not 0.0 <= self.score <= 1.0:
            raise InvalidArgument(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise InvalidArgument("embedding must be a non-empty 1-D vector")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("embedding has non-finite values")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingVector):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash(self.values.tobytes())


def cosine(a, b) -> float:
    a = np.asarray(getattr(a, "values", a), dtype=np.float64)
    b = np.asarray(getattr(b, "values", b), dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"cannot compare embeddings of shapes {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidArgument("cosine of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


class Backend(Protocol):
    def send(self, role: str, inputs: dict, *, request_id: str, scene_id: str | None) -> dict:
        """Return the response's ``output`` object or raise a GatewayError."""


class ModelGateway:
    def __init__(self, backend, endpoints: Mapping[str, ModelEndpoint] | None = None):
        self._backends = backend if isinstance(backend, Mapping) else {r: backend for r in ROLES}
        self.endpoints = dict(endpoints or {})
        self._slots = {
            role: threading.BoundedSemaphore(
                self.endpoints[role].max_in_flight if role in self.endpoints else 8
            )
            for role in ROLES
        }

    def backend_ids(self) -> dict[str, str]:
        return {role: getattr(b, "backend_id", type(b).__name__) for role, b in self._backends.items()}

    def _call(self, role: str, inputs: dict, scene_id: str | None) -> dict:
        backend = self._backends.get(role)
        if backend is None:
            raise InvalidArgument(f"no backend configured for role {role!r}")
        request_id = uuid.uuid4().hex
        with self._slots[role]:
            try:
                out = backend.send(role, inputs, request_id=request_id, scene_id=scene_id)
            except GatewayError as exc:
                exc.role = exc.role or role
                exc.scene_id = exc.scene_id or scene_id
                raise
        if not isinstance(out, dict):
            raise ProtocolError(f"{role}: response output is not an object", role=role, scene_id=scene_id)
        return out

    def _text(self, role, out, scene_id) -> str:
        text = out.get("text")
        if not isinstance(text, str):
            raise ProtocolError(f"{role}: response lacks a text field", role=role, scene_id=scene_id)
        if not text.strip():
            raise ProtocolError(f"{role}: empty text response", role=role, scene_id=scene_id)
        return text

    def _image(self, role, out, scene_id) -> np.ndarray:
        try:
            if "image" in out and isinstance(out["image"], np.ndarray):
                return as_rgb(out["image"])
            if isinstance(out.get("image_base64"), str):
                return from_base64_png(out["image_base64"])
        except Exception as exc:
            raise ProtocolError(f"{role}: undecodable image: {exc}", role=role, scene_id=scene_id) from exc
        raise ProtocolError(f"{role}: response lacks an image", role=role, scene_id=scene_id)

    # text_gen ------------------------------------------------------------

    def generate_text(self, prompt: str, seed: int, *, template: str | None = None,
                      vocabulary: Sequence[str] | None = None, scene_id: str | None = None) -> str:
        if not isinstance(prompt, str) or not prompt.strip():
            raise InvalidArgument("prompt must be non-empty")
        inputs = {"prompt": prompt, "seed": int(seed)}
        if template:
            inputs["template"] = template
        if vocabulary is not None:
            inputs["vocabulary"] = list(vocabulary)
        return self._text("text_gen", self._call("text_gen", inputs, scene_id), scene_id)

    # vision_language ------------------------------------------------------

    def analyze_image(self, prompt: str, image: np.ndarray, seed: int, *, overlay: np.ndarray | None = None,
                      template: str | None = None, vocabulary: Sequence[str] | None = None,
                      scene_id: str | None = None) -> str:
        if not isinstance(prompt, str) or not prompt.strip():
            raise InvalidArgument("prompt must be non-empty")
        images = [as_rgb(image)] + ([as_rgb(overlay)] if overlay is not None else [])
        inputs = {"prompt": prompt, "images": images, "seed": int(seed)}
        if template:
            inputs["template"] = template
        if vocabulary is not None:
            inputs["vocabulary"] = list(vocabulary)
        out = self._call("vision_language", inputs, scene_id)
        return self._text("vision_language", out, scene_id)

    # image_gen / image_transform -----------------------------------------

    def generate_image(self, prompt: str, seed: int, *, scene_id: str | None = None) -> np.ndarray:
        if not isinstance(prompt, str) or not prompt.strip():
            raise InvalidArgument("prompt must be non-empty")
        out = self._call("image_gen", {"prompt": prompt, "seed": int(seed)}, scene_id)
        return self._image("image_gen", out, scene_id)

    def transform_image(self, image: np.ndarray, prompt: str, seed: int, *,
                        scene_id: str | None = None) -> np.ndarray:
        if not isinstance(prompt, str) or not prompt.strip():
            raise InvalidArgument("prompt must be non-empty")
        inputs = {"prompt": prompt, "images": [as_rgb(image)], "seed": int(seed)}
        out = self._call("image_transform", inputs, scene_id)
        return self._image("image_transform", out, scene_id)

    # detector ---------------------------------------------------------------

    def detect(self, image: np.ndarray, vocabulary: Sequence[str], seed: int, *,
               scene_id: str | None = None) -> list[Detection]:
        vocabulary = list(vocabulary)
        if not vocabulary:
            raise InvalidArgument("detection vocabulary must be non-empty")
        image = as_rgb(image)
        out = self._call("detector", {"images": [image], "vocabulary": vocabulary, "seed": int(seed)}, scene_id)
        raw = out.get("detections")
        if not isinstance(raw, list):
            raise ProtocolError("detector: response lacks a detections list", role="detector", scene_id=scene_id)
        w, h = image_size(image)
        known = set(vocabulary)
        dets = []
        for i, d in enumerate(raw):
            try:
                category, box, score = d["category"], d["box"], d["score"]
                if category not in known:
                    raise ProtocolError(f"category {category!r} is outside the vocabulary")
                if isinstance(score, bool) or not isinstance(score, (int, float)) or not math.isfinite(score):
                    raise ProtocolError(f"score {score!r} is not a number")
                bbox = BBox.from_seq(box)
                if not bbox.fits(w, h):
                    raise ProtocolError(f"box {bbox.as_list()} outside {w}x{h} image")
                dets.append(Detection(category, bbox, float(score)))
            except ProtocolError as exc:
                raise ProtocolError(f"detector: detections[{i}]: {exc}", role="detector", scene_id=scene_id) from exc
            except (KeyError, TypeError, InvalidArgument) as exc:
                raise ProtocolError(f"detector: detections[{i}] malformed: {exc}", role="detector",
                                    scene_id=scene_id) from exc
        return dets

    # segmenter --------------------------------------------------------------

    def segment(self, image: np.ndarray, box: BBox, seed: int, *, scene_id: str | None = None) -> RasterMask:
        image = as_rgb(image)
        w, h = image_size(image)
        if not box.fits(w, h):
            raise InvalidArgument(f"box {box.as_list()} outside {w}x{h} image")
        out = self._call("segmenter", {"images": [image], "box": box, "seed": int(seed)}, scene_id)
        try:
            mask = RasterMask.from_rle(out["mask_rle"])
        except (KeyError, TypeError, InvalidArgument) as exc:
            raise ProtocolError(f"segmenter: bad mask: {exc}", role="segmenter", scene_id=scene_id) from exc
        if (mask.width, mask.height) != (w, h):
            raise ProtocolError(
                f"segmenter: mask is {mask.width}x{mask.height}, image is {w}x{h}",
                role="segmenter", scene_id=scene_id,
            )
        return mask

    # embedder ---------------------------------------------------------------

    def embed(self, kind: str, payload, *, scene_id: str | None = None) -> EmbeddingVector:
        if kind == "text":
            if not isinstance(payload, str) or not payload.strip():
                raise InvalidArgument("text payload must be non-empty")
            inputs = {"kind": "text", "prompt": payload}
        elif kind == "image":
            payload = as_rgb(payload)
            if payload.size == 0:
                raise InvalidArgument("image payload must be non-empty")
            inputs = {"kind": "image", "images": [payload]}
        else:
            raise InvalidArgument(f"embedding kind must be 'text' or 'image', got {kind!r}")
        out = self._call("embedder", inputs, scene_id)
        try:
            vec = np.asarray(out["embedding"], dtype=np.float64)
            emb = EmbeddingVector(vec)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"embedder: bad embedding: {exc}", role="embedder", scene_id=scene_id) from exc
        declared = self.endpoints["embedder"].dim if "embedder" in self.endpoints else None
        if declared is not None and emb.dim != declared:
            raise ProtocolError(f"embedder: got dim {emb.dim}, endpoint declares {declared}",
                                role="embedder", scene_id=scene_id)
        norm = float(np.linalg.norm(emb.values))
        if norm == 0.0:
            raise ProtocolError("embedder: zero vector", role="embedder", scene_id=scene_id)
        return EmbeddingVector(emb.values / norm)
