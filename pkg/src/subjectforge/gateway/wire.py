"""JSON wire format shared by every role.

Request::

    {"role": ..., "request_id": ..., "scene_id": ...,
     "inputs": {"prompt"?, "images"?: [base64 PNG], "box"?: [x0, y0, x1, y1],
                "vocabulary"?, "kind"?, "template"?, "seed"}}

Response::

    {"output": {"text" | "image_base64" | "detections" | "mask_rle" | "embedding"}}

Masks use the row-major run-length form of :meth:`RasterMask.to_rle`.
"""

from __future__ import annotations

import numpy as np

from ..errors import ProtocolError
from ..geometry import BBox, RasterMask
from ..imaging import from_base64_png, to_base64_png


def encode_request(role: str, inputs: dict, request_id: str, scene_id: str | None) -> dict:
    wire = {}
    for key, value in inputs.items():
        if key == "images":
            wire[key] = [to_base64_png(img) for img in value]
        elif key == "box":
            wire[key] = value.as_list()
        else:
            wire[key] = value
    return {"role": role, "inputs": wire, "request_id": request_id, "scene_id": scene_id}


def decode_request(doc: dict) -> tuple[str, dict, str, str | None]:
    try:
        role, raw, request_id = doc["role"], dict(doc["inputs"]), doc["request_id"]
    except (KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed request: {exc}") from exc
    inputs = {}
    for key, value in raw.items():
        if key == "images":
            inputs[key] = [from_base64_png(v) for v in value]
        elif key == "box":
            inputs[key] = BBox.from_seq(value)
        else:
            inputs[key] = value
    return role, inputs, request_id, doc.get("scene_id")


def encode_output(output: dict) -> dict:
    """Make an in-process backend's output JSON-safe."""
    out = {}
    for key, value in output.items():
        if key == "image" and isinstance(value, np.ndarray):
            out["image_base64"] = to_base64_png(value)
        elif isinstance(value, RasterMask):
            out["mask_rle"] = value.to_rle()
        elif isinstance(value, np.ndarray):
            out[key] = value.tolist()
        else:
            out[key] = value
    return {"output": out}
