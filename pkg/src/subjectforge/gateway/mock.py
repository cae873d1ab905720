"""Seeded in-process stand-ins for every model role.

Outputs depend only on the request inputs, the backend seed and the scene
id, so runs are reproducible byte for byte. ``failure_rates`` injects
independent per-scene failures keyed by stage name:

=================  ===========================================================
t2i_mismatch       the scene check rejects every caption/image attempt
detection_sparse   the detector only returns specks below any sane area floor
ovd_verify         box verification rejects every box
vlm_validation     the instruction drops one subject (or its id) for a made-up one
cot_short          chain-of-thought replies are a few words long
segmentation       the segmenter answers with a mask of the wrong size
transform          the image-to-image call fails at the transport level
=================  ===========================================================
"""

from __future__ import annotations

import hashlib
import json
import math
import re

import numpy as np

from ..errors import InvalidArgument, ModelCallFailed, ProtocolError
from ..geometry import BBox, RasterMask
from ..seeding import derive_seed, np_rng, py_rng, unit_uniform

_SETTINGS = [
    "cozy living room", "sunlit garden", "quiet studio", "busy street corner",
    "coastal highway", "tidy kitchen", "school classroom", "warehouse loading bay",
]
_VERBS = ["rests beside", "sits near", "stands behind", "leans against", "is placed in front of"]
_LANDMARKS = [
    "near the window", "on the left side", "in the foreground", "beside the wall",
    "at the centre of the scene", "on the right side", "in the background", "under the lamp light",
]
_HALLUCINATED = ["hovering teapot", "glass unicorn", "marble sphinx", "paper dragon"]
_FILLER = [
    "The light falls softly across every surface and keeps the palette warm.",
    "Each object keeps enough space around it so that its outline stays readable.",
    "The floor plane recedes toward the horizon, which anchors the perspective.",
    "Shadows fall to the lower right, consistent with a single key light.",
    "Smaller props are grouped so that the eye moves from the front to the back.",
    "The background stays calm and uncluttered to support the main subjects.",
]
_ID_RE = re.compile(r"\bimage\s(\d+)", re.IGNORECASE)


def _image_digest(image: np.ndarray) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(repr(image.shape).encode())
    h.update(np.ascontiguousarray(image).tobytes())
    return h.digest()


class MockBackend:
    def __init__(self, seed: int = 0, *, image_size=(128, 128), embed_dim: int = 64,
                 failure_rates: dict | None = None, cot_words: int = 40, box_reject_rate: float = 0.0):
        self.seed = int(seed)
        self.image_size = tuple(image_size)
        self.embed_dim = int(embed_dim)
        self.failure_rates = dict(failure_rates or {})
        for stage, rate in self.failure_rates.items():
            if not 0.0 <= rate <= 1.0:
                raise InvalidArgument(f"failure rate for {stage} must lie in [0, 1]")
        self.cot_words = int(cot_words)
        self.box_reject_rate = float(box_reject_rate)
        self.backend_id = f"mock:{self.seed}"

    def fails(self, stage: str, scene_id, seed) -> bool:
        rate = self.failure_rates.get(stage, 0.0)
        if rate <= 0.0:
            return False
        key = scene_id if scene_id is not None else f"seed:{seed}"
        return unit_uniform(self.seed, "inject", stage, key) < rate

    def send(self, role: str, inputs: dict, *, request_id: str | None = None,
             scene_id: str | None = None) -> dict:
        handler = getattr(self, "_" + role, None)
        if handler is None:
            raise ProtocolError(f"mock backend has no role {role!r}", role=role, scene_id=scene_id)
        return handler(inputs, scene_id)

    # text_gen -------------------------------------------------------------

    def _text_gen(self, inputs, scene_id):
        prompt, seed = inputs["prompt"], inputs.get("seed", 0)
        template = inputs.get("template")
        if template == "caption":
            return {"text": self._caption(inputs.get("vocabulary") or [], seed, prompt)}
        if template == "simdict":
            return {"text": self._simdict(inputs.get("vocabulary") or [], prompt, seed)}
        digest = hashlib.blake2b(f"{self.seed}|{seed}|{prompt}".encode(), digest_size=6).hexdigest()
        return {"text": f"Mock response {digest} to a {len(prompt.split())}-word prompt."}

    def _caption(self, classes, seed, prompt) -> str:
        rng = py_rng(self.seed, "caption", seed, prompt)
        k = len(classes)
        if k == 0:
            return "An empty room with bare walls."
        m = max(math.ceil(k / 2), k - rng.randint(0, k // 4))
        picked = sorted(rng.sample(range(k), m))
        setting = rng.choice(_SETTINGS)
        parts = []
        for n, idx in enumerate(picked):
            if n == 0:
                parts.append(f"a {classes[idx]} stands at the centre")
            else:
                parts.append(f"a {classes[idx]} {rng.choice(_VERBS)} it")
        return f"In a {setting}, " + ", ".join(parts) + "."

    def _simdict(self, vocabulary, prompt, seed) -> str:
        m = re.search(r'similar to "([^"]+)"', prompt)
        key = m.group(1) if m else ""
        limit_m = re.search(r"up to (\d+)", prompt)
        limit = int(limit_m.group(1)) if limit_m else 3
        options = [v for v in vocabulary if v != key]
        rng = py_rng(self.seed, "simdict", key, seed)
        picked = rng.sample(options, min(limit, len(options)))
        return ", ".join(picked)

    # vision_language ------------------------------------------------------

    def _vision_language(self, inputs, scene_id):
        template, seed = inputs.get("template"), inputs.get("seed", 0)
        vocab = list(inputs.get("vocabulary") or [])
        if template == "object_filter":
            if self.fails("t2i_mismatch", scene_id, seed) and vocab:
                return {"text": f"['Missing class: {vocab[0]}'] Please revise."}
            return {"text": "Meets all criteria."}
        if template == "box_verify":
            if self.fails("ovd_verify", scene_id, seed):
                bad = list(range(len(vocab)))
            else:
                bad = [i for i in range(len(vocab))
                       if unit_uniform(self.seed, "box", scene_id, seed, i) < self.box_reject_rate]
            return {"text": json.dumps({"incorrect": bad})}
        if template == "instruction_ids":
            return {"text": self._instruction_ids(vocab, seed, scene_id)}
        if template == "instruction_plain":
            return {"text": self._instruction_plain(vocab, seed, scene_id)}
        if template == "cot":
            return {"text": self._cot(inputs["prompt"], vocab, seed, scene_id)}
        digest = hashlib.blake2b(f"{self.seed}|{seed}|{inputs['prompt']}".encode(), digest_size=6).hexdigest()
        return {"text": f"The image shows a composed scene ({digest})."}

    def _instruction_ids(self, categories, seed, scene_id) -> str:
        rng = py_rng(self.seed, "instruction", seed)
        ids = list(range(len(categories)))
        if self.fails("vlm_validation", scene_id, seed) and ids:
            victim = rng.choice(ids)
            ids[victim] = len(categories) + rng.randint(0, 5)
        sentences = []
        for sid, cat in zip(ids, categories):
            sentences.append(f"The {cat} from image {sid} {rng.choice(['sits', 'rests', 'stands'])} "
                             f"{rng.choice(_LANDMARKS)}.")
        return " ".join(sentences)

    def _instruction_plain(self, categories, seed, scene_id) -> str:
        rng = py_rng(self.seed, "instruction", seed)
        distinct = list(dict.fromkeys(categories))
        if self.fails("vlm_validation", scene_id, seed) and distinct:
            distinct[rng.randrange(len(distinct))] = rng.choice(_HALLUCINATED)
        phrases = [f"a {c} {rng.choice(_LANDMARKS)}" for c in distinct]
        return "A harmonious scene with " + ", ".join(phrases) + "."

    def _cot(self, prompt, categories, seed, scene_id) -> str:
        rng = py_rng(self.seed, "cot", seed)
        if self.fails("cot_short", scene_id, seed):
            return "A short scene."
        m = re.search(r'\*\*Initial Prompt\*\*:\s*"(.*?)"\s*\n', prompt, re.S)
        initial = m.group(1) if m else ""
        ids = sorted({int(x) for x in _ID_RE.findall(initial)})
        lines = ["### Detailed Composition and Spatial Relationships", "", "#### Background:",
                 f"The scene is set in a {rng.choice(_SETTINGS)} with an even, quiet backdrop.", "",
                 "#### Foreground:"]
        if ids:
            for i in ids:
                cat = categories[i] if i < len(categories) else "object"
                lines.append(f"The {cat} from image {i} is placed {rng.choice(_LANDMARKS)}, "
                             f"and it {rng.choice(_VERBS)} the neighbouring objects.")
        else:
            for cat in dict.fromkeys(categories):
                lines.append(f"The {cat} is placed {rng.choice(_LANDMARKS)}.")
        lines += ["", "#### Overall Scene:"]
        text = "\n".join(lines)
        while len(text.split()) < self.cot_words:
            text += " " + rng.choice(_FILLER)
        return text

    # image_gen / image_transform -----------------------------------------

    def _image_gen(self, inputs, scene_id):
        w, h = self.image_size
        rng = np_rng(self.seed, "t2i", inputs.get("seed", 0), inputs["prompt"])
        coarse = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        image = np.repeat(np.repeat(coarse, -(-h // 8), axis=0), -(-w // 8), axis=1)[:h, :w]
        return {"image": np.ascontiguousarray(image)}

    def _image_transform(self, inputs, scene_id):
        seed = inputs.get("seed", 0)
        if self.fails("transform", scene_id, seed):
            raise ModelCallFailed("mock image_transform unavailable", role="image_transform", scene_id=scene_id)
        src = inputs["images"][0]
        tint = derive_seed(self.seed, "tint", seed, inputs["prompt"]) % 64
        out = (src[:, ::-1].astype(np.int16) + tint) % 256
        return {"image": out.astype(np.uint8)}

    # detector -------------------------------------------------------------

    def _detector(self, inputs, scene_id):
        image = inputs["images"][0]
        h, w = image.shape[:2]
        vocab = list(inputs["vocabulary"])
        seed = inputs.get("seed", 0)
        rng = py_rng(self.seed, "detect", seed, *vocab)
        dets = []

        def box(min_frac, max_frac):
            bw = max(1, int(w * rng.uniform(min_frac, max_frac)))
            bh = max(1, int(h * rng.uniform(min_frac, max_frac)))
            x0 = rng.randrange(0, w - bw + 1)
            y0 = rng.randrange(0, h - bh + 1)
            return [x0, y0, x0 + bw, y0 + bh]

        if self.fails("detection_sparse", scene_id, seed):
            for cat in vocab[:3]:
                x0, y0 = rng.randrange(0, w - 2), rng.randrange(0, h - 2)
                dets.append({"category": cat, "box": [x0, y0, x0 + 2, y0 + 2], "score": 0.2})
            return {"detections": dets}
        for cat in vocab:
            copies = 2 if (len(vocab) == 1 or rng.random() < 0.25) else 1
            for _ in range(copies):
                dets.append({"category": cat, "box": box(0.15, 0.5), "score": round(rng.uniform(0.3, 0.95), 3)})
        for _ in range(rng.randint(0, 2)):
            x0, y0 = rng.randrange(0, w - 3), rng.randrange(0, h - 3)
            dets.append({"category": rng.choice(vocab), "box": [x0, y0, x0 + 3, y0 + 3],
                         "score": round(rng.uniform(0.1, 0.4), 3)})
        rng.shuffle(dets)
        return {"detections": dets}

    # segmenter ------------------------------------------------------------

    def _segmenter(self, inputs, scene_id):
        image = inputs["images"][0]
        h, w = image.shape[:2]
        box = inputs["box"]
        if not isinstance(box, BBox):
            box = BBox.from_seq(box)
        if self.fails("segmentation", scene_id, inputs.get("seed", 0)):
            return {"mask_rle": RasterMask.empty(w, h + 1).to_rle()}
        bits = np.zeros((h, w), dtype=bool)
        bits[box.y_min + 1:box.y_max - 1, box.x_min + 1:box.x_max - 1] = True
        return {"mask_rle": RasterMask(bits).to_rle()}

    # embedder -------------------------------------------------------------

    def _embedder(self, inputs, scene_id):
        kind = inputs.get("kind", "text")
        if kind == "image":
            digest = _image_digest(inputs["images"][0])
        else:
            digest = inputs["prompt"].encode("utf-8")
        vec = np_rng(self.seed, "embed", kind, digest).standard_normal(self.embed_dim)
        vec /= np.linalg.norm(vec)
        return {"embedding": vec.tolist()}
