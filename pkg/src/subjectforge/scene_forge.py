"""Scene synthesis: categories, caption, target image, subjects and their views.

Each step is a plain function over a :class:`~subjectforge.gateway.ModelGateway`
and raises :class:`~subjectforge.errors.StageFailure` with the stage name
when a scene has to be dropped.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import MutableMapping, Sequence

import numpy as np

from .errors import InvalidArgument, StageFailure, stage_guard
from .gateway.client import Detection
from .geometry import BBox, RasterMask, area_floor
from .imaging import crop, draw_overlay, image_size
from .narrative import mentions
from .prompts import render
from .seeding import derive_seed, py_rng

CAPTION_ATTEMPTS = 3
TRANSFORM_MODES = ("simple", "complex")


@dataclass
class SceneDraft:
    scene_id: str
    candidate_categories: list[str]
    rng_seed: int
    chosen_categories: list[str] = field(default_factory=list)
    caption: str = ""
    target_image: np.ndarray | None = None
    caption_attempts: int = 0


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: int
    category: str
    box: BBox
    score: float = 1.0
    mask: RasterMask | None = None
    region_mode: str = "box"
    crop: str = ""
    transformed: str = ""
    transform_kind: str = "simple"
    transform_template: str = ""
    transform_classes: tuple = ()

    def __post_init__(self):
        if self.subject_id < 0:
            raise InvalidArgument("subject_id must be >= 0")
        if self.region_mode not in ("mask", "box"):
            raise InvalidArgument(f"region_mode must be 'mask' or 'box', got {self.region_mode!r}")
        if self.transform_kind not in TRANSFORM_MODES:
            raise InvalidArgument(f"transform_kind must be one of {TRANSFORM_MODES}")

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "category": self.category,
            "box": self.box.as_list(),
            "score": self.score,
            "mask_rle": self.mask.to_rle() if self.mask is not None else None,
            "region_mode": self.region_mode,
            "crop": self.crop,
            "transformed": self.transformed,
            "transform_kind": self.transform_kind,
            "transform_template": self.transform_template,
            "transform_classes": list(self.transform_classes),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SubjectRecord":
        mask = doc.get("mask_rle")
        return cls(
            subject_id=int(doc["subject_id"]),
            category=doc["category"],
            box=BBox.from_seq(doc["box"]),
            score=float(doc["score"]),
            mask=RasterMask.from_rle(mask) if mask is not None else None,
            region_mode=doc["region_mode"],
            crop=doc["crop"],
            transformed=doc["transformed"],
            transform_kind=doc["transform_kind"],
            transform_template=doc.get("transform_template", ""),
            transform_classes=tuple(doc.get("transform_classes", ())),
        )


def sample_candidates(vocabulary: Sequence[str], n_min: int, n_max: int, rng_seed: int) -> list[str]:
    """Draw between ``2*n_min`` and ``2*n_max`` distinct categories.

    Raises:
        InvalidArgument: bad bounds or a vocabulary smaller than ``2*n_max``.
    """
    if not 1 <= n_min <= n_max:
        raise InvalidArgument(f"need 1 <= n_min <= n_max, got {n_min}, {n_max}")
    vocabulary = list(dict.fromkeys(vocabulary))
    if len(vocabulary) < 2 * n_max:
        raise InvalidArgument(f"vocabulary has {len(vocabulary)} categories, need at least {2 * n_max}")
    rng = py_rng(rng_seed, "candidates")
    k = rng.randint(2 * n_min, 2 * n_max)
    return rng.sample(vocabulary, k)


def _passes_filter(reply: str) -> bool:
    return "meets all criteria" in reply.lower() and "please revise" not in reply.lower()


def compose_scene(gateway, draft: SceneDraft, *, max_attempts: int = CAPTION_ATTEMPTS) -> SceneDraft:
    """Caption the candidates, render the caption and check the result.

    An attempt fails when the caption names fewer than half of the
    candidates or the vision-language check asks for a revision.

    Raises:
        StageFailure: ``t2i_mismatch`` after ``max_attempts`` failed attempts.
    """
    candidates = draft.candidate_categories
    if not candidates:
        raise InvalidArgument("draft has no candidate categories")
    need = math.ceil(len(candidates) / 2)
    prompt = render("caption", classes_str=", ".join(candidates))
    reason = ""
    for attempt in range(max_attempts):
        draft.caption_attempts = attempt + 1
        seed = derive_seed(draft.rng_seed, "caption", attempt)
        with stage_guard("t2i_mismatch", draft.scene_id):
            caption = gateway.generate_text(prompt, seed, template="caption", vocabulary=candidates,
                                            scene_id=draft.scene_id)
            chosen = [c for c in candidates if mentions(caption, c)]
            if len(chosen) < need:
                reason = f"caption names {len(chosen)} of {len(candidates)} candidates"
                continue
            image = gateway.generate_image(caption, seed, scene_id=draft.scene_id)
            check = render("object_filter", caption=caption, classes_joined=", ".join(chosen))
            reply = gateway.analyze_image(check, image, seed, template="object_filter", vocabulary=chosen,
                                          scene_id=draft.scene_id)
        if not _passes_filter(reply):
            reason = f"filter check: {reply.strip()[:120]}"
            continue
        draft.chosen_categories = chosen
        draft.caption = caption
        draft.target_image = image
        return draft
    raise StageFailure("t2i_mismatch", draft.scene_id, f"{max_attempts} attempts failed; last: {reason}")


def select_subjects(detections: Sequence[Detection], image_w: int, image_h: int, delta: float, n_max: int,
                    *, scene_id: str | None = None) -> list[Detection]:
    """Pick up to ``n_max`` detections, spreading picks across categories.

    Boxes below the area floor are dropped. The rest are taken round-robin
    over categories (categories ordered by their largest box), largest box
    first inside each category.

    Raises:
        StageFailure: ``detection_sparse`` when fewer than two remain.
    """
    if n_max < 1:
        raise InvalidArgument("n_max must be >= 1")
    floor = area_floor(image_w, image_h, delta)
    kept = [d for d in detections if d.box.area >= floor]
    groups: dict[str, list[tuple[int, Detection]]] = {}
    for pos, d in enumerate(kept):
        groups.setdefault(d.category, []).append((pos, d))
    for members in groups.values():
        members.sort(key=lambda item: (-item[1].box.area, item[0]))
    order = sorted(groups, key=lambda c: (-groups[c][0][1].box.area, groups[c][0][0]))
    picked: list[Detection] = []
    depth = 0
    while len(picked) < n_max:
        row = [groups[c][depth][1] for c in order if depth < len(groups[c])]
        if not row:
            break
        picked.extend(row[: n_max - len(picked)])
        depth += 1
    if len(picked) < 2:
        raise StageFailure("detection_sparse", scene_id,
                           f"{len(picked)} of {len(detections)} detections survive the area floor")
    return picked


def _parse_verdict(reply: str, count: int) -> set[int]:
    match = re.search(r"\{.*\}", reply, re.S)
    if match is None:
        raise ValueError("no JSON object in reply")
    doc = json.loads(match.group(0))
    bad = doc.get("incorrect")
    if not isinstance(bad, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in bad):
        raise ValueError("'incorrect' must be a list of integers")
    out = set(bad)
    if any(not 0 <= i < count for i in out):
        raise ValueError(f"box index outside 0..{count - 1}")
    return out


def verify_subjects(gateway, target: np.ndarray, selected: Sequence[Detection], seed: int,
                    *, scene_id: str | None = None) -> list[Detection]:
    """Have the vision-language model judge an overlay of the selected boxes.

    Raises:
        StageFailure: ``ovd_verify`` when the call fails, the reply cannot
            be read, or fewer than two boxes are approved.
    """
    if not selected:
        raise InvalidArgument("nothing to verify")
    labels = [f"{i}: {d.category} {d.score:.2f}" for i, d in enumerate(selected)]
    overlay = draw_overlay(target, [d.box for d in selected], labels)
    listing = "\n".join(f"{i}: {d.category} {d.box.as_list()} score {d.score:.2f}" for i, d in enumerate(selected))
    prompt = render("box_verify", boxes=listing)
    with stage_guard("ovd_verify", scene_id):
        reply = gateway.analyze_image(prompt, target, seed, overlay=overlay, template="box_verify",
                                      vocabulary=[d.category for d in selected], scene_id=scene_id)
    try:
        rejected = _parse_verdict(reply, len(selected))
    except ValueError as exc:
        raise StageFailure("ovd_verify", scene_id, f"unreadable verdict: {exc}") from exc
    survivors = [d for i, d in enumerate(selected) if i not in rejected]
    if len(survivors) < 2:
        raise StageFailure("ovd_verify", scene_id, f"{len(survivors)} boxes approved")
    return survivors


def subjects_from_detections(scene_id: str, detections: Sequence[Detection]) -> list[SubjectRecord]:
    return [
        SubjectRecord(subject_id=i, category=d.category, box=d.box, score=d.score,
                      crop=f"{scene_id}/subject_{i}_crop.png", transformed=f"{scene_id}/subject_{i}.png")
        for i, d in enumerate(detections)
    ]


def transform_prompt(category: str, mode: str, similar: Sequence[str], rng_seed: int) -> tuple[str, str, tuple]:
    """Build the view-transformation prompt for one subject.

    ``complex`` mode places the subject among one to three related
    categories; with no related categories available it falls back to
    ``simple``.

    Returns:
        (prompt, template id, related categories used)
    """
    if mode not in TRANSFORM_MODES:
        raise InvalidArgument(f"mode must be one of {TRANSFORM_MODES}, got {mode!r}")
    related = [c for c in dict.fromkeys(similar) if c != category]
    if mode == "simple" or not related:
        return render("transform_simple", class_name=category), "transform_simple", ()
    rng = py_rng(rng_seed, "complex", category)
    k = rng.randint(1, min(3, len(related)))
    picks = rng.sample(related, k)
    fields = {f"random_class_{j + 1}": c for j, c in enumerate(picks)}
    template_id = f"transform_complex_{k}"
    return render(template_id, class_name=category, **fields), template_id, tuple(picks)


def transform_subject(gateway, subject: SubjectRecord, images: MutableMapping[str, np.ndarray], mode: str,
                      similarity: dict, rng_seed: int, *, scene_id: str | None = None) -> SubjectRecord:
    """Produce the view-transformed image of ``subject`` from its crop.

    ``images`` maps image references to pixel arrays; the crop is read from
    it and the transformed image is stored under ``subject.transformed``.

    Raises:
        StageFailure: ``transform`` when the image-to-image call fails.
    """
    source = images.get(subject.crop)
    if source is None:
        raise InvalidArgument(f"crop {subject.crop!r} not available")
    prompt, template_id, classes = transform_prompt(subject.category, mode, similarity.get(subject.category, ()),
                                                    rng_seed)
    kind = "complex" if classes else "simple"
    with stage_guard("transform", scene_id):
        out = gateway.transform_image(source, prompt, derive_seed(rng_seed, "i2i"), scene_id=scene_id)
    images[subject.transformed] = out
    return replace(subject, transform_kind=kind, transform_template=template_id, transform_classes=classes)


def crop_subjects(target: np.ndarray, subjects: Sequence[SubjectRecord],
                  images: MutableMapping[str, np.ndarray]) -> None:
    """Store each subject's raw box crop under its ``crop`` reference."""
    w, h = image_size(target)
    for s in subjects:
        if not s.box.fits(w, h):
            raise InvalidArgument(f"subject {s.subject_id} box outside the target")
        images[s.crop] = crop(target, s.box)
