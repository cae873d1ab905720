"""Hand-built training records for tests that do not need a full forge run."""

import random

from subjectforge.geometry import BBox
from subjectforge.layout import assign_patches, serialize_layout
from subjectforge.narrative import CoTText, InstructionText
from subjectforge.scene_forge import SubjectRecord
from subjectforge.store import TrainingRecord

CATS = ["dog", "cat", "lamp", "vase", "chair", "piano", "flower", "tree", "ship", "desk", "clock", "book"]


def box_with_area(area, x, y, size):
    """A box of exactly ``area`` pixels (1 x area if needed) placed at (x, y)."""
    for w in range(min(int(area ** 0.5), size - x), 0, -1):
        if area % w == 0 and area // w <= size - y:
            return BBox(x, y, x + w, y + area // w)
    raise ValueError(f"cannot place area {area} at {(x, y)} in {size}")


def make_record(areas, *, with_ids=True, size=64, M=8, lam=0.05, scene_id="scene_000000", cats=None):
    cats = cats or [CATS[i % len(CATS)] for i in range(len(areas))]
    subjects = []
    for i, (area, cat) in enumerate(zip(areas, cats)):
        box = box_with_area(area, (i * 5) % (size // 2), (i * 3) % (size // 2), size)
        subjects.append(SubjectRecord(i, cat, box, 0.9, crop=f"{scene_id}/subject_{i}_crop.png",
                                      transformed=f"{scene_id}/subject_{i}.png"))
    if with_ids:
        text = " ".join(f"The {s.category} from image {s.subject_id} sits near the window." for s in subjects)
    else:
        text = "A scene with " + ", ".join(f"a {s.category}" for s in subjects) + "."
    cot = " ".join(f"The {s.category} from image {s.subject_id} is placed on the left." for s in subjects)
    grid = assign_patches(subjects, size, size, M, lam)
    return TrainingRecord(
        scene_id=scene_id,
        subject_images=[s.transformed for s in subjects],
        target_image=f"{scene_id}/target.png",
        target_size=(size, size),
        instruction=InstructionText.from_text(text, with_ids),
        cot=CoTText.from_text(cot),
        layout_prompt=serialize_layout(grid),
        subjects=subjects,
        provenance={"grid": {"M": M, "lambda": lam, "pooled": False}, "n_max": 12},
    )


def random_record(rng: random.Random, S, **kw):
    areas = [rng.randint(1, 20) * rng.randint(1, 20) for _ in range(S)]
    return make_record(areas, **kw)
