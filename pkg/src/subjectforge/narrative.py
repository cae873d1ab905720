"""User instructions, chain-of-thought scene descriptions and subject-id hygiene.

Subjects are referred to in text as ``image {k}``; :func:`sanitize_ids`
strips references to ids that do not exist in the scene so downstream
records never point at a missing subject image.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import StageFailure, stage_guard
from .layout import ordered_unique
from .prompts import render
from .seeding import derive_seed

ID_RE = re.compile(r"\bimage\s(\d+)", re.IGNORECASE)
_FROM_RE = re.compile(r"\bfrom\s+image\s(\d+)", re.IGNORECASE)
_PAREN_RE = re.compile(r"\(\s*image\s(\d+)\s*\)", re.IGNORECASE)

LIVE_MIN_WORDS = 300
MOCK_MIN_WORDS = 30
COT_ATTEMPTS = 3


def extract_ids(text: str) -> set[int]:
    """All subject ids referenced as ``image <n>`` (case-insensitive)."""
    return {int(m.group(1)) for m in ID_RE.finditer(text)}


def _delete_span(text: str, start: int, end: int) -> str:
    # Take one neighbouring space with the phrase so no double space is left.
    if start > 0 and text[start - 1] == " ":
        start -= 1
    elif end < len(text) and text[end] == " ":
        end += 1
    return text[:start] + text[end:]


def sanitize_ids(text: str, valid_ids: Iterable[int]) -> str:
    """Delete references to subject ids outside ``valid_ids``.

    ``from image k`` phrases go first, then parenthesised ``(image k)``
    references, then any remaining bare ``image k``. Each deletion also
    removes one adjacent space. The result is a fixed point:
    ``sanitize_ids(sanitize_ids(t, v), v) == sanitize_ids(t, v)``.

    Args:
        text: Free text produced by a language model.
        valid_ids: Ids of the subjects that exist in the scene.

    Returns:
        The text with every invalid reference removed.
    """
    valid = set(valid_ids)
    while True:
        for pattern in (_FROM_RE, _PAREN_RE, ID_RE):
            bad = next((m for m in pattern.finditer(text) if int(m.group(1)) not in valid), None)
            if bad is not None:
                text = _delete_span(text, bad.start(), bad.end())
                break
        else:
            return text


def mentions(text: str, category: str) -> bool:
    """Whether ``category`` occurs in ``text`` as a whole word (plural allowed)."""
    pattern = r"(?<!\w)" + re.escape(category) + r"(?:s|es)?(?!\w)"
    return re.search(pattern, text, re.IGNORECASE) is not None


def word_count(text: str) -> int:
    return len(text.split())


@dataclass(frozen=True)
class InstructionText:
    text: str
    with_ids: bool
    referenced_ids: frozenset = frozenset()

    @classmethod
    def from_text(cls, text: str, with_ids: bool) -> "InstructionText":
        return cls(text, with_ids, frozenset(extract_ids(text)))

    def to_dict(self) -> dict:
        return {"text": self.text, "with_ids": self.with_ids, "referenced_ids": sorted(self.referenced_ids)}

    @classmethod
    def from_dict(cls, doc: dict) -> "InstructionText":
        return cls(doc["text"], bool(doc["with_ids"]), frozenset(int(i) for i in doc["referenced_ids"]))


@dataclass(frozen=True)
class CoTText:
    text: str
    referenced_ids: frozenset = frozenset()
    word_count: int = 0

    @classmethod
    def from_text(cls, text: str) -> "CoTText":
        return cls(text, frozenset(extract_ids(text)), word_count(text))

    def to_dict(self) -> dict:
        return {"text": self.text, "referenced_ids": sorted(self.referenced_ids), "word_count": self.word_count}

    @classmethod
    def from_dict(cls, doc: dict) -> "CoTText":
        return cls(doc["text"], frozenset(int(i) for i in doc["referenced_ids"]), int(doc["word_count"]))


def instruction_prompt(categories: Sequence[str], with_ids: bool) -> tuple[str, str]:
    """(template id, rendered prompt) for an instruction request."""
    if with_ids:
        classes = ", ".join(f"{c} from image {i}" for i, c in enumerate(categories))
        return "instruction_ids", render("instruction_ids", classes_str=classes)
    return "instruction_plain", render("instruction_plain", classes_str=", ".join(ordered_unique(categories)))


def gen_instruction(gateway, annotated_target: np.ndarray, subjects: Sequence, with_ids: bool, seed: int,
                    *, scene_id: str | None = None) -> tuple[InstructionText, str]:
    """Ask the vision-language model for a user instruction and validate it.

    With ids, hallucinated ids are stripped and every subject must still be
    referenced exactly once as an id. Without ids, no id may remain and
    every category must be named.

    Returns:
        The validated instruction and the template id used.

    Raises:
        StageFailure: ``vlm_validation`` when the reply fails either check
            or the model call fails.
    """
    categories = [s.category for s in subjects]
    template_id, prompt = instruction_prompt(categories, with_ids)
    with stage_guard("vlm_validation", scene_id):
        raw = gateway.analyze_image(prompt, annotated_target, seed, template=template_id,
                                    vocabulary=categories, scene_id=scene_id)
    valid = set(range(len(subjects))) if with_ids else set()
    text = " ".join(sanitize_ids(raw, valid).split())
    if not text:
        raise StageFailure("vlm_validation", scene_id, "instruction empty after sanitization")
    found = extract_ids(text)
    if with_ids and found != valid:
        missing = sorted(valid - found)
        raise StageFailure("vlm_validation", scene_id, f"instruction lost subject ids {missing}")
    if not with_ids:
        absent = [c for c in ordered_unique(categories) if not mentions(text, c)]
        if absent:
            raise StageFailure("vlm_validation", scene_id, f"instruction omits {absent}")
    return InstructionText.from_text(text, with_ids), template_id


def gen_cot(gateway, instruction: InstructionText, annotated_target: np.ndarray, subjects: Sequence, seed: int,
            *, min_words: int = LIVE_MIN_WORDS, scene_id: str | None = None) -> CoTText:
    """Generate a step-by-step scene description for ``instruction``.

    Up to three attempts are made; each reply is sanitized against the
    scene's subject ids before its length is checked.

    Raises:
        StageFailure: ``cot_short`` when no attempt reaches ``min_words``.
    """
    prompt = render("cot", initial_prompt=instruction.text, min_words=min_words)
    valid = set(range(len(subjects)))
    categories = [s.category for s in subjects]
    longest = 0
    for attempt in range(COT_ATTEMPTS):
        with stage_guard("cot_short", scene_id):
            raw = gateway.analyze_image(prompt, annotated_target, derive_seed(seed, "cot", attempt),
                                        template="cot", vocabulary=categories, scene_id=scene_id)
        cot = CoTText.from_text(sanitize_ids(raw, valid))
        if cot.word_count >= min_words:
            return cot
        longest = max(longest, cot.word_count)
    raise StageFailure("cot_short", scene_id, f"longest reply had {longest} words, need {min_words}")
