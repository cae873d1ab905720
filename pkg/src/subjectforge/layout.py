"""Semantic layout planning over an M x M patch grid.

A :class:`PatchGrid` labels each cell with the set of subject categories
occupying it. Its text form is the ``<patch>`` prompt block::

    Here is the segmentation map focusing on ship, sports car:
    <patch>[0] others [1] others ... [63] others</patch>
     Now, generate an image.

Cells list their labels in lexicographic order and empty cells read
``others``, which makes the text a canonical form of the grid.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, InvalidArgument
from .geometry import Region, dynamic_threshold, patch_ious

EMPTY_LABEL = "others"
HEADER = "Here is the segmentation map focusing on {classes}:"
FOOTER = "Now, generate an image."

_FORBIDDEN = set(",[]<>:")


def check_category(name: str) -> str:
    if not isinstance(name, str) or not name:
        raise InvalidArgument(f"category must be a non-empty string, got {name!r}")
    if name != " ".join(name.split()):
        raise InvalidArgument(f"category {name!r} has irregular whitespace")
    if name == EMPTY_LABEL:
        raise InvalidArgument(f"{EMPTY_LABEL!r} is reserved for empty cells")
    if _FORBIDDEN & set(name):
        raise InvalidArgument(f"category {name!r} contains one of {''.join(sorted(_FORBIDDEN))}")
    return name


@dataclass(frozen=True)
class PatchGrid:
    M: int
    cells: tuple = field(default=())
    focus_classes: tuple = field(default=())

    def __post_init__(self):
        if self.M < 1:
            raise InvalidArgument(f"grid side must be >= 1, got {self.M}")
        cells = tuple(frozenset(c) for c in self.cells) if self.cells else tuple(
            frozenset() for _ in range(self.M * self.M)
        )
        if len(cells) != self.M * self.M:
            raise InvalidArgument(f"{len(cells)} cells for a {self.M}x{self.M} grid")
        focus = tuple(self.focus_classes)
        if len(set(focus)) != len(focus):
            raise InvalidArgument(f"duplicate focus classes in {focus}")
        for name in focus:
            check_category(name)
        known = set(focus)
        for i, cell in enumerate(cells):
            stray = cell - known
            if stray:
                raise InvalidArgument(f"cell {i} labels {sorted(stray)} not among focus classes")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "focus_classes", focus)

    def cells_for(self, category: str) -> set[int]:
        return {i for i, cell in enumerate(self.cells) if category in cell}

    def labels(self) -> set[str]:
        out: set[str] = set()
        for cell in self.cells:
            out |= cell
        return out

    def is_subgrid_of(self, other: "PatchGrid") -> bool:
        return self.M == other.M and all(a <= b for a, b in zip(self.cells, other.cells))


def ordered_unique(items: Iterable[str]) -> list[str]:
    seen: dict[str, None] = {}
    for item in items:
        seen.setdefault(item, None)
    return list(seen)


def _vec(v) -> np.ndarray:
    return np.asarray(getattr(v, "values", v), dtype=np.float64)


def choose_region_mode(class_vec, mask_vec, unmask_vec) -> str:
    """``"mask"`` iff the masked region sits strictly closer to the class text.

    Inputs are unit vectors, so cosine reduces to a dot product.
    """
    c, m, u = _vec(class_vec), _vec(mask_vec), _vec(unmask_vec)
    if not (c.shape == m.shape == u.shape) or c.ndim != 1:
        raise InvalidArgument(f"embedding shapes differ: {c.shape}, {m.shape}, {u.shape}")
    return "mask" if float(np.dot(m, c)) > float(np.dot(u, c)) else "box"


def subject_region(subject) -> Region:
    if subject.region_mode == "mask" and subject.mask is not None:
        return subject.mask
    return subject.box


def assign_patches(
    subjects: Sequence,
    width: int,
    height: int,
    M: int,
    lam: float,
    *,
    pooled: bool = False,
) -> PatchGrid:
    """Label every patch whose IoU with a subject's region beats that subject's threshold.

    With ``pooled=True`` one threshold is shared by all subjects of the image,
    computed over every subject's non-zero IoUs together.
    """
    if lam < 0:
        raise InvalidArgument(f"lambda must be >= 0, got {lam}")
    per_subject = [patch_ious(subject_region(s), width, height, M) for s in subjects]
    if pooled:
        shared = dynamic_threshold([v for ious in per_subject for v in ious], lam)
        taus = [shared] * len(per_subject)
    else:
        taus = [dynamic_threshold(ious, lam) for ious in per_subject]
    cells: list[set[str]] = [set() for _ in range(M * M)]
    for s, ious, tau in zip(subjects, per_subject, taus):
        for i, v in enumerate(ious):
            if v > tau:
                cells[i].add(s.category)
    focus = ordered_unique(s.category for s in subjects)
    return PatchGrid(M, tuple(cells), tuple(focus))


def assignment_violations(grid: PatchGrid, subjects: Sequence, width: int, height: int, lam: float,
                          *, pooled: bool = False) -> list[str]:
    """Labelled cells not backed by any subject of that category clearing its threshold."""
    M = grid.M
    per_subject = [patch_ious(subject_region(s), width, height, M) for s in subjects]
    if pooled:
        shared = dynamic_threshold([v for ious in per_subject for v in ious], lam)
        taus = [shared] * len(per_subject)
    else:
        taus = [dynamic_threshold(ious, lam) for ious in per_subject]
    problems = []
    for i, cell in enumerate(grid.cells):
        for label in sorted(cell):
            if not any(
                s.category == label and ious[i] > tau
                for s, ious, tau in zip(subjects, per_subject, taus)
            ):
                problems.append(f"cell {i} labelled {label!r} without a region above threshold")
    return problems


def serialize_layout(grid: PatchGrid) -> str:
    entries = " ".join(
        f"[{i}] {', '.join(sorted(cell)) if cell else EMPTY_LABEL}"
        for i, cell in enumerate(grid.cells)
    )
    header = HEADER.format(classes=", ".join(grid.focus_classes))
    return f"{header}\n<patch>{entries}</patch>\n {FOOTER}"


_HEAD_RE = re.compile(r"\s*Here\s+is\s+the\s+segmentation\s+map\s+focusing\s+on(?P<classes>[^:<]*):\s*<patch>", re.S)
_TAIL_RE = re.compile(r"</patch>\s*Now,\s+generate\s+an\s+image\.\s*\Z", re.S)
_ENTRY_RE = re.compile(r"\[\s*(\d+)\s*\]([^\[]*)")


def _norm(label: str) -> str:
    return " ".join(label.split())


def parse_layout(text: str, M: int | None = None) -> PatchGrid:
    """Inverse of :func:`serialize_layout`, tolerant of whitespace between tokens."""
    head = _HEAD_RE.match(text)
    if head is None:
        raise FormatError("missing 'Here is the segmentation map focusing on ...:' header or <patch>")
    tail = _TAIL_RE.search(text, head.end())
    if tail is None:
        if "</patch>" not in text[head.end():]:
            raise FormatError("missing </patch>")
        raise FormatError("missing closing 'Now, generate an image.' line")
    raw_classes = head.group("classes").strip()
    focus = [_norm(c) for c in raw_classes.split(",")] if raw_classes else []
    if any(not c for c in focus):
        raise FormatError("empty class name in header")
    body = text[head.end():tail.start()]

    cells: list[frozenset] = []
    pos = 0
    for match in _ENTRY_RE.finditer(body):
        if body[pos:match.start()].strip():
            raise FormatError(f"unexpected text {body[pos:match.start()].strip()!r}")
        pos = match.end()
        index = int(match.group(1))
        if index != len(cells):
            raise FormatError(f"entry [{index}] out of order, expected [{len(cells)}]")
        labels = [_norm(x) for x in match.group(2).split(",")]
        if any(not x for x in labels):
            raise FormatError(f"empty label in entry [{index}]")
        if EMPTY_LABEL in labels:
            if len(labels) > 1:
                raise FormatError(f"entry [{index}] mixes {EMPTY_LABEL!r} with class labels")
            labels = []
        stray = [x for x in labels if x not in focus]
        if stray:
            raise FormatError(f"entry [{index}] uses labels {stray} missing from the header")
        cells.append(frozenset(labels))
    if body[pos:].strip():
        raise FormatError(f"unexpected text {body[pos:].strip()!r}")
    n = len(cells)
    side = int(round(n ** 0.5))
    if n == 0 or side * side != n:
        raise FormatError(f"{n} entries is not a square grid")
    if M is not None and side != M:
        raise FormatError(f"{n} entries, expected a {M}x{M} grid")
    try:
        return PatchGrid(side, tuple(cells), tuple(focus))
    except InvalidArgument as exc:
        raise FormatError(str(exc)) from exc
