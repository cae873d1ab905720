"""Best-of-N plan selection at inference time.

A planner proposes N (reasoning, layout) branches, a generator renders
each, and the branch whose image embeds closest to the user instruction
wins. Planner and generator are opaque callables; the mocks here stand in
for a trained model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Protocol, Sequence

import numpy as np

from .errors import GatewayError, InvalidArgument, SubjectForgeError
from .gateway.client import cosine
from .geometry import BBox
from .layout import PatchGrid, assign_patches, serialize_layout
from .narrative import CoTText
from .seeding import derive_seed, np_rng, py_rng

logger = logging.getLogger(__name__)

CURVE_SIZES = (2, 4, 8, 16)


@dataclass(frozen=True, eq=False)
class PlanCandidate:
    branch_index: int
    cot: CoTText | None = None
    layout: PatchGrid | None = None
    image: np.ndarray | None = None
    score: float | None = None
    error: str | None = None

    def __post_init__(self):
        if self.score is not None and self.image is None:
            raise InvalidArgument("a scored candidate must be realized")
        if self.score is not None and not -1.0 <= self.score <= 1.0:
            raise InvalidArgument(f"score {self.score} outside [-1, 1]")

    @property
    def failed(self) -> bool:
        return self.error is not None


class Planner(Protocol):
    def plan(self, instruction: str, subject_images: Sequence[np.ndarray], seed: int) -> tuple[CoTText, PatchGrid]:
        ...


class Generator(Protocol):
    def render(self, cot: CoTText, layout: PatchGrid) -> np.ndarray:
        ...


@dataclass(frozen=True)
class _PlannedRegion:
    category: str
    box: BBox
    region_mode: str = "box"
    mask: None = None


class MockPlanner:
    """Random rectangles per category, turned into a layout grid."""

    def __init__(self, categories: Sequence[str], *, M: int = 8, canvas: int = 64, lam: float = 0.05):
        if not categories:
            raise InvalidArgument("planner needs at least one category")
        self.categories = list(dict.fromkeys(categories))
        self.M, self.canvas, self.lam = M, canvas, lam

    def plan(self, instruction, subject_images, seed):
        rng = py_rng(seed, "plan")
        regions = []
        for cat in self.categories:
            bw, bh = rng.randint(8, self.canvas // 2), rng.randint(8, self.canvas // 2)
            x0, y0 = rng.randint(0, self.canvas - bw), rng.randint(0, self.canvas - bh)
            regions.append(_PlannedRegion(cat, BBox(x0, y0, x0 + bw, y0 + bh)))
        grid = assign_patches(regions, self.canvas, self.canvas, self.M, self.lam)
        parts = [f"The {r.category} occupies the area around x={r.box.x_min}, y={r.box.y_min}." for r in regions]
        return CoTText.from_text(f"Plan for: {instruction} " + " ".join(parts)), grid


class MockGenerator:
    """Paints each grid cell with a colour derived from its labels."""

    def __init__(self, size: int = 64):
        self.size = size

    def render(self, cot, layout):
        M = layout.M
        rng = np_rng("render", serialize_layout(layout), cot.text)
        cells = np.zeros((M, M, 3), dtype=np.uint8)
        for i, labels in enumerate(layout.cells):
            key = ", ".join(sorted(labels)) or "others"
            cells[i // M, i % M] = np_rng("colour", key).integers(0, 256, 3, dtype=np.uint8)
        step = -(-self.size // M)
        image = np.repeat(np.repeat(cells, step, axis=0), step, axis=1)[: self.size, : self.size]
        noise = rng.integers(0, 16, image.shape, dtype=np.uint8)
        return (image // 2 + noise).astype(np.uint8)


class GatewayGenerator:
    """Renders a plan with the gateway's text-to-image role."""

    def __init__(self, gateway, seed: int = 0):
        self.gateway, self.seed = gateway, seed

    def render(self, cot, layout):
        prompt = cot.text + "\n" + serialize_layout(layout)
        return self.gateway.generate_image(prompt, derive_seed(self.seed, prompt))


def generate_branches(planner: Planner, instruction: str, subject_images: Sequence[np.ndarray], N: int,
                      seed: int) -> list[PlanCandidate]:
    """Ask ``planner`` for ``N`` branches; branch ``j`` uses seed ``h(seed, j)``.

    A branch whose planner call raises is kept but marked failed.

    Raises:
        InvalidArgument: ``N < 1``.
        SubjectForgeError: every branch failed.
    """
    if N < 1:
        raise InvalidArgument(f"N must be >= 1, got {N}")
    out = []
    for j in range(N):
        try:
            cot, layout = planner.plan(instruction, subject_images, derive_seed(seed, "branch", j))
            out.append(PlanCandidate(j, cot, layout))
        except (SubjectForgeError, ValueError) as exc:
            logger.warning("branch %d failed: %s", j, exc)
            out.append(PlanCandidate(j, error=str(exc)))
    if all(c.failed for c in out):
        raise SubjectForgeError(f"all {N} planning branches failed")
    return out


def realize_and_score(candidates: Sequence[PlanCandidate], generator: Generator, gateway,
                      instruction: str) -> list[PlanCandidate]:
    """Render every live branch and score it against the instruction embedding."""
    text_vec = gateway.embed("text", instruction)
    out = []
    for c in candidates:
        if c.failed:
            out.append(c)
            continue
        try:
            image = generator.render(c.cot, c.layout)
            score = cosine(gateway.embed("image", image), text_vec)
        except (GatewayError, SubjectForgeError, ValueError) as exc:
            out.append(replace(c, error=str(exc)))
            continue
        out.append(replace(c, image=image, score=score))
    return out


def select_best(candidates: Sequence[PlanCandidate]) -> tuple[int, PlanCandidate]:
    """Highest-scoring candidate; the lowest branch index wins ties.

    Raises:
        InvalidArgument: no scored candidate.
    """
    best = None
    for c in sorted((c for c in candidates if c.score is not None), key=lambda c: c.branch_index):
        if best is None or c.score > best.score:
            best = c
    if best is None:
        raise InvalidArgument("no scored candidate to select from")
    return best.branch_index, best


def best_score_curve(candidates: Sequence[PlanCandidate], sizes: Sequence[int] = CURVE_SIZES) -> dict[int, float]:
    """Best score among the first ``n`` branches, for each ``n`` that fits."""
    ordered = sorted(candidates, key=lambda c: c.branch_index)
    curve = {}
    for n in sizes:
        if n > len(ordered):
            continue
        scores = [c.score for c in ordered[:n] if c.score is not None]
        if scores:
            curve[n] = max(scores)
    return curve
