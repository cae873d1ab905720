"""Embedding-based evaluation: subject fidelity, text alignment and layout agreement.

Three per-sample cosines are reported:

* ``image_image_a`` -- generated vs. reference images under embedder A
  (plays the role of a CLIP image score),
* ``image_image_b`` -- the same under embedder B (a DINO-style score),
* ``image_text``    -- generated image vs. instruction under embedder A.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import GatewayError, InvalidArgument
from .gateway.client import cosine
from .imaging import load_png
from .layout import PatchGrid

METRICS = ("image_image_a", "image_image_b", "image_text")
SUBJECT_COUNTS = tuple(range(1, 13))

# Published figures, shown as labelled reference rows only.
REFERENCE_SCORES = {"image_image_b": ("DINO", 0.622), "image_image_a": ("CLIP-I", 0.812),
                    "image_text": ("CLIP-T", 0.322)}
REFERENCE_LAYOUT = {"patch_iou": 0.47, "category_coverage": 0.76}


@dataclass(frozen=True)
class SampleMetrics:
    image_image_a: float
    image_image_b: float
    image_text: float

    def __post_init__(self):
        for name in METRICS:
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0:
                raise InvalidArgument(f"{name}={v} outside [-1, 1]")


@dataclass(frozen=True)
class LayoutAgreement:
    patch_iou: float
    category_coverage: float


@dataclass
class MetricReport:
    samples: list[SampleMetrics] = field(default_factory=list)
    skipped: int = 0
    buckets: dict | None = None

    @property
    def means(self) -> dict[str, float]:
        if not self.samples:
            return {}
        return {m: math.fsum(getattr(s, m) for s in self.samples) / len(self.samples) for m in METRICS}

    def to_dict(self) -> dict:
        doc = {"count": len(self.samples), "skipped": self.skipped, "means": self.means,
               "reference": {m: {"label": lab, "value": v} for m, (lab, v) in REFERENCE_SCORES.items()}}
        if self.buckets is not None:
            doc["by_subject_count"] = self.buckets
        return doc


def score_sample(generated: np.ndarray, references: Sequence[np.ndarray], instruction: str,
                 embedders: Mapping[str, object]) -> SampleMetrics:
    """Cosine metrics for one generated image.

    Args:
        generated: Generated image.
        references: One or more subject reference images.
        instruction: The prompt the image was generated from.
        embedders: ``{"a": gateway, "b": gateway}``; each exposes ``embed``.

    Raises:
        InvalidArgument: no references.
        GatewayError: an embedding call failed.
    """
    if not references:
        raise InvalidArgument("score_sample needs at least one reference image")
    ea, eb = embedders["a"], embedders["b"]
    gen_a = ea.embed("image", generated)
    gen_b = eb.embed("image", generated)
    sims_a = [cosine(gen_a, ea.embed("image", r)) for r in references]
    sims_b = [cosine(gen_b, eb.embed("image", r)) for r in references]
    text = cosine(gen_a, ea.embed("text", instruction))
    return SampleMetrics(
        image_image_a=math.fsum(sims_a) / len(sims_a),
        image_image_b=math.fsum(sims_b) / len(sims_b),
        image_text=text,
    )


def sweep_by_subject_count(rows: Iterable[tuple[int, SampleMetrics]]) -> dict:
    """Bucket samples by subject count 1..12.

    Returns:
        ``{S: {"count": n, "means": {...}}}`` for every S in 1..12; empty
        buckets carry ``count`` 0 and no ``means``.
    """
    groups: dict[int, list[SampleMetrics]] = {s: [] for s in SUBJECT_COUNTS}
    for count, metrics in rows:
        if count not in groups:
            raise InvalidArgument(f"subject count {count} outside 1..12")
        groups[count].append(metrics)
    out = {}
    for s, items in groups.items():
        entry: dict = {"count": len(items)}
        if items:
            entry["means"] = {m: math.fsum(getattr(x, m) for x in items) / len(items) for m in METRICS}
        out[s] = entry
    return out


def recombined_mean(buckets: Mapping[int, dict], metric: str) -> float:
    """Global mean of ``metric`` recovered from bucket means and counts."""
    total = sum(b["count"] for b in buckets.values())
    if total == 0:
        raise InvalidArgument("no samples in any bucket")
    return math.fsum(b["means"][metric] * b["count"] for b in buckets.values() if b["count"]) / total


def layout_agreement(predicted: PatchGrid, reference: PatchGrid) -> LayoutAgreement:
    """Per-class cell Jaccard (averaged) and reference-normalised class coverage.

    Classes absent from both grids are skipped. When neither grid labels any
    cell the Jaccard mean is vacuous and reported as 1.0; likewise coverage
    is 1.0 when the reference labels nothing.
    """
    if predicted.M != reference.M:
        raise InvalidArgument(f"grid sizes differ: {predicted.M} vs {reference.M}")
    pred_labels, ref_labels = predicted.labels(), reference.labels()
    classes = sorted(pred_labels | ref_labels)
    if classes:
        ious = []
        for c in classes:
            a, b = predicted.cells_for(c), reference.cells_for(c)
            ious.append(len(a & b) / len(a | b))
        patch_iou = math.fsum(ious) / len(ious)
    else:
        patch_iou = 1.0
    coverage = len(pred_labels & ref_labels) / len(ref_labels) if ref_labels else 1.0
    return LayoutAgreement(patch_iou, coverage)


def evaluate(samples: Iterable[dict], embedders: Mapping[str, object], base: Path | None = None) -> MetricReport:
    """Score evaluation rows ``{generated, references, instruction, subject_count}``.

    Image paths are resolved against ``base``. Rows whose embedding calls
    fail are skipped and counted.
    """
    report = MetricReport()
    rows = []
    base = Path(base) if base is not None else Path(".")
    for row in samples:
        gen = load_png(base / row["generated"])
        refs = [load_png(base / r) for r in row["references"]]
        try:
            m = score_sample(gen, refs, row["instruction"], embedders)
        except GatewayError:
            report.skipped += 1
            continue
        report.samples.append(m)
        if "subject_count" in row:
            rows.append((int(row["subject_count"]), m))
    if rows:
        report.buckets = sweep_by_subject_count(rows)
    return report


def render_report(report: MetricReport, layout: LayoutAgreement | None = None) -> str:
    """Text table with measured means next to the published reference values."""
    means = report.means
    lines = [f"{'Metric':<16}{'Measured':>10}{'Reference':>11}  Label", "-" * 48]
    for m in METRICS:
        label, ref = REFERENCE_SCORES[m]
        value = f"{means[m]:.3f}" if m in means else "-"
        lines.append(f"{m:<16}{value:>10}{ref:>11.3f}  {label}")
    if layout is not None:
        lines.append(f"{'patch_iou':<16}{layout.patch_iou:>10.3f}{REFERENCE_LAYOUT['patch_iou']:>11.2f}")
        lines.append(f"{'coverage':<16}{layout.category_coverage:>10.3f}"
                     f"{REFERENCE_LAYOUT['category_coverage']:>11.2f}")
    lines.append(f"samples={len(report.samples)} skipped={report.skipped}")
    return "\n".join(lines)


def mean_layout_agreement(pairs: Iterable[tuple[PatchGrid, PatchGrid]]) -> LayoutAgreement:
    values = [layout_agreement(p, r) for p, r in pairs]
    if not values:
        raise InvalidArgument("no layout pairs")
    return LayoutAgreement(
        math.fsum(v.patch_iou for v in values) / len(values),
        math.fsum(v.category_coverage for v in values) / len(values),
    )


def report_json(report: MetricReport, layout: LayoutAgreement | None = None) -> str:
    doc = report.to_dict()
    if layout is not None:
        doc["layout"] = {**asdict(layout), "reference": REFERENCE_LAYOUT}
    return json.dumps(doc, indent=2, sort_keys=True, default=float)


__all__ = [
    "LayoutAgreement",
    "MetricReport",
    "SampleMetrics",
    "evaluate",
    "layout_agreement",
    "mean_layout_agreement",
    "recombined_mean",
    "render_report",
    "report_json",
    "score_sample",
    "sweep_by_subject_count",
]
