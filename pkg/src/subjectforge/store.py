"""Training-record schema, the JSONL manifest and per-stage accounting.

On disk a run looks like::

    {root}/manifest.jsonl     one TrainingRecord per line, committed in scene order
    {root}/scenes.jsonl       one outcome line per attempted scene (pass or failing stage)
    {root}/stats.json         PipelineStats rebuilt from scenes.jsonl
    {root}/{scene_id}/*.png   target, crops and transformed subject images

Image references inside records are paths relative to ``root``.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import FormatError, InvalidArgument, ManifestCorrupt, RecordValidationError
from .layout import assign_patches, assignment_violations, check_category, parse_layout
from .narrative import CoTText, InstructionText, extract_ids, word_count
from .scene_forge import SubjectRecord

# Scene stages in execution order; simdict runs once per run, not per scene.
SCENE_STAGES = (
    "t2i_mismatch",
    "detection_sparse",
    "ovd_verify",
    "transform",
    "vlm_validation",
    "cot_short",
    "segmentation",
)
STAGES = SCENE_STAGES + ("simdict",)

REFERENCE_FAILURE_RATES = {
    "t2i_mismatch": ("T2I semantic mismatch", 9.8),
    "ovd_verify": ("OVD miss / false detection", 14.6),
    "vlm_validation": ("VLM hallucinated validation", 6.3),
    "segmentation": ("Incorrect mask", 11.2),
}
REFERENCE_RETENTION = 0.681

DEFAULT_N_MAX = 12


@dataclass
class TrainingRecord:
    scene_id: str
    subject_images: list[str]
    target_image: str
    target_size: tuple[int, int]
    instruction: InstructionText
    cot: CoTText
    layout_prompt: str
    subjects: list[SubjectRecord]
    provenance: dict = field(default_factory=dict)

    @property
    def subject_count(self) -> int:
        return len(self.subjects)

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "subject_images": list(self.subject_images),
            "target_image": self.target_image,
            "target_size": list(self.target_size),
            "instruction": self.instruction.to_dict(),
            "cot": self.cot.to_dict(),
            "layout_prompt": self.layout_prompt,
            "subjects": [s.to_dict() for s in self.subjects],
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        """Canonical single-line JSON; equal records give equal bytes."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainingRecord":
        return cls(
            scene_id=doc["scene_id"],
            subject_images=list(doc["subject_images"]),
            target_image=doc["target_image"],
            target_size=tuple(int(v) for v in doc["target_size"]),
            instruction=InstructionText.from_dict(doc["instruction"]),
            cot=CoTText.from_dict(doc["cot"]),
            layout_prompt=doc["layout_prompt"],
            subjects=[SubjectRecord.from_dict(s) for s in doc["subjects"]],
            provenance=dict(doc.get("provenance", {})),
        )


def record_from_json(line: str) -> TrainingRecord:
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RecordValidationError("$", f"not JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise RecordValidationError("$", "record is not an object")
    try:
        return TrainingRecord.from_dict(doc)
    except KeyError as exc:
        raise RecordValidationError(f"$.{exc.args[0]}", "missing field", doc.get("scene_id")) from exc
    except (TypeError, ValueError) as exc:
        raise RecordValidationError("$", f"malformed field: {exc}", doc.get("scene_id")) from exc


def validate_record(record: TrainingRecord, *, check_assignment: bool = True) -> None:
    """Check every record invariant, raising on the first violation.

    Raises:
        RecordValidationError: carrying a field path such as
            ``subjects[2].box`` or ``layout_prompt``.
    """
    sid = record.scene_id

    def fail(path: str, message: str):
        raise RecordValidationError(path, message, sid)

    if not isinstance(sid, str) or not sid:
        fail("scene_id", "must be a non-empty string")
    prov = record.provenance
    grid_cfg = prov.get("grid", {})
    n_max = int(prov.get("n_max", DEFAULT_N_MAX))
    S = len(record.subjects)
    if not 1 <= S <= n_max:
        fail("subjects", f"{S} subjects, expected 1..{n_max}")
    if len(record.subject_images) != S:
        fail("subject_images", f"{len(record.subject_images)} images for {S} subjects")
    if len(record.target_size) != 2 or min(record.target_size) < 1:
        fail("target_size", f"invalid size {record.target_size}")
    w, h = record.target_size
    for i, s in enumerate(record.subjects):
        path = f"subjects[{i}]"
        if s.subject_id != i:
            fail(f"{path}.subject_id", f"is {s.subject_id}, expected {i}")
        try:
            check_category(s.category)
        except InvalidArgument as exc:
            fail(f"{path}.category", str(exc))
        if not s.box.fits(w, h):
            fail(f"{path}.box", f"{s.box.as_list()} outside {w}x{h} target")
        if s.mask is not None and (s.mask.width, s.mask.height) != (w, h):
            fail(f"{path}.mask_rle", f"mask is {s.mask.width}x{s.mask.height}, target is {w}x{h}")
        if s.region_mode == "mask" and s.mask is None:
            fail(f"{path}.region_mode", "mask mode without a mask")
        if record.subject_images[i] != s.transformed:
            fail(f"subject_images[{i}]", f"{record.subject_images[i]!r} differs from {s.transformed!r}")
    valid = set(range(S))
    ins = record.instruction
    ids = extract_ids(ins.text)
    if not ids <= valid:
        fail("instruction.text", f"references ids {sorted(ids - valid)} outside 0..{S - 1}")
    if set(ins.referenced_ids) != ids:
        fail("instruction.referenced_ids", f"{sorted(ins.referenced_ids)} disagrees with text ids {sorted(ids)}")
    if ins.with_ids and not ids:
        fail("instruction.with_ids", "set but the text references no ids")
    cot_ids = extract_ids(record.cot.text)
    if not cot_ids <= valid:
        fail("cot.text", f"references ids {sorted(cot_ids - valid)} outside 0..{S - 1}")
    if set(record.cot.referenced_ids) != cot_ids:
        fail("cot.referenced_ids", "disagrees with the text")
    if record.cot.word_count != word_count(record.cot.text):
        fail("cot.word_count", f"{record.cot.word_count} != {word_count(record.cot.text)}")
    M = grid_cfg.get("M")
    try:
        grid = parse_layout(record.layout_prompt, M)
    except FormatError as exc:
        fail("layout_prompt", str(exc))
    categories = {s.category for s in record.subjects}
    stray = [c for c in grid.focus_classes if c not in categories]
    if stray:
        fail("layout_prompt", f"focus classes {stray} are not subject categories")
    if check_assignment:
        lam = float(grid_cfg.get("lambda", 0.05))
        pooled = bool(grid_cfg.get("pooled", False))
        problems = assignment_violations(grid, record.subjects, w, h, lam, pooled=pooled)
        if problems:
            fail("layout_prompt", problems[0])
        if grid != assign_patches(record.subjects, w, h, grid.M, lam, pooled=pooled):
            fail("layout_prompt", "grid differs from the one recomputed from the subjects")


@dataclass(frozen=True)
class CommitReceipt:
    scene_id: str
    offset: int
    length: int


_write_lock = threading.Lock()


def append_record(manifest: Path, record: TrainingRecord, *, validate: bool = True) -> CommitReceipt:
    """Validate ``record`` and append it as one manifest line.

    A failed write is rolled back by truncating the file to its prior size.
    """
    if validate:
        validate_record(record)
    data = (record.to_json() + "\n").encode("utf-8")
    manifest = Path(manifest)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    with _write_lock, open(manifest, "ab") as fh:
        offset = fh.seek(0, os.SEEK_END)
        try:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        except BaseException:
            fh.truncate(offset)
            raise
    return CommitReceipt(record.scene_id, offset, len(data))


def iter_manifest(manifest: Path) -> Iterator[tuple[int, TrainingRecord]]:
    """Yield (line number, record); a bad line halts with its number."""
    manifest = Path(manifest)
    if not manifest.exists():
        return
    with open(manifest, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.endswith("\n"):
                raise ManifestCorrupt(manifest, line_no, "truncated line")
            if not line.strip():
                raise ManifestCorrupt(manifest, line_no, "blank line")
            try:
                yield line_no, record_from_json(line)
            except RecordValidationError as exc:
                raise ManifestCorrupt(manifest, line_no, str(exc)) from exc


def read_manifest(manifest: Path) -> list[TrainingRecord]:
    return [r for _, r in iter_manifest(manifest)]


def _journal_entries(journal: Path) -> Iterator[dict]:
    journal = Path(journal)
    if not journal.exists():
        return
    with open(journal, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            try:
                doc = json.loads(line)
                doc["scene_id"]
            except (ValueError, KeyError, TypeError) as exc:
                raise ManifestCorrupt(journal, line_no, f"bad outcome line: {exc}") from exc
            yield doc


def append_outcome(journal: Path, scene_id: str, failed_stage: str | None, detail: str = "") -> None:
    line = json.dumps({"scene_id": scene_id, "failed_stage": failed_stage, "detail": detail},
                      sort_keys=True, separators=(",", ":")) + "\n"
    with _write_lock, open(journal, "a", encoding="utf-8") as fh:
        fh.write(line)
        fh.flush()


def resume_plan(manifest: Path, requested: Sequence[str], *, journal: Path | None = None) -> list[str]:
    """Requested scene ids that still need work, in request order.

    Scenes with a committed record are done; with ``journal`` given,
    scenes whose failure was already recorded are done as well.
    """
    done = {r.scene_id for _, r in iter_manifest(manifest)}
    if journal is not None:
        done.update(e["scene_id"] for e in _journal_entries(journal))
    return [s for s in requested if s not in done]


class PipelineStats:
    """Thread-safe attempted/passed/failed counters per stage."""

    def __init__(self, stages: Sequence[str] = STAGES):
        self.stages = tuple(stages)
        self._lock = threading.Lock()
        self._counts = {s: {"attempted": 0, "passed": 0, "failed": 0} for s in self.stages}

    def record(self, stage: str, passed: bool) -> None:
        with self._lock:
            c = self._counts[stage]
            c["attempted"] += 1
            c["passed" if passed else "failed"] += 1

    def record_scene(self, failed_stage: str | None) -> None:
        """Account one scene that ran the scene stages in order until ``failed_stage``."""
        if failed_stage is not None and failed_stage not in SCENE_STAGES:
            raise InvalidArgument(f"unknown scene stage {failed_stage!r}")
        with self._lock:
            for stage in SCENE_STAGES:
                c = self._counts[stage]
                c["attempted"] += 1
                if stage == failed_stage:
                    c["failed"] += 1
                    break
                c["passed"] += 1

    def counts(self, stage: str) -> dict:
        with self._lock:
            return dict(self._counts[stage])

    def snapshot(self) -> dict:
        with self._lock:
            return {s: dict(c) for s, c in self._counts.items()}

    @property
    def retained_fraction(self) -> float:
        snap = self.snapshot()
        first = snap[SCENE_STAGES[0]]["attempted"]
        if first == 0:
            return 0.0
        return snap[SCENE_STAGES[-1]]["passed"] / first

    def consistent(self) -> bool:
        return all(c["attempted"] == c["passed"] + c["failed"] for c in self.snapshot().values())

    def to_dict(self) -> dict:
        return {"stages": self.snapshot(), "retained_fraction": self.retained_fraction}

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineStats":
        stats = cls()
        for stage, c in doc["stages"].items():
            if stage not in stats._counts:
                raise InvalidArgument(f"unknown stage {stage!r}")
            stats._counts[stage] = {k: int(c[k]) for k in ("attempted", "passed", "failed")}
        if not stats.consistent():
            raise InvalidArgument("stats violate attempted = passed + failed")
        return stats

    @classmethod
    def from_run(cls, manifest: Path, journal: Path, simdict: dict | None = None) -> "PipelineStats":
        """Rebuild scene accounting from the outcome journal.

        Committed scenes missing from the journal (a crash between the two
        appends) count as passing every stage.
        """
        stats = cls()
        seen = set()
        for entry in _journal_entries(journal):
            if entry["scene_id"] in seen:
                continue
            seen.add(entry["scene_id"])
            stats.record_scene(entry.get("failed_stage"))
        for _, rec in iter_manifest(manifest):
            if rec.provenance.get("parent_scene_id") is None and rec.scene_id not in seen:
                seen.add(rec.scene_id)
                stats.record_scene(None)
        if simdict:
            for _ in range(int(simdict.get("passed", 0))):
                stats.record("simdict", True)
            for _ in range(int(simdict.get("failed", 0))):
                stats.record("simdict", False)
        return stats


def report_stats(stats: PipelineStats) -> str:
    """Text table of per-stage failure rates with reference rates alongside."""
    snap = stats.snapshot()
    header = f"{'Stage':<18}{'Attempted':>10}{'Passed':>10}{'Failed':>10}{'Failure %':>11}  Reference"
    lines = [header, "-" * len(header)]
    for stage in stats.stages:
        c = snap[stage]
        rate = f"{100.0 * c['failed'] / c['attempted']:.1f}" if c["attempted"] else "-"
        ref = REFERENCE_FAILURE_RATES.get(stage)
        ref_text = f"{ref[1]:.1f} ({ref[0]})" if ref else ""
        lines.append(f"{stage:<18}{c['attempted']:>10}{c['passed']:>10}{c['failed']:>10}{rate:>11}  {ref_text}")
    lines.append("-" * len(header))
    lines.append(f"{'Retained':<18}{100.0 * stats.retained_fraction:>40.1f}%")
    lines.append(f"{'Reference':<18}{100.0 * REFERENCE_RETENTION:>40.1f}%  (reported retention, not a target)")
    return "\n".join(lines)


def write_json(path: Path, doc) -> None:
    """Atomically replace ``path`` with deterministic JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_records(lines: Iterable[str]) -> list[TrainingRecord]:
    return [record_from_json(line) for line in lines if line.strip()]
