"""Dataset enrichment: fewer-subject variants of records and related-category lists."""

from __future__ import annotations

import json
import re
from dataclasses import replace
from pathlib import Path
from typing import Mapping, Sequence

from .errors import InvalidArgument, StageFailure, stage_guard
from .layout import assign_patches, check_category, serialize_layout
from .narrative import ID_RE, CoTText, InstructionText, extract_ids, sanitize_ids
from .prompts import render
from .seeding import derive_seed
from .store import TrainingRecord

_SENTENCE_SPLIT = re.compile(r"(?<=[.?!])(\s+)")


def _parse_related(reply: str) -> list[str]:
    items = re.split(r"[,\n;]+", reply)
    cleaned = []
    for item in items:
        item = re.sub(r"^\s*(?:[-*•]|\d+[.)])\s*", "", item)
        item = " ".join(item.strip().strip(".\"'").split())
        if item:
            cleaned.append(item)
    return cleaned


def build_similarity_dict(gateway, categories: Sequence[str], seed: int, *, limit: int = 3,
                          stats=None) -> dict[str, list[str]]:
    """Ask the text model for related categories of every category.

    Proposals are matched case-insensitively against ``categories``; self
    references, unknown names and duplicates are dropped. A key whose model
    call fails maps to an empty list and is counted under ``simdict``.

    Args:
        gateway: Model gateway with a ``text_gen`` backend.
        categories: The vocabulary; keys and allowed values.
        seed: Run seed.
        limit: Maximum related categories per key.
        stats: Optional :class:`~subjectforge.store.PipelineStats`.

    Returns:
        Mapping from every category to its ordered related categories.
    """
    categories = list(dict.fromkeys(categories))
    if not categories:
        raise InvalidArgument("categories must be non-empty")
    canonical = {c.lower(): c for c in categories}
    vocabulary_text = ", ".join(categories)
    out: dict[str, list[str]] = {}
    for cat in categories:
        prompt = render("simdict", limit=limit, category=cat, vocabulary=vocabulary_text)
        try:
            with stage_guard("simdict"):
                reply = gateway.generate_text(prompt, derive_seed(seed, "simdict", cat), template="simdict",
                                              vocabulary=categories)
        except StageFailure:
            out[cat] = []
            if stats is not None:
                stats.record("simdict", False)
            continue
        related = []
        for name in _parse_related(reply):
            match = canonical.get(name.lower())
            if match is not None and match != cat and match not in related:
                related.append(match)
        out[cat] = related[:limit]
        if stats is not None:
            stats.record("simdict", True)
    return out


def check_similarity_dict(entries: Mapping[str, Sequence[str]], vocabulary: Sequence[str] | None = None) -> None:
    allowed = set(vocabulary) if vocabulary is not None else None
    for key, related in entries.items():
        if key in related:
            raise InvalidArgument(f"{key!r} lists itself as related")
        if allowed is not None:
            unknown = [r for r in related if r not in allowed]
            if unknown:
                raise InvalidArgument(f"{key!r} lists unknown categories {unknown}")


def save_similarity_dict(path: Path, entries: Mapping[str, Sequence[str]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps({k: list(v) for k, v in entries.items()}, indent=2, sort_keys=True) + "\n",
                   encoding="utf-8")
    tmp.replace(path)


def load_similarity_dict(path: Path) -> dict[str, list[str]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise InvalidArgument(f"{path}: expected a JSON object")
    entries = {str(k): [str(x) for x in v] for k, v in doc.items()}
    check_similarity_dict(entries)
    return entries


def remap_ids(text: str, id_map: Mapping[int, int], removed: set[int] | frozenset = frozenset()) -> str:
    """Renumber subject ids after subjects were removed.

    Sentences whose only references are removed ids are dropped; other
    references to removed ids are deleted with :func:`sanitize_ids`; the
    surviving ``image {old}`` tokens become ``image {new}``.

    Args:
        text: Instruction or reasoning text.
        id_map: Old id to new id for every surviving subject.
        removed: Ids of the removed subjects.

    Returns:
        The rewritten text.
    """
    if len(set(id_map.values())) != len(id_map):
        raise InvalidArgument("id_map must be injective")
    if set(id_map) & set(removed):
        raise InvalidArgument("an id cannot both survive and be removed")
    parts = _SENTENCE_SPLIT.split(text)
    sentences, seps = parts[0::2], parts[1::2]
    keep = []
    for i, sentence in enumerate(sentences):
        ids = extract_ids(sentence)
        drop = bool(ids) and ids <= set(removed)
        keep.append(not drop)
    pieces: list[str] = []
    for i, sentence in enumerate(sentences):
        if not keep[i]:
            continue
        if pieces and i > 0:
            pieces.append(seps[i - 1])
        pieces.append(_renumber(sanitize_ids(sentence, set(id_map)), id_map))
    return "".join(pieces)


def _renumber(text: str, id_map: Mapping[int, int]) -> str:
    def sub(m: re.Match) -> str:
        head = m.group(0)[: m.start(1) - m.start(0)]
        return head + str(id_map[int(m.group(1))])

    return ID_RE.sub(sub, text)


def reduce_subjects(record: TrainingRecord, *, rewrite_cot: bool = True) -> list[TrainingRecord]:
    """Derive records with one subject fewer each, down to two subjects.

    At every step the subject with the smallest box is removed (the higher
    id on equal areas); survivors keep their relative order and are
    renumbered from zero. Instruction and reasoning text are rewritten and
    the layout is recomputed from the surviving subjects.

    Args:
        record: A record with at least two subjects.
        rewrite_cot: When False, reasoning text keeps all its sentences and
            only has its subject ids cleaned and renumbered.

    Returns:
        ``max(S - 2, 0)`` records with ``S-1, S-2, ..., 2`` subjects.
    """
    grid_cfg = record.provenance.get("grid", {})
    M = int(grid_cfg.get("M", 8))
    lam = float(grid_cfg.get("lambda", 0.05))
    pooled = bool(grid_cfg.get("pooled", False))
    w, h = record.target_size
    root_id = record.provenance.get("parent_scene_id") or record.scene_id
    base_step = int(record.provenance.get("derivation_step", 0))
    derived: list[TrainingRecord] = []
    current = record
    while len(current.subjects) > 2:
        victim = min(current.subjects, key=lambda s: (s.box.area, -s.subject_id))
        survivors = [s for s in current.subjects if s.subject_id != victim.subject_id]
        id_map = {s.subject_id: new for new, s in enumerate(survivors)}
        subjects = [replace(s, subject_id=id_map[s.subject_id]) for s in survivors]
        removed = {victim.subject_id}
        instruction_text = remap_ids(current.instruction.text, id_map, removed)
        if rewrite_cot:
            cot_text = remap_ids(current.cot.text, id_map, removed)
        else:
            cot_text = _renumber(sanitize_ids(current.cot.text, set(id_map)), id_map)
        grid = assign_patches(subjects, w, h, M, lam, pooled=pooled)
        provenance = dict(current.provenance)
        provenance["parent_scene_id"] = root_id
        provenance["derivation_step"] = base_step + len(derived) + 1
        with_ids = current.instruction.with_ids and bool(extract_ids(instruction_text))
        current = TrainingRecord(
            scene_id=f"{root_id}_n{len(subjects)}",
            subject_images=[s.transformed for s in subjects],
            target_image=current.target_image,
            target_size=current.target_size,
            instruction=InstructionText.from_text(instruction_text, with_ids),
            cot=CoTText.from_text(cot_text),
            layout_prompt=serialize_layout(grid),
            subjects=subjects,
            provenance=provenance,
        )
        derived.append(current)
    return derived


def load_vocabulary(path: Path) -> list[str]:
    """One category per line; blank lines and ``#`` comments are skipped."""
    names = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = " ".join(line.split())
        if line and not line.startswith("#"):
            names.append(check_category(line))
    if len(set(names)) != len(names):
        raise InvalidArgument(f"{path}: duplicate categories")
    return names
