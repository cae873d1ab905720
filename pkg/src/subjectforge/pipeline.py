"""Per-scene orchestration and the resumable forge run.

:class:`ScenePipeline` turns one scene index into either a
:class:`~subjectforge.store.TrainingRecord` or the name of the stage that
dropped it. :func:`forge` runs many scenes on a worker pool and commits
them in scene order, so the manifest does not depend on scheduling.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augmentor import build_similarity_dict, load_similarity_dict, save_similarity_dict
from .config import RunConfig
from .errors import InvalidArgument, StageFailure, stage_guard
from .gateway import HttpBackend, MockBackend, ModelGateway
from .imaging import crop, draw_overlay, image_size, masked_crop, save_png
from .layout import assign_patches, choose_region_mode, serialize_layout
from .narrative import MOCK_MIN_WORDS, LIVE_MIN_WORDS, gen_cot, gen_instruction
from .scene_forge import (
    SceneDraft,
    compose_scene,
    crop_subjects,
    sample_candidates,
    select_subjects,
    subjects_from_detections,
    transform_subject,
    verify_subjects,
)
from .seeding import derive_seed, unit_uniform
from .store import (
    PipelineStats,
    TrainingRecord,
    append_outcome,
    append_record,
    read_manifest,
    resume_plan,
    write_json,
)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"
JOURNAL = "scenes.jsonl"
STATS = "stats.json"
SIMILARITY = "similarity.json"


def scene_id_for(index: int) -> str:
    return f"scene_{index:06d}"


def make_gateway(config: RunConfig) -> ModelGateway:
    """Gateway for ``config.backend``: one seeded mock, or HTTP per role."""
    endpoints = config.endpoint_table()
    if config.backend == "mock":
        backend = MockBackend(config.global_seed, image_size=config.mock_image_size,
                              embed_dim=config.mock_embed_dim, failure_rates=config.inject,
                              cot_words=max(MOCK_MIN_WORDS, config.cot_min_words or MOCK_MIN_WORDS))
        return ModelGateway(backend, endpoints)
    return ModelGateway({role: HttpBackend(ep) for role, ep in endpoints.items()}, endpoints)


def min_cot_words(config: RunConfig) -> int:
    if config.cot_min_words is not None:
        return config.cot_min_words
    return MOCK_MIN_WORDS if config.backend == "mock" else LIVE_MIN_WORDS


@dataclass
class SceneResult:
    index: int
    scene_id: str
    record: TrainingRecord | None = None
    images: dict = field(default_factory=dict)
    failed_stage: str | None = None
    detail: str = ""


class ScenePipeline:
    """Runs every scene stage for one scene under fixed seeds."""

    def __init__(self, gateway: ModelGateway, config: RunConfig, vocabulary: Sequence[str],
                 similarity: dict | None = None):
        self.gateway = gateway
        self.config = config
        self.vocabulary = list(vocabulary)
        self.similarity = dict(similarity or {})
        self.min_words = min_cot_words(config)
        if len(self.vocabulary) < 2 * config.n_max:
            raise InvalidArgument(f"vocabulary has {len(self.vocabulary)} categories, "
                                  f"need at least {2 * config.n_max}")

    def run_scene(self, index: int) -> SceneResult:
        scene_id = scene_id_for(index)
        result = SceneResult(index, scene_id)
        try:
            result.record = self._run(index, scene_id, result.images)
        except StageFailure as exc:
            result.failed_stage = exc.stage
            result.detail = exc.detail
            result.images = {}
        return result

    def _run(self, index: int, scene_id: str, images: dict) -> TrainingRecord:
        cfg, gw = self.config, self.gateway
        seed = derive_seed(cfg.global_seed, "scene", index)

        candidates = sample_candidates(self.vocabulary, cfg.n_min, cfg.n_max, seed)
        draft = compose_scene(gw, SceneDraft(scene_id, candidates, seed))
        target = draft.target_image
        w, h = image_size(target)
        images[f"{scene_id}/target.png"] = target

        with stage_guard("detection_sparse", scene_id):
            detections = gw.detect(target, draft.chosen_categories, derive_seed(seed, "detect"), scene_id=scene_id)
        picked = select_subjects(detections, w, h, cfg.delta, cfg.n_max, scene_id=scene_id)

        approved = verify_subjects(gw, target, picked, derive_seed(seed, "verify"), scene_id=scene_id)
        subjects = subjects_from_detections(scene_id, approved)

        crop_subjects(target, subjects, images)
        transformed = []
        for s in subjects:
            sub_seed = derive_seed(seed, "transform", s.subject_id)
            mode = "complex" if unit_uniform(sub_seed, "mode") < cfg.complex_prob else "simple"
            transformed.append(transform_subject(gw, s, images, mode, self.similarity, sub_seed,
                                                 scene_id=scene_id))
        subjects = transformed

        annotated = draw_overlay(target, [s.box for s in subjects],
                                 [f"{s.subject_id}: {s.category}" for s in subjects])
        with_ids = unit_uniform(seed, "with_ids") < cfg.with_ids_ratio
        instruction, instruction_template = gen_instruction(
            gw, annotated, subjects, with_ids, derive_seed(seed, "instruction"), scene_id=scene_id)
        cot = gen_cot(gw, instruction, annotated, subjects, derive_seed(seed, "cot"),
                      min_words=self.min_words, scene_id=scene_id)

        subjects = self._resolve_regions(target, subjects, derive_seed(seed, "segment"), scene_id)
        grid = assign_patches(subjects, w, h, cfg.M, cfg.lam, pooled=cfg.pooled)

        provenance = {
            "seeds": {"global": cfg.global_seed, "scene": seed},
            "templates": {
                "caption": "caption",
                "filter": "object_filter",
                "verify": "box_verify",
                "instruction": instruction_template,
                "cot": "cot",
                "transforms": [s.transform_template for s in subjects],
            },
            "backends": gw.backend_ids(),
            "grid": {"M": cfg.M, "lambda": cfg.lam, "pooled": cfg.pooled},
            "n_max": cfg.n_max,
            "delta": cfg.delta,
            "caption": draft.caption,
            "caption_attempts": draft.caption_attempts,
        }
        return TrainingRecord(
            scene_id=scene_id,
            subject_images=[s.transformed for s in subjects],
            target_image=f"{scene_id}/target.png",
            target_size=(w, h),
            instruction=instruction,
            cot=cot,
            layout_prompt=serialize_layout(grid),
            subjects=subjects,
            provenance=provenance,
        )

    def _resolve_regions(self, target: np.ndarray, subjects, seed: int, scene_id: str):
        """Segment every subject and keep the mask only when it matches the class text better."""
        gw = self.gateway
        class_vecs = {}
        out = []
        with stage_guard("segmentation", scene_id):
            for s in subjects:
                mask = gw.segment(target, s.box, derive_seed(seed, s.subject_id), scene_id=scene_id)
                if s.category not in class_vecs:
                    class_vecs[s.category] = gw.embed("text", s.category, scene_id=scene_id)
                if mask.popcount == 0:
                    mode = "box"
                else:
                    mask_vec = gw.embed("image", masked_crop(target, s.box, mask), scene_id=scene_id)
                    unmask_vec = gw.embed("image", crop(target, s.box), scene_id=scene_id)
                    mode = choose_region_mode(class_vecs[s.category], mask_vec, unmask_vec)
                out.append(replace(s, mask=mask, region_mode=mode))
        return out


def prepare_similarity(gateway: ModelGateway, config: RunConfig, vocabulary: Sequence[str], root: Path | None,
                       stats: PipelineStats | None = None) -> dict:
    """Load the run's similarity dictionary, building and saving it on first use."""
    path = Path(root) / SIMILARITY if root is not None else None
    if path is not None and path.exists():
        return load_similarity_dict(path)
    entries = build_similarity_dict(gateway, vocabulary, derive_seed(config.global_seed, "simdict"),
                                    limit=config.similarity_limit, stats=stats)
    if path is not None:
        save_similarity_dict(path, entries)
    return entries


def simulate(config: RunConfig, vocabulary: Sequence[str], scene_count: int, *,
             gateway: ModelGateway | None = None) -> tuple[PipelineStats, list[SceneResult]]:
    """Run scenes in memory without touching disk; returns stats and results."""
    gateway = gateway or make_gateway(config)
    stats = PipelineStats()
    similarity = prepare_similarity(gateway, config, vocabulary, None, stats)
    pipe = ScenePipeline(gateway, config, vocabulary, similarity)
    results = []
    for i in range(scene_count):
        r = pipe.run_scene(i)
        stats.record_scene(r.failed_stage)
        r.images = {}
        results.append(r)
    return stats, results


@dataclass
class ForgeResult:
    attempted: int
    retained: int
    interrupted: bool
    stats: PipelineStats
    manifest: Path


def _commit(root: Path, result: SceneResult, manifest: Path, journal: Path) -> None:
    if result.record is not None:
        for ref, image in sorted(result.images.items()):
            save_png(image, root / ref)
        append_record(manifest, result.record)
    append_outcome(journal, result.scene_id, result.failed_stage, result.detail)


def forge(config: RunConfig, vocabulary: Sequence[str], scene_count: int, *,
          gateway: ModelGateway | None = None,
          on_commit: Callable[[SceneResult], None] | None = None) -> ForgeResult:
    """Run ``scene_count`` scenes into ``config.output_root``, resuming if possible.

    Scenes already committed (or already recorded as failed) are skipped.
    Results are committed strictly in scene order. ``KeyboardInterrupt``
    (including one raised by ``on_commit``) stops new work, lets running
    scenes finish, and leaves a state that the next call resumes from.
    """
    if scene_count < 0:
        raise InvalidArgument("scene_count must be >= 0")
    gateway = gateway or make_gateway(config)
    root = Path(config.output_root)
    root.mkdir(parents=True, exist_ok=True)
    manifest, journal = root / MANIFEST, root / JOURNAL
    simdict_stats = PipelineStats()
    similarity = prepare_similarity(gateway, config, vocabulary, root, simdict_stats)
    if simdict_stats.counts("simdict")["attempted"]:
        write_json(root / "simdict_stats.json", simdict_stats.counts("simdict"))
    pipe = ScenePipeline(gateway, config, vocabulary, similarity)

    requested = [scene_id_for(i) for i in range(scene_count)]
    pending = set(resume_plan(manifest, requested, journal=journal))
    indices = [i for i in range(scene_count) if scene_id_for(i) in pending]
    interrupted = False
    window = max(2, 2 * config.workers)

    pool = ThreadPoolExecutor(max_workers=config.workers, thread_name_prefix="scene")
    queue: deque = deque()
    todo = iter(indices)
    try:
        for i in todo:
            queue.append(pool.submit(pipe.run_scene, i))
            if len(queue) >= window:
                break
        while queue:
            result = queue.popleft().result()
            _commit(root, result, manifest, journal)
            _log_outcome(result)
            if on_commit is not None:
                on_commit(result)
            nxt = next(todo, None)
            if nxt is not None:
                queue.append(pool.submit(pipe.run_scene, nxt))
    except KeyboardInterrupt:
        interrupted = True
        logger.warning("interrupted; draining %d in-flight scenes without committing", len(queue))
        for fut in queue:
            fut.cancel()
    finally:
        pool.shutdown(wait=True, cancel_futures=True)

    stats = rebuild_stats(root)
    write_json(root / STATS, stats.to_dict())
    wanted = set(requested)
    retained = sum(1 for r in read_manifest(manifest) if r.scene_id in wanted)
    return ForgeResult(attempted=scene_count, retained=retained, interrupted=interrupted, stats=stats,
                       manifest=manifest)


def rebuild_stats(root: Path) -> PipelineStats:
    root = Path(root)
    simdict_path = root / "simdict_stats.json"
    simdict = json.loads(simdict_path.read_text()) if simdict_path.exists() else None
    return PipelineStats.from_run(root / MANIFEST, root / JOURNAL, simdict)


def _log_outcome(result: SceneResult) -> None:
    if result.failed_stage is None:
        logger.info("scene committed", extra={"event": "scene_committed", "scene_id": result.scene_id,
                                              "subjects": result.record.subject_count})
    else:
        logger.info("scene dropped", extra={"event": "scene_failed", "scene_id": result.scene_id,
                                            "stage": result.failed_stage, "detail": result.detail})


def expected_retention(rates: dict) -> float:
    """Retention when each stage fails independently at its rate."""
    return math.prod(1.0 - r for r in rates.values())
