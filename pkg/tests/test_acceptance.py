"""Acceptance gate: one verdict per criterion, printed in the terminal summary.

Every check compares the package against an independent oracle from
``oracles.py`` or against a value worked out by hand.
"""

import math
import random
from pathlib import Path

import numpy as np
import pytest

import oracles
from builders import random_record
from conftest import VOCABULARY
from strategies import random_grid
from subjectforge.augmentor import reduce_subjects
from subjectforge.cli import main as cli_main
from subjectforge.config import build_config
from subjectforge.evalkit import SampleMetrics, layout_agreement, recombined_mean, score_sample, sweep_by_subject_count
from subjectforge.gateway import EmbeddingVector
from subjectforge.geometry import BBox, RasterMask, dynamic_threshold
from subjectforge.layout import PatchGrid, assign_patches, choose_region_mode, parse_layout, serialize_layout
from subjectforge.narrative import extract_ids, sanitize_ids
from subjectforge.pipeline import MANIFEST, expected_retention, forge, simulate
from subjectforge.store import STAGES, read_manifest, report_stats
from subjectforge.tts import PlanCandidate, best_score_curve, select_best

GOLDEN = Path(__file__).parent / "golden"
SEED = 42
SCENES = 100


@pytest.fixture(scope="module")
def reference_run(tmp_path_factory):
    """An uninterrupted 100-scene mock forge with default knobs."""
    root = tmp_path_factory.mktemp("reference") / "run"
    forge(build_config({"global_seed": SEED, "output_root": str(root)}), VOCABULARY, SCENES)
    return root


def test_criterion_01_layout_round_trip(acceptance):
    rng = random.Random(1)
    failures = 0
    for _ in range(1000):
        grid = random_grid(rng)
        if parse_layout(serialize_layout(grid)) != grid:
            failures += 1
    golden_ok = []
    for n in (1, 2, 3):
        text = (GOLDEN / f"layout_example_{n}.txt").read_text(encoding="utf-8")
        golden_ok.append(serialize_layout(parse_layout(text)) == text)
    acceptance(1, failures == 0 and all(golden_ok),
               f"{1000 - failures}/1000 random grids, golden byte-identical {golden_ok}")


def _random_region(rng, size):
    x0, y0 = rng.randrange(size), rng.randrange(size)
    x1, y1 = rng.randint(x0 + 1, size), rng.randint(y0 + 1, size)
    box = BBox(x0, y0, x1, y1)
    if rng.random() < 0.5:
        return box, None, oracles.box_pixels(x0, y0, x1, y1)
    bits = np.zeros((size, size), dtype=bool)
    bits[y0:y1, x0:x1] = np.array([[rng.random() < 0.7 for _ in range(x1 - x0)] for _ in range(y1 - y0)])
    return box, RasterMask(bits), oracles.mask_pixels(bits.tolist())


class _Region:
    def __init__(self, category, box, mask):
        self.category, self.box, self.mask = category, box, mask
        self.region_mode = "mask" if mask is not None else "box"


def test_criterion_02_assignment_oracle(acceptance):
    rng = random.Random(2)
    size, mismatches = 64, 0
    for _ in range(200):
        M = rng.choice([2, 4, 8])
        regions, oracle_input = [], []
        for _ in range(rng.randint(1, 5)):
            cat = rng.choice(["dog", "cat", "lamp", "sports car", "vase"])
            box, mask, pixels = _random_region(rng, size)
            regions.append(_Region(cat, box, mask))
            oracle_input.append((cat, pixels))
        grid = assign_patches(regions, size, size, M, 0.05)
        if [set(c) for c in grid.cells] != oracles.assign_grid(oracle_input, size, size, M, 0.05):
            mismatches += 1
    acceptance(2, mismatches == 0, f"{200 - mismatches}/200 scenes match the pixel brute force")


def test_criterion_03_dynamic_threshold(acceptance):
    hand = [
        (dynamic_threshold([0.2, 0.4, 0.6, 0.0], 0.05), 0.02),
        (dynamic_threshold([1.0], 0.05), 0.05),
        (dynamic_threshold([], 0.05), 0.0),
    ]
    hand_ok = all(abs(got - want) <= 1e-12 for got, want in hand)
    rng = random.Random(3)
    worst = 0.0
    for _ in range(100):
        ious = [rng.choice([0.0, rng.random()]) for _ in range(rng.randint(0, 64))]
        lam, c = rng.uniform(0, 1), rng.uniform(0, 10)
        oracle = float(oracles.threshold(ious, lam))
        worst = max(worst, abs(dynamic_threshold(ious, lam) - oracle),
                    abs(dynamic_threshold(ious, c * lam) - c * dynamic_threshold(ious, lam)))
    acceptance(3, hand_ok and worst <= 1e-12, f"hand cases {[round(g, 15) for g, _ in hand]}, "
                                              f"max deviation {worst:.1e} over 100 random inputs")


def test_criterion_04_region_mode(acceptance):
    rng = np.random.default_rng(4)
    disagreements = 0
    for _ in range(100):
        dim = int(rng.integers(2, 17))
        c, m, u = (v / np.linalg.norm(v) for v in rng.standard_normal((3, dim)))
        expected = "mask" if oracles.dot(list(m), list(c)) > oracles.dot(list(u), list(c)) else "box"
        if choose_region_mode(c, m, u) != expected:
            disagreements += 1
    c = np.array([1.0, 0.0])
    ties = [choose_region_mode(c, np.array([0.6, 0.8]), np.array([0.6, -0.8])),
            choose_region_mode(c, c, c)]
    acceptance(4, disagreements == 0 and ties == ["box", "box"],
               f"{100 - disagreements}/100 triples agree, exact ties -> {ties}")


def test_criterion_05_forge_determinism(acceptance, reference_run, tmp_path):
    again = tmp_path / "again"
    forge(build_config({"global_seed": SEED, "output_root": str(again)}), VOCABULARY, SCENES)
    first = (reference_run / MANIFEST).read_bytes()
    identical = first == (again / MANIFEST).read_bytes()
    valid = cli_main(["validate", "--manifest", str(reference_run / MANIFEST)]) == 0
    records = read_manifest(reference_run / MANIFEST)
    counts = [r.subject_count for r in records]
    knobs = {(r.provenance["grid"]["M"], r.provenance["grid"]["lambda"], r.provenance["delta"]) for r in records}
    ok = identical and valid and records and all(1 <= s <= 12 for s in counts) and knobs == {(8, 0.05, 0.01)}
    acceptance(5, ok, f"identical={identical}, validate={valid}, {len(records)} records, "
                      f"subjects {min(counts)}..{max(counts)}, knobs {sorted(knobs)}")


def test_criterion_06_failure_accounting(acceptance):
    rates = {"t2i_mismatch": 0.098, "ovd_verify": 0.146, "vlm_validation": 0.063, "segmentation": 0.112}
    config = build_config({"global_seed": 6, "n_max": 2, "mock_image_size": [64, 64], "inject": rates})
    stats, _ = simulate(config, VOCABULARY, 10_000)
    analytic = expected_retention(rates)
    measured = stats.retained_fraction
    identity = stats.consistent() and all(
        c["attempted"] == c["passed"] + c["failed"] for c in stats.snapshot().values())
    table = report_stats(stats)
    reference_shown = "68.1%" in table and all(s in table for s in STAGES)
    ok = abs(analytic - 0.641) < 5e-4 and abs(measured - analytic) <= 0.02 and identity and reference_shown
    acceptance(6, ok, f"measured {100 * measured:.2f}% vs analytic {100 * analytic:.2f}%, "
                      f"identity={identity}, reference row shown={reference_shown}")


def test_criterion_07_augmentation(acceptance):
    rng = random.Random(7)
    problems = []
    for S in range(2, 13):
        for trial in range(3):
            rec = random_record(rng, S, with_ids=trial != 2)
            derived = reduce_subjects(rec)
            if [d.subject_count for d in derived] != list(range(S - 1, 1, -1)):
                problems.append(f"S={S}: counts {[d.subject_count for d in derived]}")
                continue
            # Permutation oracle: replay the removal rule on plain (area, id) pairs.
            alive = [(s.box.area, s.subject_id) for s in rec.subjects]
            for d in derived:
                victim = min(alive, key=lambda p: (p[0], -p[1]))
                alive = [p for p in alive if p != victim]
                expected_boxes = [rec.subjects[i].box for _, i in alive]
                if [s.box for s in d.subjects] != expected_boxes:
                    problems.append(f"S={S}: order/renumbering differs at {d.subject_count}")
                if not extract_ids(d.instruction.text) <= set(range(d.subject_count)):
                    problems.append(f"S={S}: stray ids in {d.scene_id}")
    acceptance(7, not problems, f"S=2..12, 33 source records; problems: {problems[:3] or 'none'}")


def test_criterion_08_best_of_n(acceptance):
    rng = random.Random(8)
    wrong = 0
    monotone = True
    img = np.zeros((1, 1, 3), dtype=np.uint8)
    for _ in range(500):
        scores = [rng.choice([rng.uniform(-1, 1), 0.5]) for _ in range(16)]
        cands = [PlanCandidate(j, image=img, score=s) for j, s in enumerate(scores)]
        if select_best(cands)[0] != oracles.argmax_first(scores):
            wrong += 1
        shuffled = cands[:]
        rng.shuffle(shuffled)
        if select_best(shuffled)[0] != oracles.argmax_first(scores):
            wrong += 1
        curve = best_score_curve(cands)
        values = [curve[n] for n in (2, 4, 8, 16)]
        monotone &= values == sorted(values)
    acceptance(8, wrong == 0 and monotone, f"{wrong} argmax disagreements in 1000 selections, monotone={monotone}")


_FILLER = ["The", "dog", "sits", "near", "a", "lamp.", "beside", "imagery", "Images", "then,", "42", "window!"]


def _planted_text(rng):
    tokens, planted = [], []
    for _ in range(rng.randint(1, 20)):
        if rng.random() < 0.4:
            k = rng.randint(0, 9)
            form = rng.choice(["image {}", "Image {}", "from image {}", "(image {})", "IMAGE {}"])
            tokens.append(form.format(k))
            planted.append((len(tokens) - 1, k))
        else:
            tokens.append(rng.choice(_FILLER))
    return tokens, planted


def test_criterion_09_sanitizer(acceptance):
    rng = random.Random(9)
    closure = idempotent = local = 0
    for _ in range(500):
        tokens, planted = _planted_text(rng)
        valid = set(rng.sample(range(10), rng.randint(0, 5)))
        text = " ".join(tokens)
        out = sanitize_ids(text, valid)
        closure += extract_ids(out) <= valid
        idempotent += sanitize_ids(out, valid) == out
        # Locality oracle: exactly the invalid planted phrases disappear, everything else stays.
        dropped = {i for i, k in planted if k not in valid}
        local += out == " ".join(t for i, t in enumerate(tokens) if i not in dropped)
    ok = closure == idempotent == local == 500
    acceptance(9, ok, f"closure {closure}/500, idempotence {idempotent}/500, locality {local}/500")


class _Table:
    def __init__(self, images, texts):
        self.images, self.texts = images, texts

    def embed(self, kind, payload):
        raw = self.texts[payload] if kind == "text" else self.images[int(payload[0, 0, 0])]
        v = np.asarray(raw, dtype=float)
        return EmbeddingVector(v / np.linalg.norm(v))


def test_criterion_10_metrics(acceptance):
    img = lambda v: np.full((2, 2, 3), v, dtype=np.uint8)
    a = _Table({0: [1, 2, 2], 1: [2, 1, 2], 2: [0, 0, 1]}, {"go": [0, 3, 4]})
    b = _Table({0: [1, 0], 1: [1, 1], 2: [0, 1]}, {})
    m = score_sample(img(0), [img(1), img(2)], "go", {"a": a, "b": b})
    want = (
        (oracles.cos([1, 2, 2], [2, 1, 2]) + oracles.cos([1, 2, 2], [0, 0, 1])) / 2,
        (oracles.cos([1, 0], [1, 1]) + 0.0) / 2,
        oracles.cos([1, 2, 2], [0, 3, 4]),
    )
    cos_err = max(abs(x - y) for x, y in zip((m.image_image_a, m.image_image_b, m.image_text), want))

    pred = PatchGrid(4, tuple({"dog"} if i in (0, 1, 4) else ({"cat"} if i == 15 else set()) for i in range(16)),
                     ("dog", "cat"))
    ref = PatchGrid(4, tuple({"dog"} if i in (1, 4, 5) else ({"vase"} if i == 10 else set()) for i in range(16)),
                    ("dog", "vase"))
    la = layout_agreement(pred, ref)
    want_iou = (oracles.jaccard({0, 1, 4}, {1, 4, 5}) + 0.0 + 0.0) / 3
    jac_err = max(abs(la.patch_iou - want_iou), abs(la.category_coverage - 0.5))
    same = layout_agreement(pred, pred)

    rng = random.Random(10)
    recomb_err = 0.0
    for _ in range(50):
        rows = [(rng.randint(1, 12), SampleMetrics(*(rng.uniform(-1, 1) for _ in range(3))))
                for _ in range(rng.randint(1, 80))]
        buckets = sweep_by_subject_count(rows)
        for metric in ("image_image_a", "image_image_b", "image_text"):
            direct = math.fsum(getattr(r, metric) for _, r in rows) / len(rows)
            recomb_err = max(recomb_err, abs(recombined_mean(buckets, metric) - direct))
    ok = cos_err <= 1e-9 and jac_err <= 1e-9 and (same.patch_iou, same.category_coverage) == (1.0, 1.0) \
        and recomb_err <= 1e-9
    acceptance(10, ok, f"cosine err {cos_err:.1e}, jaccard err {jac_err:.1e}, identical grids "
                       f"({same.patch_iou}, {same.category_coverage}), recombination err {recomb_err:.1e}")


def test_criterion_11_resume(acceptance, reference_run, tmp_path):
    root = tmp_path / "interrupted"
    config = build_config({"global_seed": SEED, "output_root": str(root)})
    commits = []

    def stop_after_40(result):
        commits.append(result.scene_id)
        if len(commits) == 40:
            raise KeyboardInterrupt

    first = forge(config, VOCABULARY, SCENES, on_commit=stop_after_40)
    partial = len(read_manifest(root / MANIFEST))
    second = forge(config, VOCABULARY, SCENES)
    same = (root / MANIFEST).read_bytes() == (reference_run / MANIFEST).read_bytes()
    ok = first.interrupted and partial == 40 and not second.interrupted and same
    acceptance(11, ok, f"stopped after {partial} records (interrupted={first.interrupted}), "
                       f"resumed manifest identical={same}")
