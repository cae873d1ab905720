import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from subjectforge.errors import InvalidArgument, StageFailure
from subjectforge.gateway import Detection, MockBackend, ModelGateway
from subjectforge.geometry import BBox
from subjectforge.scene_forge import (
    SceneDraft,
    SubjectRecord,
    compose_scene,
    crop_subjects,
    sample_candidates,
    select_subjects,
    subjects_from_detections,
    transform_prompt,
    transform_subject,
    verify_subjects,
)


def det(cat, w, h, x=0, y=0, score=0.5):
    return Detection(cat, BBox(x, y, x + w, y + h), score)


class TestCandidates:
    def test_size_bounds_and_distinct(self, vocabulary):
        for seed in range(50):
            picks = sample_candidates(vocabulary, 2, 5, seed)
            assert 4 <= len(picks) <= 10 and len(set(picks)) == len(picks)
            assert set(picks) <= set(vocabulary)

    def test_deterministic(self, vocabulary):
        assert sample_candidates(vocabulary, 1, 12, 9) == sample_candidates(vocabulary, 1, 12, 9)

    @pytest.mark.parametrize("n_min,n_max", [(0, 3), (4, 3)])
    def test_bad_bounds(self, vocabulary, n_min, n_max):
        with pytest.raises(InvalidArgument):
            sample_candidates(vocabulary, n_min, n_max, 0)

    def test_small_vocabulary(self):
        with pytest.raises(InvalidArgument):
            sample_candidates(["a", "b", "c"], 1, 2, 0)


class TestCompose:
    def test_success(self, vocabulary):
        gw = ModelGateway(MockBackend(0, image_size=(64, 64)))
        draft = compose_scene(gw, SceneDraft("s", vocabulary[:6], 11))
        assert len(draft.chosen_categories) >= 3
        assert draft.target_image.shape == (64, 64, 3)
        assert all(c.lower() in draft.caption.lower() for c in draft.chosen_categories)

    def test_mismatch_exhausts_attempts(self, vocabulary):
        gw = ModelGateway(MockBackend(0, failure_rates={"t2i_mismatch": 1.0}))
        draft = SceneDraft("s", vocabulary[:6], 11)
        with pytest.raises(StageFailure) as info:
            compose_scene(gw, draft)
        assert info.value.stage == "t2i_mismatch"
        assert draft.caption_attempts == 3


class TestSelectSubjects:
    def test_area_floor_is_inclusive(self):
        dets = [det("a", 10, 10), det("b", 10, 9), det("c", 20, 20)]
        picked = select_subjects(dets, 100, 100, 0.01, 12)
        assert [d.category for d in picked] == ["c", "a"]

    def test_round_robin_over_categories(self):
        dets = [det("dog", 30, 30), det("dog", 40, 40), det("dog", 20, 20), det("cat", 25, 25), det("lamp", 10, 10)]
        picked = select_subjects(dets, 100, 100, 0.0, 4)
        assert [(d.category, d.box.area) for d in picked] == [("dog", 1600), ("cat", 625), ("lamp", 100),
                                                              ("dog", 900)]

    def test_sparse_fails(self):
        with pytest.raises(StageFailure) as info:
            select_subjects([det("a", 50, 50), det("b", 2, 2)], 100, 100, 0.01, 12)
        assert info.value.stage == "detection_sparse"

    @given(st.lists(st.tuples(st.sampled_from("abcd"), st.integers(1, 60), st.integers(1, 60)), max_size=20),
           st.integers(1, 12), st.sampled_from([0.0, 0.01, 0.1]))
    def test_properties(self, spec, n_max, delta):
        dets = [det(c, w, h) for c, w, h in spec]
        try:
            picked = select_subjects(dets, 64, 64, delta, n_max)
        except StageFailure:
            assert sum(1 for d in dets if d.box.area >= delta * 64 * 64) < 2 or n_max < 2
            return
        assert 2 <= len(picked) <= n_max
        assert all(d.box.area >= delta * 64 * 64 for d in picked)
        # Round robin: no category gets a second pick while another eligible one has none.
        counts = {}
        for d in picked:
            counts[d.category] = counts.get(d.category, 0) + 1
        eligible = {d.category for d in dets if d.box.area >= delta * 64 * 64}
        if len(picked) < n_max:
            assert len(picked) == sum(1 for d in dets if d.box.area >= delta * 64 * 64)
        elif max(counts.values()) > 1:
            assert set(counts) == eligible


class TestVerify:
    target = np.zeros((64, 64, 3), dtype=np.uint8)
    dets = [det("dog", 20, 20), det("cat", 20, 20, 30, 30), det("lamp", 10, 10, 5, 40)]

    def test_all_approved(self):
        assert verify_subjects(ModelGateway(MockBackend(0)), self.target, self.dets, 1) == self.dets

    def test_rejected_boxes(self):
        gw = ModelGateway(MockBackend(0, failure_rates={"ovd_verify": 1.0}))
        with pytest.raises(StageFailure) as info:
            verify_subjects(gw, self.target, self.dets, 1)
        assert info.value.stage == "ovd_verify"

    @pytest.mark.parametrize("reply", ["nothing here", '{"incorrect": [7]}', '{"incorrect": "0"}'])
    def test_unreadable_verdict(self, reply):
        class Fixed:
            def analyze_image(self, *a, **kw):
                return reply

        with pytest.raises(StageFailure, match="unreadable"):
            verify_subjects(Fixed(), self.target, self.dets, 1)

    def test_partial_rejection(self):
        class Fixed:
            def analyze_image(self, *a, **kw):
                return 'Verdict: {"incorrect": [1]}'

        assert verify_subjects(Fixed(), self.target, self.dets, 1) == [self.dets[0], self.dets[2]]


class TestSubjects:
    def test_refs_and_round_trip(self):
        subs = subjects_from_detections("scene_000003", [det("dog", 4, 4), det("cat", 5, 5)])
        assert [s.subject_id for s in subs] == [0, 1]
        assert subs[1].crop == "scene_000003/subject_1_crop.png"
        assert subs[1].transformed == "scene_000003/subject_1.png"
        doc = json.loads(json.dumps(subs[0].to_dict()))
        assert SubjectRecord.from_dict(doc) == subs[0]

    def test_bad_region_mode(self):
        with pytest.raises(InvalidArgument):
            SubjectRecord(0, "dog", BBox(0, 0, 1, 1), region_mode="blob")


class TestTransform:
    def test_simple_prompt(self):
        prompt, template, classes = transform_prompt("dog", "simple", ["cat"], 0)
        assert template == "transform_simple" and classes == () and "dog" in prompt

    def test_complex_prompt_uses_related(self):
        for seed in range(20):
            prompt, template, classes = transform_prompt("dog", "complex", ["cat", "dog", "wolf", "fox"], seed)
            assert 1 <= len(classes) <= 3 and "dog" not in classes
            assert template == f"transform_complex_{len(classes)}"
            assert all(c in prompt for c in classes)

    def test_complex_falls_back_without_related(self):
        assert transform_prompt("dog", "complex", ["dog"], 0)[1] == "transform_simple"

    def test_bad_mode(self):
        with pytest.raises(InvalidArgument):
            transform_prompt("dog", "weird", [], 0)

    def test_transform_stores_image(self):
        target = np.arange(64 * 64 * 3, dtype=np.uint8).reshape(64, 64, 3)
        subs = subjects_from_detections("s", [det("dog", 20, 10)])
        images = {}
        crop_subjects(target, subs, images)
        assert images["s/subject_0_crop.png"].shape == (10, 20, 3)
        out = transform_subject(ModelGateway(MockBackend(0)), subs[0], images, "complex", {"dog": ["cat"]}, 5)
        assert out.transform_kind == "complex" and out.transform_classes == ("cat",)
        assert images["s/subject_0.png"].shape == (10, 20, 3)

    def test_transform_failure(self):
        target = np.zeros((64, 64, 3), dtype=np.uint8)
        subs = subjects_from_detections("s", [det("dog", 20, 10)])
        images = {}
        crop_subjects(target, subs, images)
        gw = ModelGateway(MockBackend(0, failure_rates={"transform": 1.0}))
        with pytest.raises(StageFailure) as info:
            transform_subject(gw, subs[0], images, "simple", {}, 5, scene_id="s")
        assert info.value.stage == "transform"
