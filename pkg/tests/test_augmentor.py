import json
import random

import pytest
from hypothesis import given, strategies as st

from builders import make_record, random_record
from subjectforge.augmentor import (
    build_similarity_dict,
    check_similarity_dict,
    load_similarity_dict,
    load_vocabulary,
    reduce_subjects,
    remap_ids,
    save_similarity_dict,
)
from subjectforge.errors import InvalidArgument, ModelCallFailed
from subjectforge.gateway import MockBackend, ModelGateway
from subjectforge.narrative import extract_ids
from subjectforge.store import PipelineStats, validate_record


class TestRemap:
    def test_drops_removed_sentence_and_renumbers(self):
        text = "A from image 0. B from image 1. C from image 2."
        assert remap_ids(text, {0: 0, 2: 1}, {1}) == "A from image 0. C from image 1."

    def test_no_removed_identity(self):
        text = "A from image 0. B from image 1."
        assert remap_ids(text, {0: 0, 1: 1}, set()) == text

    def test_mixed_sentence_kept(self):
        text = "The dog from image 0 sits beside the cat from image 1."
        assert remap_ids(text, {0: 0}, {1}) == "The dog from image 0 sits beside the cat."

    def test_sentences_without_ids_kept(self):
        text = "A quiet room. The lamp from image 3 glows! Nice?"
        assert remap_ids(text, {0: 0}, {3}) == "A quiet room. Nice?"

    def test_shifts_ids_down(self):
        assert remap_ids("image 2 then image 5", {2: 0, 5: 1}, {0, 1, 3, 4}) == "image 0 then image 1"

    def test_rejects_non_injective(self):
        with pytest.raises(InvalidArgument):
            remap_ids("x", {0: 0, 1: 0}, set())

    def test_rejects_overlap(self):
        with pytest.raises(InvalidArgument):
            remap_ids("x", {0: 0}, {0})

    @given(st.integers(2, 9), st.data())
    def test_output_references_only_new_ids(self, S, data):
        removed = data.draw(st.sets(st.integers(0, S - 1), max_size=S - 1))
        survivors = [i for i in range(S) if i not in removed]
        id_map = {old: new for new, old in enumerate(survivors)}
        words = data.draw(st.lists(st.sampled_from(["The dog", "sits.", "near", "a lamp!", "Ok?"]), max_size=6))
        refs = data.draw(st.lists(st.integers(0, S + 2), max_size=8))
        text = " ".join([f"from image {r}." if r % 2 else f"image {r}" for r in refs] + words)
        out = remap_ids(text, id_map, removed)
        assert extract_ids(out) <= set(range(len(survivors)))


class TestReduce:
    def test_worked_example(self):
        rec = make_record([500, 300, 200, 100])
        derived = reduce_subjects(rec)
        assert [d.subject_count for d in derived] == [3, 2]
        assert [s.category for s in derived[0].subjects] == [s.category for s in rec.subjects[:3]]
        assert [s.box for s in derived[1].subjects] == [s.box for s in rec.subjects[:2]]
        assert extract_ids(derived[-1].instruction.text) == {0, 1}
        assert derived[0].scene_id == "scene_000000_n3"
        assert derived[1].provenance["parent_scene_id"] == "scene_000000"
        assert derived[1].provenance["derivation_step"] == 2

    def test_tie_removes_higher_id(self):
        rec = make_record([100, 50, 50])
        (only,) = reduce_subjects(rec)
        assert [s.box for s in only.subjects] == [rec.subjects[0].box, rec.subjects[1].box]

    def test_middle_removal_renumbers(self):
        rec = make_record([400, 30, 300])
        (only,) = reduce_subjects(rec)
        assert [s.category for s in only.subjects] == [rec.subjects[0].category, rec.subjects[2].category]
        assert [s.subject_id for s in only.subjects] == [0, 1]
        assert f"The {rec.subjects[2].category} from image 1" in only.instruction.text
        assert rec.subjects[1].category not in only.instruction.text

    def test_two_subjects_gives_nothing(self):
        assert reduce_subjects(make_record([10, 20])) == []

    def test_twelve_subjects(self):
        assert len(reduce_subjects(make_record([(i + 1) * 10 for i in range(12)]))) == 10

    def test_instruction_only_keeps_cot_sentences(self):
        rec = make_record([500, 300, 200, 100])
        full = reduce_subjects(rec)[0]
        light = reduce_subjects(rec, rewrite_cot=False)[0]
        assert light.instruction == full.instruction
        assert light.cot.word_count > full.cot.word_count
        assert extract_ids(light.cot.text) <= {0, 1, 2}
        validate_record(light)

    @given(st.integers(2, 12), st.integers(0, 2**32 - 1), st.booleans())
    def test_counts_validity_and_order(self, S, seed, with_ids):
        rec = random_record(random.Random(seed), S, with_ids=with_ids)
        derived = reduce_subjects(rec)
        assert [d.subject_count for d in derived] == list(range(S - 1, 1, -1))
        parent_order = {s.box: i for i, s in enumerate(rec.subjects)}
        for d in derived:
            validate_record(d)
            assert len(d.subject_images) == d.subject_count
            old = [parent_order[s.box] for s in d.subjects]
            assert old == sorted(old)


class TestSimilarity:
    def test_mock_dict_obeys_invariants(self, vocabulary):
        stats = PipelineStats()
        sim = build_similarity_dict(ModelGateway(MockBackend(0)), vocabulary, 1, stats=stats)
        assert set(sim) == set(vocabulary)
        check_similarity_dict(sim, vocabulary)
        assert all(len(v) <= 3 for v in sim.values())
        assert stats.counts("simdict") == {"attempted": len(vocabulary), "passed": len(vocabulary), "failed": 0}
        assert sim == build_similarity_dict(ModelGateway(MockBackend(0)), vocabulary, 1)

    def test_filters_self_unknown_and_case(self):
        class Replies:
            def generate_text(self, prompt, seed, **kw):
                return "1. chair\n2. STOOL\n3. bench, throne, couch, stool"

        sim = build_similarity_dict(Replies(), ["Chair", "Stool", "Bench", "Couch"], 0, limit=3)
        assert sim["Chair"] == ["Stool", "Bench", "Couch"]
        assert sim["Stool"] == ["Chair", "Bench", "Couch"]

    def test_failure_maps_to_empty(self):
        class Down:
            def generate_text(self, *a, **kw):
                raise ModelCallFailed("down", role="text_gen")

        stats = PipelineStats()
        assert build_similarity_dict(Down(), ["a", "b"], 0, stats=stats) == {"a": [], "b": []}
        assert stats.counts("simdict")["failed"] == 2

    def test_round_trip(self, tmp_path):
        sim = {"chair": ["stool", "bench"], "stool": []}
        save_similarity_dict(tmp_path / "sim.json", sim)
        assert load_similarity_dict(tmp_path / "sim.json") == sim

    def test_self_reference_rejected_on_load(self, tmp_path):
        (tmp_path / "sim.json").write_text(json.dumps({"chair": ["chair"]}))
        with pytest.raises(InvalidArgument):
            load_similarity_dict(tmp_path / "sim.json")

    def test_unknown_value_rejected(self):
        with pytest.raises(InvalidArgument):
            check_similarity_dict({"chair": ["sofa"]}, ["chair"])


class TestVocabulary:
    def test_load(self, tmp_path):
        path = tmp_path / "v.txt"
        path.write_text("# comment\nchair\n\n  sports   car \n")
        assert load_vocabulary(path) == ["chair", "sports car"]

    @pytest.mark.parametrize("content", ["chair\nchair\n", "others\n", "a, b\n"])
    def test_rejects(self, tmp_path, content):
        path = tmp_path / "v.txt"
        path.write_text(content)
        with pytest.raises(InvalidArgument):
            load_vocabulary(path)
