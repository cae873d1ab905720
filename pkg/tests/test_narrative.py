import re
from collections import Counter
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, strategies as st

from subjectforge.errors import StageFailure
from subjectforge.gateway import MockBackend, ModelGateway
from subjectforge.narrative import (
    CoTText,
    InstructionText,
    extract_ids,
    gen_cot,
    gen_instruction,
    instruction_prompt,
    mentions,
    sanitize_ids,
)


@dataclass
class Subj:
    category: str


TARGET = np.zeros((32, 32, 3), dtype=np.uint8)

_token = st.one_of(
    st.sampled_from(["The", "dog", "sits", "near", "a", "lamp.", "and", "then,", "Image", "images", "imagery"]),
    st.integers(0, 9).map(lambda k: f"image {k}"),
    st.integers(0, 9).map(lambda k: f"from image {k}"),
    st.integers(0, 9).map(lambda k: f"(image {k})"),
    st.integers(0, 9).map(lambda k: f"IMAGE {k}."),
)
texts = st.lists(_token, max_size=25).map(" ".join)
valid_sets = st.sets(st.integers(0, 9), max_size=6)


def valid_mentions(text, valid):
    return Counter(int(m) for m in re.findall(r"(?i)\bimage\s(\d+)", text) if int(m) in valid)


class TestSanitize:
    def test_from_phrase_removed(self):
        assert sanitize_ids("The dog from image 4 sits.", {0, 1}) == "The dog sits."

    def test_parenthesised_removed(self):
        assert sanitize_ids("A cat (image 7) waits.", {0}) == "A cat waits."

    def test_bare_reference_removed(self):
        assert sanitize_ids("Put image 3 left.", {0}) == "Put left."

    def test_case_insensitive(self):
        assert sanitize_ids("Use Image 9 here.", set()) == "Use here."

    def test_valid_untouched(self):
        text = "The dog from image 0 sits beside the cat from image 1."
        assert sanitize_ids(text, {0, 1}) == text

    def test_no_word_boundary_false_positive(self):
        assert sanitize_ids("An animage 5 test.", set()) == "An animage 5 test."

    def test_multi_digit_id(self):
        assert extract_ids("image 12 and image 3") == {12, 3}
        assert sanitize_ids("image 12 and image 3", {3}) == "and image 3"

    @given(texts, valid_sets)
    def test_closure(self, text, valid):
        assert extract_ids(sanitize_ids(text, valid)) <= valid

    @given(texts, valid_sets)
    def test_idempotent(self, text, valid):
        once = sanitize_ids(text, valid)
        assert sanitize_ids(once, valid) == once

    @given(texts, valid_sets)
    def test_valid_references_survive(self, text, valid):
        assert valid_mentions(sanitize_ids(text, valid), valid) == valid_mentions(text, valid)

    @given(texts, valid_sets)
    def test_only_deletes(self, text, valid):
        # Every output character comes from the input, in order.
        out = iter(text)
        assert all(ch in out for ch in sanitize_ids(text, valid))


class TestMentions:
    @pytest.mark.parametrize("text,cat,expected", [
        ("Two dogs play.", "dog", True),
        ("A glass of water", "glass", True),
        ("Three glasses", "glass", True),
        ("hotdog stand", "dog", False),
        ("A Sports Car parked", "sports car", True),
        ("doggy", "dog", False),
    ])
    def test_cases(self, text, cat, expected):
        assert mentions(text, cat) is expected


class TestTextRecords:
    def test_round_trip(self):
        ins = InstructionText.from_text("The dog from image 0 and image 2.", True)
        assert ins.referenced_ids == {0, 2}
        assert InstructionText.from_dict(ins.to_dict()) == ins
        cot = CoTText.from_text("one two image 1 three")
        assert cot.word_count == 5 and CoTText.from_dict(cot.to_dict()) == cot

    def test_prompt_lists_ids(self):
        template, prompt = instruction_prompt(["dog", "cat"], True)
        assert template == "instruction_ids"
        assert "dog from image 0, cat from image 1" in prompt

    def test_plain_prompt_dedupes(self):
        template, prompt = instruction_prompt(["dog", "dog", "cat"], False)
        assert template == "instruction_plain"
        assert "dog, cat" in prompt and "from image" not in prompt


class TestGenInstruction:
    subjects = [Subj("dog"), Subj("cat"), Subj("lamp")]

    @pytest.mark.parametrize("with_ids", [True, False])
    def test_valid_reply(self, with_ids):
        gw = ModelGateway(MockBackend(0))
        ins, template = gen_instruction(gw, TARGET, self.subjects, with_ids, 4, scene_id="s")
        if with_ids:
            assert ins.referenced_ids == {0, 1, 2} and template == "instruction_ids"
        else:
            assert ins.referenced_ids == frozenset()
            assert all(mentions(ins.text, s.category) for s in self.subjects)

    @pytest.mark.parametrize("with_ids", [True, False])
    def test_hallucination_rejected(self, with_ids):
        gw = ModelGateway(MockBackend(0, failure_rates={"vlm_validation": 1.0}))
        with pytest.raises(StageFailure) as info:
            gen_instruction(gw, TARGET, self.subjects, with_ids, 4, scene_id="s")
        assert info.value.stage == "vlm_validation"


class TestGenCot:
    subjects = [Subj("dog"), Subj("cat")]

    def test_references_only_instruction_ids(self):
        gw = ModelGateway(MockBackend(0, cot_words=60))
        ins = InstructionText.from_text("The dog from image 1 sits near the door.", True)
        cot = gen_cot(gw, ins, TARGET, self.subjects, 3, min_words=50, scene_id="s")
        assert cot.word_count >= 50
        assert cot.referenced_ids == {1}

    def test_short_replies_fail(self):
        gw = ModelGateway(MockBackend(0, failure_rates={"cot_short": 1.0}))
        ins = InstructionText.from_text("A dog and a cat.", False)
        with pytest.raises(StageFailure) as info:
            gen_cot(gw, ins, TARGET, self.subjects, 3, min_words=30, scene_id="s")
        assert info.value.stage == "cot_short"

    def test_floor_counts_after_sanitizing(self):
        class Padded:
            def analyze_image(self, prompt, image, seed, **kw):
                return "word " * 29 + "image 7"

        ins = InstructionText.from_text("A dog.", False)
        with pytest.raises(StageFailure):
            gen_cot(Padded(), ins, TARGET, self.subjects, 0, min_words=30)
