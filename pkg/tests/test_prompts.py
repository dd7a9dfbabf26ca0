import math
import random

import pytest

from kpinstruct.context import serialize_context
from kpinstruct.errors import EmptySeeds, MissingFile, SchemaViolation
from kpinstruct.prompts import (
    CONVERSATION_SYSTEM_PROMPT,
    COMPLEX_SYSTEM_PROMPT,
    DETAIL_INSTRUCTIONS,
    DETAIL_SYSTEM_PROMPT,
    SAMPLE_TYPES,
    SYSTEM_PROMPTS,
    SeedPair,
    build_complex_prompt,
    build_conversation_prompt,
    build_detail_prompt,
    build_prompt,
    build_question_prompt,
    load_seed_examples,
    pick_detail_instruction,
)
from kpinstruct.qa import parse_response


@pytest.fixture
def ctx(skier_record):
    return serialize_context(skier_record)


def test_sample_types():
    assert SAMPLE_TYPES == ("conversation", "detail", "complex")
    assert set(SYSTEM_PROMPTS) == set(SAMPLE_TYPES)


class TestSystemPrompts:
    def test_shared_framing(self):
        for prompt in (
            CONVERSATION_SYSTEM_PROMPT,
            DETAIL_SYSTEM_PROMPT,
            COMPLEX_SYSTEM_PROMPT,
        ):
            assert "(0: not labeled, 1: labeled but not visible, 2: labeled and visible)" in prompt
            assert "1. nose" in prompt
            assert "17. right ankle" in prompt
            assert (
                "**Do not include any coordinates or numerical values in your explanation**"
                in prompt
            )
            assert "as if you are directly looking at the image." in prompt

    def test_prompts_differ_by_task(self):
        assert len({CONVERSATION_SYSTEM_PROMPT, DETAIL_SYSTEM_PROMPT, COMPLEX_SYSTEM_PROMPT}) == 3

    def test_conversation_prompt_names_marker_format(self):
        assert "Question:" in CONVERSATION_SYSTEM_PROMPT
        assert "Answer:" in CONVERSATION_SYSTEM_PROMPT


class TestInstructionPool:
    def test_pool_size(self):
        assert len(DETAIL_INSTRUCTIONS) == 16
        assert len(set(DETAIL_INSTRUCTIONS)) == 16

    def test_known_member(self):
        assert (
            "Carefully observe the people in the image and share the details "
            "of their poses and actions." in DETAIL_INSTRUCTIONS
        )

    def test_uniform_draw(self):
        # 16k draws: each instruction expected 1000 times, 3 sigma ~ 92
        rng = random.Random(0)
        counts = {text: 0 for text in DETAIL_INSTRUCTIONS}
        n = 16_000
        for _ in range(n):
            counts[pick_detail_instruction(rng)] += 1
        expected = n / 16
        sigma = math.sqrt(n * (1 / 16) * (15 / 16))
        for text, count in counts.items():
            assert abs(count - expected) <= 3 * sigma, text

    def test_seeded_draw_is_deterministic(self):
        assert pick_detail_instruction(random.Random(123)) == pick_detail_instruction(
            random.Random(123)
        )


class TestFewShotAssembly:
    def test_conversation_shape(self, ctx, default_seeds):
        bundle = build_conversation_prompt(ctx, default_seeds.conversation, rng_seed=5)
        roles = [m.role for m in bundle.messages]
        assert roles == ["system", "user", "assistant", "user"]
        assert bundle.messages[0].content == CONVERSATION_SYSTEM_PROMPT
        assert bundle.messages[1].content == default_seeds.conversation[0].context
        assert bundle.messages[2].content == default_seeds.conversation[0].response
        assert bundle.messages[-1].content == ctx.full_text
        assert bundle.sample_type == "conversation"
        assert bundle.rng_seed == 5

    def test_seed_cap(self, ctx):
        seeds = [SeedPair(f"ctx {i}", f"resp {i}") for i in range(5)]
        bundle = build_conversation_prompt(ctx, seeds, max_seeds=3)
        assert len(bundle.messages) == 1 + 2 * 3 + 1
        assert bundle.messages[1].content == "ctx 0"
        assert bundle.messages[5].content == "ctx 2"

    def test_empty_seeds_rejected(self, ctx):
        with pytest.raises(EmptySeeds):
            build_complex_prompt(ctx, [])

    def test_detail_prepends_instruction(self, ctx, default_seeds):
        bundle = build_detail_prompt(ctx, default_seeds.detail, rng_seed=9)
        assert bundle.chosen_instruction in DETAIL_INSTRUCTIONS
        assert bundle.messages[-1].content == bundle.chosen_instruction + "\n" + ctx.full_text

    def test_detail_instruction_seeded(self, ctx, default_seeds):
        first = build_detail_prompt(ctx, default_seeds.detail, rng_seed=9)
        again = build_detail_prompt(ctx, default_seeds.detail, rng_seed=9)
        assert first.chosen_instruction == again.chosen_instruction
        drawn = {
            build_detail_prompt(ctx, default_seeds.detail, rng_seed=s).chosen_instruction
            for s in range(40)
        }
        assert len(drawn) > 1

    def test_non_detail_has_no_instruction(self, ctx, default_seeds):
        assert build_conversation_prompt(ctx, default_seeds.conversation).chosen_instruction is None
        assert build_complex_prompt(ctx, default_seeds.complex).chosen_instruction is None

    def test_dispatcher(self, ctx, default_seeds):
        for sample_type in SAMPLE_TYPES:
            bundle = build_prompt(sample_type, ctx, default_seeds.for_type(sample_type))
            assert bundle.sample_type == sample_type
        with pytest.raises(ValueError):
            build_prompt("poetry", ctx, default_seeds.conversation)


class TestQuestionPrompt:
    def test_two_messages(self, ctx):
        bundle = build_question_prompt("conversation", ctx)
        assert [m.role for m in bundle.messages] == ["system", "user"]
        assert bundle.messages[1].content == ctx.full_text
        assert "1. nose" in bundle.messages[0].content

    def test_detail_not_supported(self, ctx):
        # detail questions come from the instruction pool, not the teacher
        with pytest.raises(ValueError):
            build_question_prompt("detail", ctx)


class TestShippedSeeds:
    def test_each_type_present(self, default_seeds):
        for sample_type in SAMPLE_TYPES:
            assert len(default_seeds.for_type(sample_type)) >= 1

    def test_conversation_seed_parses(self, default_seeds):
        parsed = parse_response(default_seeds.conversation[0].response, "conversation")
        assert len(parsed.turns) >= 2

    def test_complex_seed_is_single_pair(self, default_seeds):
        parsed = parse_response(default_seeds.complex[0].response, "complex")
        assert len(parsed.turns) == 2
        assert "1. Diagonal Stride Technique" in parsed.turns[1].text

    def test_detail_seed_is_long_prose(self, default_seeds):
        response = default_seeds.detail[0].response
        assert len(response) >= 400
        assert "Question:" not in response

    def test_seed_contexts_share_layout(self, default_seeds, golden_layout):
        for sample_type in SAMPLE_TYPES:
            assert golden_layout.splitlines()[1] in default_seeds.for_type(sample_type)[0].context

    def test_for_type_rejects_unknown(self, default_seeds):
        with pytest.raises(ValueError):
            default_seeds.for_type("poetry")


class TestSeedFileLoading:
    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFile):
            load_seed_examples(tmp_path / "seeds.json")

    def test_missing_type_key(self, tmp_path):
        path = tmp_path / "seeds.json"
        path.write_text('{"conversation": [], "detail": []}')
        with pytest.raises(SchemaViolation) as err:
            load_seed_examples(path)
        assert err.value.field == "complex"

    def test_blank_response_rejected(self, tmp_path):
        path = tmp_path / "seeds.json"
        path.write_text(
            '{"conversation": [{"context": "c", "response": "  "}],'
            ' "detail": [], "complex": []}'
        )
        with pytest.raises(SchemaViolation):
            load_seed_examples(path)

    def test_round_trip(self, tmp_path):
        path = tmp_path / "seeds.json"
        path.write_text(
            '{"conversation": [{"context": "c1", "response": "r1"}],'
            ' "detail": [{"context": "c2", "response": "r2"}],'
            ' "complex": [{"context": "c3", "response": "r3"}]}'
        )
        seeds = load_seed_examples(path)
        assert seeds.detail[0] == SeedPair("c2", "r2")
