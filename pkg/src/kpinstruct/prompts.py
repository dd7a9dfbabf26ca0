"""Prompt assembly for the three instruction types.

Prompts follow a few-shot chat layout: one system message describing the
annotation format and the task, then alternating user/assistant pairs taken
from seed examples, then the target image context as the final user message.
The teacher model never sees the image itself, only the serialized context.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from .context import ContextBlock, KEYPOINT_NAMES
from .errors import EmptySeeds, MissingFile, SchemaViolation

SAMPLE_TYPES = ("conversation", "detail", "complex")

DEFAULT_MAX_SEEDS = 3

_KEYPOINT_LIST = "\n".join(f"{i + 1}. {name}" for i, name in enumerate(KEYPOINT_NAMES))

# Shared framing: what the annotations mean and how to talk about them.
SYSTEM_HEADER = (
    "You are an AI visual assistant specializing in analyzing human poses and "
    "actions in images. You receive five sentences, each describing the same "
    "image you are observing. In addition, specific object locations within "
    "the image are given, along with detailed coordinates. These coordinates "
    "are in the form of bounding boxes and human keypoints, represented as "
    "(x1, y1, x2, y2) for bounding boxes and (x, y, visibility) for human "
    "keypoints, with floating numbers ranging from 0 to 1. These values "
    "correspond to the top left x, top left y, bottom right x, and bottom "
    "right y for bounding boxes, and x, y coordinates along with visibility "
    "(0: not labeled, 1: labeled but not visible, 2: labeled and visible) for "
    "human keypoints.\n"
    "\n"
    "The human keypoints represent the following body parts:\n"
    f"{_KEYPOINT_LIST}\n"
)

SYSTEM_RULES = (
    "**Do not include any coordinates or numerical values in your "
    "explanation**. Instead, utilize the data to explain the scene using "
    "natural language. Include details like the number of people, their "
    "actions, poses, interactions, relative positions, as well as the "
    "relationships and interactions between people and objects in the scene. "
    "Describe how people are using objects, their proximity to objects, and "
    "any activities involving both people and objects.\n"
    "\n"
    "When using the information from the caption and coordinates, directly "
    "explain the scene, and do not mention that the information source is the "
    "caption or the bounding box/human keypoints. Always answer as if you are "
    "directly looking at the image."
)

COMPLEX_SYSTEM_PROMPT = (
    SYSTEM_HEADER
    + "\n"
    + "The task is to use the provided caption and bounding box/human keypoint "
    "information to create a plausible question about the human poses and "
    "actions in the image, and provide the answer in detail.\n"
    "\n"
    "Create complex questions beyond describing the scene. To answer such "
    "questions, one should require first understanding the human poses and "
    "actions, then based on the background knowledge or reasoning, either "
    "explain why the actions are happening that way, or provide guidance and "
    "help to the user's request. Make the question challenging by not "
    "including the visual content details in the question so that the user "
    "needs to reason about that first.\n"
    "\n" + SYSTEM_RULES
)

DETAIL_SYSTEM_PROMPT = (
    SYSTEM_HEADER
    + "\n"
    + "The task is to use the provided caption and bounding box/human keypoint "
    "information to write a comprehensive description of the human poses and "
    "actions in the image, following the instruction that accompanies the "
    "image context. Cover the positioning of limbs, balance and body "
    "language, and how the people relate to the objects and the environment "
    "around them.\n"
    "\n" + SYSTEM_RULES
)

CONVERSATION_SYSTEM_PROMPT = (
    SYSTEM_HEADER
    + "\n"
    + "The task is to use the provided caption and bounding box/human keypoint "
    "information to design a conversation between you and a person asking "
    "about the human poses and actions in this image. The answers should be "
    "in a tone that a visual AI assistant is seeing the image and answering "
    "the question. Write one or more question and answer pairs, each question "
    "on a line starting with \"Question:\" and each answer on a line starting "
    "with \"Answer:\". Ask diverse questions about what the people are doing, "
    "how they hold themselves, and how they interact with each other and with "
    "objects in the scene. Only include questions that have definite answers "
    "given the information provided.\n"
    "\n" + SYSTEM_RULES
)

SYSTEM_PROMPTS = {
    "conversation": CONVERSATION_SYSTEM_PROMPT,
    "detail": DETAIL_SYSTEM_PROMPT,
    "complex": COMPLEX_SYSTEM_PROMPT,
}

# Instruction pool for detailed descriptions; one is drawn per image.
DETAIL_INSTRUCTIONS = (
    "Describe the actions and poses of people in the following image in detail.",
    "Provide a detailed description of the poses of people in the given image.",
    "Explain the various details of the actions of people you see in the image.",
    "Share a comprehensive analysis of the behaviors of people presented in the image.",
    "Offer a thorough analysis of the actions of people in the image.",
    "Explain the various poses and actions of people in the displayed image with great detail.",
    "Characterize the poses of people in the image using a well-detailed description.",
    "Break down the actions of people in the image in a detailed manner.",
    "Walk through the important details of the actions of people in the image.",
    "Portray the poses and actions of people in the image with a rich, descriptive narrative.",
    "Narrate the actions and poses of people in the image with precision.",
    "Analyze the poses and actions of people in the image in a comprehensive and detailed manner.",
    "Illustrate the actions and poses of people in the image through a descriptive explanation.",
    "Examine the actions and poses of people in the image closely and share their details.",
    "Write an exhaustive depiction of the actions of people in the given image.",
    "Carefully observe the people in the image and share the details of their poses and actions.",
)

_QUESTION_TASKS = {
    "conversation": (
        "The task is to use the provided caption and bounding box/human "
        "keypoint information to write one natural question a person might "
        "ask about the human poses and actions in the image. Output only the "
        "question text, with no answer and no commentary. Do not include any "
        "coordinates or numerical values in the question."
    ),
    "complex": (
        "The task is to use the provided caption and bounding box/human "
        "keypoint information to create one complex question about the human "
        "poses and actions in the image, a question that requires reasoning "
        "rather than plain description. Do not include the visual content "
        "details in the question so that answering it requires working them "
        "out first. Output only the question text, with no answer and no "
        "commentary. Do not include any coordinates or numerical values in "
        "the question."
    ),
}


@dataclass(frozen=True)
class Message:
    role: str  # system | user | assistant
    content: str


@dataclass(frozen=True)
class SeedPair:
    """One in-context example: a serialized context and the ideal response."""

    context: str
    response: str


@dataclass(frozen=True)
class SeedSet:
    conversation: tuple[SeedPair, ...]
    detail: tuple[SeedPair, ...]
    complex: tuple[SeedPair, ...]

    def for_type(self, sample_type: str) -> tuple[SeedPair, ...]:
        if sample_type not in SAMPLE_TYPES:
            raise ValueError(f"unknown sample type {sample_type!r}")
        return getattr(self, sample_type)


@dataclass(frozen=True)
class PromptBundle:
    sample_type: str
    messages: tuple[Message, ...]
    rng_seed: int
    chosen_instruction: str | None = None


def pick_detail_instruction(rng: random.Random) -> str:
    """Draw one description instruction uniformly from the pool."""
    return rng.choice(DETAIL_INSTRUCTIONS)


def _few_shot(
    sample_type: str,
    system_text: str,
    seeds: Sequence[SeedPair],
    target_text: str,
    rng_seed: int,
    max_seeds: int,
    chosen_instruction: str | None = None,
) -> PromptBundle:
    if not seeds:
        raise EmptySeeds(sample_type)
    messages = [Message("system", system_text)]
    for pair in seeds[:max_seeds]:
        messages.append(Message("user", pair.context))
        messages.append(Message("assistant", pair.response))
    messages.append(Message("user", target_text))
    return PromptBundle(
        sample_type=sample_type,
        messages=tuple(messages),
        rng_seed=rng_seed,
        chosen_instruction=chosen_instruction,
    )


def build_conversation_prompt(
    ctx: ContextBlock,
    seeds: Sequence[SeedPair],
    rng_seed: int = 0,
    max_seeds: int = DEFAULT_MAX_SEEDS,
) -> PromptBundle:
    return _few_shot(
        "conversation", CONVERSATION_SYSTEM_PROMPT, seeds, ctx.full_text, rng_seed, max_seeds
    )


def build_detail_prompt(
    ctx: ContextBlock,
    seeds: Sequence[SeedPair],
    rng_seed: int = 0,
    max_seeds: int = DEFAULT_MAX_SEEDS,
) -> PromptBundle:
    """Like the other builders, but prepends a randomly drawn instruction.

    The draw is seeded so the same (context, seeds, rng_seed) triple always
    yields the same instruction, which is recorded on the bundle.
    """
    instruction = pick_detail_instruction(random.Random(rng_seed))
    target = instruction + "\n" + ctx.full_text
    return _few_shot(
        "detail", DETAIL_SYSTEM_PROMPT, seeds, target, rng_seed, max_seeds, instruction
    )


def build_complex_prompt(
    ctx: ContextBlock,
    seeds: Sequence[SeedPair],
    rng_seed: int = 0,
    max_seeds: int = DEFAULT_MAX_SEEDS,
) -> PromptBundle:
    return _few_shot(
        "complex", COMPLEX_SYSTEM_PROMPT, seeds, ctx.full_text, rng_seed, max_seeds
    )


def build_prompt(
    sample_type: str,
    ctx: ContextBlock,
    seeds: Sequence[SeedPair],
    rng_seed: int = 0,
    max_seeds: int = DEFAULT_MAX_SEEDS,
) -> PromptBundle:
    builder = {
        "conversation": build_conversation_prompt,
        "detail": build_detail_prompt,
        "complex": build_complex_prompt,
    }.get(sample_type)
    if builder is None:
        raise ValueError(f"unknown sample type {sample_type!r}")
    return builder(ctx, seeds, rng_seed=rng_seed, max_seeds=max_seeds)


def build_question_prompt(sample_type: str, ctx: ContextBlock) -> PromptBundle:
    """Single-shot prompt asking the teacher for a benchmark question only."""
    if sample_type not in _QUESTION_TASKS:
        raise ValueError(f"no question generator for type {sample_type!r}")
    system_text = SYSTEM_HEADER + "\n" + _QUESTION_TASKS[sample_type]
    return PromptBundle(
        sample_type=sample_type,
        messages=(Message("system", system_text), Message("user", ctx.full_text)),
        rng_seed=0,
    )


def _parse_seed_pairs(raw, sample_type: str) -> tuple[SeedPair, ...]:
    if not isinstance(raw, list):
        raise SchemaViolation(sample_type, "seed entries must form a list")
    pairs = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise SchemaViolation(sample_type, f"seed {i} is not an object")
        context = entry.get("context")
        response = entry.get("response")
        if not isinstance(context, str) or not context.strip():
            raise SchemaViolation(sample_type, f"seed {i} has no context text")
        if not isinstance(response, str) or not response.strip():
            raise SchemaViolation(sample_type, f"seed {i} has no response text")
        pairs.append(SeedPair(context=context, response=response))
    return tuple(pairs)


def load_seed_examples(path: str | Path) -> SeedSet:
    """Load the few-shot seed file: one list of context/response pairs per type."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation("seeds", f"{path}: {exc.msg} at offset {exc.pos}") from exc
    if not isinstance(doc, dict):
        raise SchemaViolation("seeds", "top level must be an object")
    kwargs = {}
    for sample_type in SAMPLE_TYPES:
        if sample_type not in doc:
            raise SchemaViolation(sample_type, f"missing from seed file {path}")
        kwargs[sample_type] = _parse_seed_pairs(doc[sample_type], sample_type)
    return SeedSet(**kwargs)


def load_default_seeds() -> SeedSet:
    """Load the seed examples shipped with the package."""
    with resources.as_file(
        resources.files("kpinstruct").joinpath("data/seed_examples.json")
    ) as path:
        return load_seed_examples(path)
