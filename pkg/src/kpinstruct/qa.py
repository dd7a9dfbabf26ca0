"""Parsing of teacher responses and rule-based quality gating.

Conversation and complex-reasoning responses arrive as Question:/Answer:
blocks; detailed descriptions are free prose.  After parsing, a small set of
rules decides whether a response is usable: no raw coordinates leaked into
the text, no references to the annotation source, answers long enough and
non-empty.  The whole gate can be switched off through the policy.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable

from .errors import StructureViolation

HUMAN = "human"
GPT = "gpt"

MIN_ANSWER_CHARS = {"conversation": 40, "detail": 400, "complex": 400}


@dataclass(frozen=True)
class Turn:
    speaker: str  # human | gpt
    text: str


@dataclass(frozen=True)
class StructuredResponse:
    sample_type: str
    turns: tuple[Turn, ...]

    def gpt_turns(self) -> tuple[Turn, ...]:
        return tuple(t for t in self.turns if t.speaker == GPT)


@dataclass(frozen=True)
class Violation:
    rule_id: str  # coordinate_leak | empty_answer | structure | too_short | meta_reference
    span: tuple[int, int]
    detail: str


@dataclass(frozen=True)
class GateResult:
    accepted: bool
    violations: tuple[Violation, ...]


@dataclass(frozen=True)
class QualityPolicy:
    min_answer_chars: dict = field(default_factory=lambda: dict(MIN_ANSWER_CHARS))
    check_meta_references: bool = True
    enabled: bool = True


_MARKER = re.compile(r"^[ \t]*(question|answer)[ \t]*:[ \t]*", re.IGNORECASE | re.MULTILINE)

# Coordinate-leak patterns.  A bracketed run of two or more numbers, a
# parenthesized pair/triple of decimals, or a bare 0.xx value with at least
# two fractional digits all look like annotation data rather than prose.
# Line-start enumeration markers ("1. ") and plain integers never match.
_BRACKET_LIST = re.compile(r"\[\s*-?\d+(?:\.\d+)?(?:\s*,\s*-?\d+(?:\.\d+)?)+\s*\]")
_DECIMAL_TUPLE = re.compile(r"\(\s*-?\d+\.\d+\s*,\s*-?\d+\.\d+(?:\s*,\s*-?\d+(?:\.\d+)?)*\s*\)")
_BARE_DECIMAL = re.compile(r"(?<![\d.])0\.\d{2,}(?![\d.])")

_META_REFERENCE = re.compile(
    r"\b(captions?|bounding[ -]?box(?:es)?|key[ -]?points?|annotations?)\b",
    re.IGNORECASE,
)


def parse_response(raw: str, sample_type: str) -> StructuredResponse:
    """Split raw teacher output into alternating turns.

    Detail responses become a single gpt turn; the instruction that prompted
    them is attached later, when the sample is assembled.  Conversation
    responses need one or more Question:/Answer: pairs, complex exactly one.
    Text before the first marker is tolerated and dropped.
    """
    if not raw or not raw.strip():
        raise StructureViolation("empty response text")

    if sample_type == "detail":
        return StructuredResponse(sample_type="detail", turns=(Turn(GPT, raw.strip()),))
    if sample_type not in ("conversation", "complex"):
        raise ValueError(f"unknown sample type {sample_type!r}")

    markers = list(_MARKER.finditer(raw))
    if not markers:
        raise StructureViolation("no Question:/Answer: markers found")

    segments = []  # (kind, text)
    for i, m in enumerate(markers):
        end = markers[i + 1].start() if i + 1 < len(markers) else len(raw)
        segments.append((m.group(1).lower(), raw[m.end():end].strip()))

    if segments[0][0] != "question":
        raise StructureViolation("response starts with an answer, not a question")
    if len(segments) % 2 != 0:
        raise StructureViolation("unpaired question/answer markers")

    turns = []
    for i in range(0, len(segments), 2):
        q_kind, q_text = segments[i]
        a_kind, a_text = segments[i + 1]
        if q_kind != "question" or a_kind != "answer":
            raise StructureViolation("markers do not alternate question/answer")
        if not q_text:
            raise StructureViolation("empty question text")
        turns.append(Turn(HUMAN, q_text))
        turns.append(Turn(GPT, a_text))

    n_pairs = len(turns) // 2
    if sample_type == "complex" and n_pairs != 1:
        raise StructureViolation(f"complex response must hold exactly one pair, got {n_pairs}")
    return StructuredResponse(sample_type=sample_type, turns=tuple(turns))


def render_response(resp: StructuredResponse) -> str:
    """Inverse of parse_response: reconstruct the raw marker text."""
    if resp.sample_type == "detail":
        return resp.turns[-1].text
    blocks = []
    for i in range(0, len(resp.turns), 2):
        blocks.append(f"Question: {resp.turns[i].text}\nAnswer: {resp.turns[i + 1].text}")
    return "\n\n".join(blocks)


def _spans_overlap(span: tuple[int, int], taken: Iterable[tuple[int, int]]) -> bool:
    return any(span[0] < t[1] and t[0] < span[1] for t in taken)


def detect_coordinate_leak(text: str) -> list[Violation]:
    """Find numeric fragments that look like leaked annotation coordinates.

    Overlapping matches are reported once: a bracketed list counts as a single
    violation even though every number inside it would also match on its own.
    """
    violations: list[Violation] = []
    taken: list[tuple[int, int]] = []
    for pattern in (_BRACKET_LIST, _DECIMAL_TUPLE, _BARE_DECIMAL):
        for m in pattern.finditer(text):
            span = m.span()
            if _spans_overlap(span, taken):
                continue
            taken.append(span)
            violations.append(
                Violation(rule_id="coordinate_leak", span=span, detail=m.group(0))
            )
    violations.sort(key=lambda v: v.span)
    return violations


def quality_gate(resp: StructuredResponse, policy: QualityPolicy | None = None) -> GateResult:
    """Apply the acceptance rules to a parsed response.

    Leak and meta-reference checks run over every turn; length checks only
    over gpt turns.  Returns all violations found, not just the first.
    """
    policy = policy or QualityPolicy()
    if not policy.enabled:
        return GateResult(accepted=True, violations=())

    min_chars = policy.min_answer_chars.get(resp.sample_type, 0)
    violations: list[Violation] = []
    for index, turn in enumerate(resp.turns):
        text = turn.text
        for leak in detect_coordinate_leak(text):
            violations.append(
                Violation(
                    rule_id="coordinate_leak",
                    span=leak.span,
                    detail=f"turn {index}: {leak.detail}",
                )
            )
        if policy.check_meta_references:
            meta = _META_REFERENCE.search(text)
            if meta:
                violations.append(
                    Violation(
                        rule_id="meta_reference",
                        span=meta.span(),
                        detail=f"turn {index}: mentions {meta.group(0)!r}",
                    )
                )
        if turn.speaker != GPT:
            continue
        if not text.strip():
            violations.append(
                Violation(rule_id="empty_answer", span=(0, 0), detail=f"turn {index} is empty")
            )
        elif len(text) < min_chars:
            violations.append(
                Violation(
                    rule_id="too_short",
                    span=(0, len(text)),
                    detail=f"turn {index}: {len(text)} chars, need {min_chars}",
                )
            )
    return GateResult(accepted=not violations, violations=tuple(violations))
