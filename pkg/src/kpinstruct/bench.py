"""Judge-based evaluation of a candidate model against text-only references.

A benchmark is a sampled set of person images with one question per sample
type.  Reference answers come from a text-only backend that sees the full
ground-truth context, which makes them an approximate upper bound.  A judge
backend then scores candidate and reference answers side by side on a 1-10
scale; the per-item ratio (candidate over reference, times 100) is averaged
per type, and the overall score is the unweighted mean of the three types.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass
from pathlib import Path
from statistics import fmean
from typing import Callable, Sequence

import requests

from .context import ContextBlock, serialize_context
from .errors import (
    EmptyCategory,
    InsufficientImages,
    JudgeParseError,
    MalformedAnswerFile,
    SchemaViolation,
    ZeroBaseline,
    ZeroReference,
)
from .gateway import ChatRequest, Gateway
from .ingest import ImageRecord
from .pipeline import derive_entry_seed
from .prompts import (
    Message,
    SAMPLE_TYPES,
    SYSTEM_HEADER,
    SYSTEM_RULES,
    build_question_prompt,
    pick_detail_instruction,
)

logger = logging.getLogger(__name__)

TYPE_LABELS = {
    "conversation": "Conversation",
    "detail": "Detailed description",
    "complex": "Complex reasoning",
}

REFERENCE_SYSTEM_PROMPT = (
    SYSTEM_HEADER
    + "\n"
    + "The task is to answer the question that follows the image information. "
    "Answer helpfully and in detail, as if you are directly looking at the "
    "image.\n"
    "\n" + SYSTEM_RULES
)

JUDGE_SYSTEM_PROMPT = (
    "You are an impartial judge comparing the quality of two AI assistant "
    "responses to the same question about an image. The image is described "
    "to you through caption sentences and object coordinates; use them as "
    "ground truth.\n"
    "\n"
    "Rate each response on its helpfulness, relevance, accuracy, and level "
    "of detail. Give each assistant an overall score on a scale of 1 to 10, "
    "where a higher score indicates better overall performance.\n"
    "\n"
    "On the first line output exactly two integers separated by a space: the "
    "score for Assistant 1, then the score for Assistant 2. On the following "
    "lines explain your comparison, commenting on both responses against "
    "each of the four criteria and taking care that the order in which the "
    "responses were presented does not influence your judgement."
)


@dataclass(frozen=True)
class BenchmarkItem:
    item_id: str  # "<image_id>:<sample_type>"
    image_id: int
    image_file: str
    sample_type: str
    question: str
    context: ContextBlock


@dataclass(frozen=True)
class Benchmark:
    items: tuple[BenchmarkItem, ...]
    rng_seed: int


@dataclass(frozen=True)
class AnswerSet:
    source_id: str
    answers: dict
    gaps: tuple[str, ...] = ()


@dataclass(frozen=True)
class JudgeResult:
    item_id: str
    sample_type: str
    score_candidate: int
    score_reference: int
    explanation: str
    candidate_position: int  # 1 if the candidate was shown as Assistant 1


@dataclass(frozen=True)
class ScoreTable:
    per_type: dict
    overall: float
    judged: int
    unjudged: tuple[str, ...] = ()


@dataclass
class EvalSettings:
    model_name: str = "gpt-4o"
    temperature: float = 0.0
    max_tokens: int = 1024


def _question_from_source(questions: dict, item_id: str, sample_type: str, rng: random.Random) -> str:
    items = questions.get("items", {})
    if item_id in items:
        return str(items[item_id])
    pools = questions.get("pools", {})
    pool = pools.get(sample_type)
    if pool:
        return str(rng.choice(list(pool)))
    raise SchemaViolation("questions", f"no question available for {item_id}")


def build_benchmark(
    records: Sequence[ImageRecord],
    n_images: int,
    rng_seed: int = 0,
    gateway: Gateway | None = None,
    questions: dict | None = None,
    settings: EvalSettings | None = None,
) -> Benchmark:
    """Sample images and attach one question per sample type.

    Detail questions come from the instruction pool.  Conversation and
    complex questions come from a question file when one is provided,
    otherwise they are generated through the teacher gateway.
    """
    settings = settings or EvalSettings()
    if n_images > len(records):
        raise InsufficientImages(n_images, len(records), where="benchmark")
    if n_images < 1:
        raise ValueError("benchmark needs at least one image")
    ordered = sorted(records, key=lambda r: r.image_id)
    rng = random.Random(rng_seed)
    chosen = sorted(rng.sample(ordered, n_images), key=lambda r: r.image_id)

    items = []
    for record in chosen:
        ctx = serialize_context(record)
        for sample_type in SAMPLE_TYPES:
            item_id = f"{record.image_id}:{sample_type}"
            item_rng = random.Random(
                derive_entry_seed(rng_seed, record.image_id, f"question:{sample_type}")
            )
            if sample_type == "detail":
                question = pick_detail_instruction(item_rng)
            elif questions is not None:
                question = _question_from_source(questions, item_id, sample_type, item_rng)
            elif gateway is not None:
                bundle = build_question_prompt(sample_type, ctx)
                request = ChatRequest(
                    model_name=settings.model_name,
                    messages=bundle.messages,
                    temperature=settings.temperature,
                    max_tokens=settings.max_tokens,
                    request_tag=f"benchq:{record.image_id}:{sample_type}",
                )
                question = gateway.complete(request).text.strip()
            else:
                raise ValueError(
                    "conversation/complex questions need a question file or a gateway"
                )
            items.append(
                BenchmarkItem(
                    item_id=item_id,
                    image_id=record.image_id,
                    image_file=record.file_name,
                    sample_type=sample_type,
                    question=question,
                    context=ctx,
                )
            )
    items.sort(key=lambda it: (it.image_id, it.sample_type))
    return Benchmark(items=tuple(items), rng_seed=rng_seed)


def build_reference_request(item: BenchmarkItem, settings: EvalSettings) -> ChatRequest:
    return ChatRequest(
        model_name=settings.model_name,
        messages=(
            Message("system", REFERENCE_SYSTEM_PROMPT),
            Message("user", item.context.full_text + "\n\n" + item.question),
        ),
        temperature=settings.temperature,
        max_tokens=settings.max_tokens,
        request_tag=f"ref:{item.item_id}",
    )


def generate_reference_answers(
    bench: Benchmark, gateway: Gateway, settings: EvalSettings | None = None
) -> AnswerSet:
    """Answer every benchmark question from the ground-truth context.

    Per-item backend failures are recorded as gaps instead of aborting, so a
    flaky run still produces a usable (if smaller) reference set.
    """
    settings = settings or EvalSettings()
    answers = {}
    gaps = []
    for item in bench.items:
        request = build_reference_request(item, settings)
        try:
            answers[item.item_id] = gateway.complete(request).text
        except Exception as exc:  # noqa: BLE001 - recorded, run continues
            logger.warning("reference answer failed for %s: %s", item.item_id, exc)
            gaps.append(item.item_id)
    return AnswerSet(
        source_id=f"reference:{settings.model_name}",
        answers=answers,
        gaps=tuple(sorted(gaps)),
    )


def collect_candidate_answers(
    bench: Benchmark,
    answers_file: str | Path | None = None,
    endpoint: str | None = None,
    post: Callable | None = None,
    source_id: str = "",
    timeout: float = 60.0,
) -> AnswerSet:
    """Gather candidate answers from a file or an HTTP endpoint.

    The file form is a JSON map from item id to answer text, optionally
    wrapped as {"source_id": ..., "answers": {...}}.  The endpoint form POSTs
    {"question", "image_file"} per item and expects {"answer": ...} back.
    Items without answers are listed as gaps, never silently dropped.
    """
    if (answers_file is None) == (endpoint is None):
        raise ValueError("provide exactly one of answers_file or endpoint")

    answers: dict = {}
    if answers_file is not None:
        path = Path(answers_file)
        if not path.exists():
            raise MalformedAnswerFile(f"answer file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise MalformedAnswerFile(f"{path}: {exc.msg} at offset {exc.pos}") from exc
        if not isinstance(doc, dict):
            raise MalformedAnswerFile("answer file must hold a JSON object")
        if "answers" in doc and isinstance(doc["answers"], dict):
            source_id = source_id or str(doc.get("source_id", path.stem))
            doc = doc["answers"]
        for key, value in doc.items():
            if not isinstance(value, str):
                raise MalformedAnswerFile(f"answer for {key!r} is not text")
            answers[str(key)] = value
        source_id = source_id or path.stem
    else:
        post = post or requests.post
        source_id = source_id or endpoint
        for item in bench.items:
            try:
                resp = post(
                    endpoint,
                    json={"question": item.question, "image_file": item.image_file},
                    timeout=timeout,
                )
                resp.raise_for_status()
                answers[item.item_id] = str(resp.json()["answer"])
            except Exception as exc:  # noqa: BLE001 - recorded, run continues
                logger.warning("candidate answer failed for %s: %s", item.item_id, exc)

    gaps = tuple(sorted(it.item_id for it in bench.items if it.item_id not in answers))
    return AnswerSet(source_id=source_id, answers=answers, gaps=gaps)


def parse_judge_scores(text: str) -> tuple[int, int, str]:
    """Extract the two integer scores and the explanation from judge output.

    The scores are read off the first line that carries digits; everything
    after that line is the explanation.
    """
    lines = text.splitlines()
    for i, line in enumerate(lines):
        found = re.findall(r"-?\d+", line)
        if not found:
            continue
        # Exactly two integers, or the line is ambiguous ("Assistant 1: 8,
        # Assistant 2: 6" would otherwise read as scores 1 and 8).
        if len(found) != 2:
            raise JudgeParseError(f"expected exactly two scores on one line, got {line!r}")
        first, second = int(found[0]), int(found[1])
        for score in (first, second):
            if not 1 <= score <= 10:
                raise JudgeParseError(f"score {score} outside the 1-10 scale")
        explanation = "\n".join(lines[i + 1:]).strip()
        return first, second, explanation
    raise JudgeParseError(f"no scores found in judge output {text[:80]!r}")


def build_judge_request(
    item: BenchmarkItem, first_answer: str, second_answer: str, settings: EvalSettings
) -> ChatRequest:
    user_text = (
        f"Image information:\n{item.context.full_text}\n\n"
        f"Question: {item.question}\n\n"
        f"Assistant 1 response:\n{first_answer}\n\n"
        f"Assistant 2 response:\n{second_answer}"
    )
    return ChatRequest(
        model_name=settings.model_name,
        messages=(Message("system", JUDGE_SYSTEM_PROMPT), Message("user", user_text)),
        temperature=settings.temperature,
        max_tokens=settings.max_tokens,
        request_tag=f"judge:{item.item_id}",
    )


def judge_item(
    item: BenchmarkItem,
    reference_answer: str,
    candidate_answer: str,
    gateway: Gateway,
    rng: random.Random,
    settings: EvalSettings | None = None,
) -> JudgeResult:
    """Score one candidate/reference pair, randomizing presentation order.

    One fresh (cache-bypassing) retry is attempted when the judge output does
    not parse; a second failure propagates and the caller marks the item
    unjudged.
    """
    settings = settings or EvalSettings()
    candidate_position = 1 if rng.random() < 0.5 else 2
    if candidate_position == 1:
        request = build_judge_request(item, candidate_answer, reference_answer, settings)
    else:
        request = build_judge_request(item, reference_answer, candidate_answer, settings)

    response = gateway.complete(request)
    try:
        first, second, explanation = parse_judge_scores(response.text)
    except JudgeParseError:
        response = gateway.complete(request, use_cache=False)
        first, second, explanation = parse_judge_scores(response.text)

    if candidate_position == 1:
        score_candidate, score_reference = first, second
    else:
        score_candidate, score_reference = second, first
    return JudgeResult(
        item_id=item.item_id,
        sample_type=item.sample_type,
        score_candidate=score_candidate,
        score_reference=score_reference,
        explanation=explanation,
        candidate_position=candidate_position,
    )


def judge_benchmark(
    bench: Benchmark,
    references: AnswerSet,
    candidates: AnswerSet,
    gateway: Gateway,
    rng_seed: int = 0,
    settings: EvalSettings | None = None,
) -> tuple[list[JudgeResult], list[str]]:
    """Judge every item that has both answers; report the rest as unjudged."""
    settings = settings or EvalSettings()
    results = []
    unjudged = []
    for item in bench.items:
        ref = references.answers.get(item.item_id)
        cand = candidates.answers.get(item.item_id)
        if ref is None or cand is None:
            unjudged.append(item.item_id)
            continue
        rng = random.Random(derive_entry_seed(rng_seed, item.image_id, f"order:{item.sample_type}"))
        try:
            results.append(judge_item(item, ref, cand, gateway, rng, settings))
        except JudgeParseError as exc:
            logger.warning("judge output unusable for %s: %s", item.item_id, exc)
            unjudged.append(item.item_id)
    return results, unjudged


def relative_score(candidate: float, reference: float) -> float:
    """Candidate score as a percentage of the reference score."""
    if reference <= 0:
        raise ZeroReference()
    return 100.0 * candidate / reference


def overall_from_categories(per_type: dict) -> float:
    """Unweighted mean of the three per-type scores."""
    missing = [t for t in SAMPLE_TYPES if t not in per_type]
    if missing:
        raise EmptyCategory(missing[0])
    return fmean(per_type[t] for t in SAMPLE_TYPES)


def aggregate_scores(
    results: Sequence[JudgeResult], unjudged: Sequence[str] = ()
) -> ScoreTable:
    """Collapse judge results into per-type means and the overall score.

    Unjudged items are excluded from every mean and surfaced in the table so
    coverage loss stays visible.  Raises when a type has no judged items: an
    overall score built from two categories would silently shift the scale.
    """
    by_type: dict = {t: [] for t in SAMPLE_TYPES}
    for result in results:
        by_type[result.sample_type].append(
            relative_score(result.score_candidate, result.score_reference)
        )
    for sample_type in SAMPLE_TYPES:
        if not by_type[sample_type]:
            raise EmptyCategory(sample_type)
    per_type = {t: fmean(by_type[t]) for t in SAMPLE_TYPES}
    return ScoreTable(
        per_type=per_type,
        overall=overall_from_categories(per_type),
        judged=len(results),
        unjudged=tuple(sorted(unjudged)),
    )


def improvement_percent(new_score: float, baseline: float) -> float:
    if baseline <= 0:
        raise ZeroBaseline()
    return 100.0 * (new_score - baseline) / baseline


def score_table_to_dict(table: ScoreTable) -> dict:
    return {
        "per_type": {t: table.per_type[t] for t in SAMPLE_TYPES},
        "overall": table.overall,
        "judged": table.judged,
        "unjudged": list(table.unjudged),
    }


def render_score_report(tables: Sequence[tuple[str, ScoreTable]]) -> str:
    """Markdown table, one row per scored source, plus coverage footnotes."""
    header = (
        "| Source | " + " | ".join(TYPE_LABELS[t] for t in SAMPLE_TYPES) + " | All |"
    )
    divider = "|" + " --- |" * (len(SAMPLE_TYPES) + 2)
    lines = [header, divider]
    footnotes = []
    for label, table in tables:
        cells = [f"{table.per_type[t]:.2f}" for t in SAMPLE_TYPES]
        lines.append(f"| {label} | " + " | ".join(cells) + f" | {table.overall:.2f} |")
        if table.unjudged:
            footnotes.append(
                f"{label}: {len(table.unjudged)} unjudged item(s) excluded from "
                f"means: {', '.join(table.unjudged)}"
            )
    if footnotes:
        lines.append("")
        for note in footnotes:
            lines.append(f"Note: {note}")
    return "\n".join(lines) + "\n"


# --- file round trips ---------------------------------------------------------


def save_benchmark(bench: Benchmark, path: str | Path) -> None:
    doc = {
        "rng_seed": bench.rng_seed,
        "items": [
            {
                "item_id": it.item_id,
                "image_id": it.image_id,
                "image_file": it.image_file,
                "type": it.sample_type,
                "question": it.question,
                "context": {
                    "image_id": it.context.image_id,
                    "captions_text": it.context.captions_text,
                    "layout_text": it.context.layout_text,
                },
            }
            for it in bench.items
        ],
    }
    Path(path).write_text(
        json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def load_benchmark(path: str | Path) -> Benchmark:
    path = Path(path)
    if not path.exists():
        raise SchemaViolation("benchmark", f"file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    items = []
    for entry in doc.get("items", []):
        ctx = entry["context"]
        items.append(
            BenchmarkItem(
                item_id=entry["item_id"],
                image_id=int(entry["image_id"]),
                image_file=entry["image_file"],
                sample_type=entry["type"],
                question=entry["question"],
                context=ContextBlock(
                    image_id=int(ctx["image_id"]),
                    captions_text=ctx["captions_text"],
                    layout_text=ctx["layout_text"],
                ),
            )
        )
    return Benchmark(items=tuple(items), rng_seed=int(doc.get("rng_seed", 0)))


def save_answer_set(answers: AnswerSet, path: str | Path) -> None:
    doc = {
        "source_id": answers.source_id,
        "answers": dict(sorted(answers.answers.items())),
        "gaps": list(answers.gaps),
    }
    Path(path).write_text(
        json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def load_answer_set(path: str | Path) -> AnswerSet:
    path = Path(path)
    if not path.exists():
        raise MalformedAnswerFile(f"answer file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    return AnswerSet(
        source_id=str(doc.get("source_id", path.stem)),
        answers=dict(doc.get("answers", {})),
        gaps=tuple(doc.get("gaps", [])),
    )


def save_judge_results(
    results: Sequence[JudgeResult], unjudged: Sequence[str], path: str | Path
) -> None:
    doc = {
        "results": [
            {
                "item_id": r.item_id,
                "type": r.sample_type,
                "score_candidate": r.score_candidate,
                "score_reference": r.score_reference,
                "explanation": r.explanation,
                "candidate_position": r.candidate_position,
            }
            for r in results
        ],
        "unjudged": list(unjudged),
    }
    Path(path).write_text(
        json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def load_judge_results(path: str | Path) -> tuple[list[JudgeResult], list[str]]:
    path = Path(path)
    if not path.exists():
        raise SchemaViolation("results", f"file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    results = [
        JudgeResult(
            item_id=entry["item_id"],
            sample_type=entry["type"],
            score_candidate=int(entry["score_candidate"]),
            score_reference=int(entry["score_reference"]),
            explanation=entry.get("explanation", ""),
            candidate_position=int(entry.get("candidate_position", 1)),
        )
        for entry in doc.get("results", [])
    ]
    return results, list(doc.get("unjudged", []))
