"""Dataset generation: plan which images get which sample types, fan the
prompts out to the gateway, gate the responses, and write the result.

Every random choice is derived from the global seed plus stable identifiers,
so a plan and the dataset built from it are reproducible run to run as long
as the backend is deterministic (mock) or cached.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .context import SerializationPolicy, serialize_context
from .errors import (
    AuthError,
    ContentFilterRefusal,
    GatewayError,
    InsufficientImages,
    SchemaViolation,
    StructureViolation,
)
from .gateway import ChatRequest, Gateway, request_digest
from .ingest import ImageRecord
from .prompts import SAMPLE_TYPES, PromptBundle, SeedSet, build_prompt
from .qa import (
    GPT,
    HUMAN,
    QualityPolicy,
    StructuredResponse,
    Turn,
    parse_response,
    quality_gate,
)

logger = logging.getLogger(__name__)

IMAGE_TOKEN = "<image>"

# Default split between the three types, matching the ratios of the shipped
# generation recipe (conversation-heavy).
DEFAULT_MIX_FRACTIONS = {"conversation": 0.564, "detail": 0.2255, "complex": 0.2105}


@dataclass(frozen=True)
class PlanEntry:
    image_id: int
    sample_type: str
    rng_seed: int


@dataclass(frozen=True)
class GenerationPlan:
    entries: tuple[PlanEntry, ...]
    target_counts: dict
    global_seed: int


@dataclass(frozen=True)
class Provenance:
    model_name: str
    prompt_digest: str
    run_id: str


@dataclass(frozen=True)
class InstructionSample:
    sample_id: str
    image_file: str
    sample_type: str
    turns: tuple[Turn, ...]
    provenance: Provenance


@dataclass
class GenerationSettings:
    model_name: str = "gpt-4o"
    temperature: float = 0.7
    max_tokens: int = 1024
    max_seeds: int = 3
    serialization: SerializationPolicy = field(default_factory=SerializationPolicy)
    quality: QualityPolicy = field(default_factory=QualityPolicy)
    retry_rejected: bool = False
    run_id: str = ""
    config_digest: str = ""


@dataclass
class RunReport:
    """Outcome counts for one generation run plus one event per non-accept."""

    run_id: str
    accepted: int = 0
    rejected: int = 0
    refused: int = 0
    failed: int = 0
    rejected_by_rule: dict = field(default_factory=dict)
    events: list = field(default_factory=list)

    def record_rejection(self, image_id: int, sample_type: str, rules: Sequence[str], detail: str):
        self.rejected += 1
        for rule in sorted(set(rules)):
            self.rejected_by_rule[rule] = self.rejected_by_rule.get(rule, 0) + 1
        self.events.append(
            {
                "image_id": image_id,
                "type": sample_type,
                "status": "rejected",
                "rules": sorted(set(rules)),
                "detail": detail,
            }
        )

    def to_jsonl(self) -> str:
        lines = [json.dumps(e, ensure_ascii=False, sort_keys=True) for e in self.events]
        return "\n".join(lines) + ("\n" if lines else "")


@dataclass(frozen=True)
class DatasetManifest:
    total: int
    counts: dict
    rejected_by_rule: dict
    run_id: str
    config_digest: str


def derive_entry_seed(global_seed: int, image_id: int | str, sample_type: str) -> int:
    """Stable per-entry seed: independent of dict order and platform hashing."""
    key = f"{global_seed}:{image_id}:{sample_type}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


def sample_id_for(image_id: int, sample_type: str, rng_seed: int) -> str:
    key = f"{image_id}:{sample_type}:{rng_seed}".encode("utf-8")
    return hashlib.sha256(key).hexdigest()[:16]


def counts_from_fractions(total: int, fractions: dict | None = None) -> dict:
    """Turn a fractional mix into integer counts summing exactly to total.

    Uses largest-remainder rounding so nothing is lost or double counted.
    """
    fractions = fractions or DEFAULT_MIX_FRACTIONS
    if total < 0:
        raise ValueError("total must be non-negative")
    unknown = set(fractions) - set(SAMPLE_TYPES)
    if unknown:
        raise ValueError(f"unknown sample types in mix: {sorted(unknown)}")
    weight = sum(fractions.values())
    if weight <= 0:
        raise ValueError("mix fractions must sum to a positive value")
    shares = {t: total * fractions.get(t, 0.0) / weight for t in SAMPLE_TYPES}
    counts = {t: int(shares[t]) for t in SAMPLE_TYPES}
    leftover = total - sum(counts.values())
    by_remainder = sorted(SAMPLE_TYPES, key=lambda t: (counts[t] - shares[t], t))
    for t in by_remainder[:leftover]:
        counts[t] += 1
    return counts


def plan_generation(
    records: Sequence[ImageRecord], counts: dict, global_seed: int = 0
) -> GenerationPlan:
    """Assign images to sample types.

    Within a type every image is used at most once; across types images may
    repeat.  Selection is a seeded sample over image ids sorted ascending, so
    the plan does not depend on input ordering.
    """
    unknown = set(counts) - set(SAMPLE_TYPES)
    if unknown:
        raise ValueError(f"unknown sample types in counts: {sorted(unknown)}")
    image_ids = sorted({r.image_id for r in records})
    entries = []
    for sample_type in SAMPLE_TYPES:
        need = int(counts.get(sample_type, 0))
        if need < 0:
            raise ValueError(f"count for {sample_type} must be non-negative")
        if need > len(image_ids):
            raise InsufficientImages(need, len(image_ids), where=f"type {sample_type!r}")
        rng = random.Random(derive_entry_seed(global_seed, "select", sample_type))
        for image_id in rng.sample(image_ids, need):
            entries.append(
                PlanEntry(
                    image_id=image_id,
                    sample_type=sample_type,
                    rng_seed=derive_entry_seed(global_seed, image_id, sample_type),
                )
            )
    entries.sort(key=lambda e: (e.image_id, e.sample_type))
    return GenerationPlan(
        entries=tuple(entries),
        target_counts={t: int(counts.get(t, 0)) for t in SAMPLE_TYPES},
        global_seed=global_seed,
    )


def build_entry_request(
    entry: PlanEntry,
    record: ImageRecord,
    seeds: SeedSet,
    settings: GenerationSettings,
) -> tuple[PromptBundle, ChatRequest]:
    """Construct the exact prompt and request one plan entry produces."""
    ctx = serialize_context(record, settings.serialization)
    bundle = build_prompt(
        entry.sample_type,
        ctx,
        seeds.for_type(entry.sample_type),
        rng_seed=entry.rng_seed,
        max_seeds=settings.max_seeds,
    )
    request = ChatRequest(
        model_name=settings.model_name,
        messages=bundle.messages,
        temperature=settings.temperature,
        max_tokens=settings.max_tokens,
        request_tag=f"gen:{entry.image_id}:{entry.sample_type}",
    )
    return bundle, request


def _assemble_turns(bundle: PromptBundle, parsed: StructuredResponse) -> tuple[Turn, ...]:
    if parsed.sample_type == "detail":
        assert bundle.chosen_instruction is not None
        turns = [Turn(HUMAN, bundle.chosen_instruction), parsed.turns[-1]]
    else:
        turns = list(parsed.turns)
    first = turns[0]
    turns[0] = Turn(first.speaker, f"{IMAGE_TOKEN}\n{first.text}")
    return tuple(turns)


def _derive_run_id(global_seed: int, config_digest: str) -> str:
    key = f"{config_digest}:{global_seed}".encode("utf-8")
    return hashlib.sha256(key).hexdigest()[:12]


def run_generation(
    plan: GenerationPlan,
    records: Sequence[ImageRecord],
    seeds: SeedSet,
    gateway: Gateway,
    settings: GenerationSettings | None = None,
) -> tuple[list[InstructionSample], RunReport]:
    """Execute a plan against the gateway and gate every response.

    Per-entry failures are recorded and skipped; only credential problems
    abort the run.  Output samples are sorted by (image id, type) no matter
    how the worker pool interleaves.
    """
    settings = settings or GenerationSettings()
    run_id = settings.run_id or _derive_run_id(plan.global_seed, settings.config_digest)
    by_id = {r.image_id: r for r in records}
    missing = [e.image_id for e in plan.entries if e.image_id not in by_id]
    if missing:
        raise InsufficientImages(len(plan.entries), len(by_id), where="run")

    report = RunReport(run_id=run_id)

    def produce(entry: PlanEntry):
        record = by_id[entry.image_id]
        bundle, request = build_entry_request(entry, record, seeds, settings)
        response = gateway.complete(request)

        def parse_and_gate(text):
            parsed = parse_response(text, entry.sample_type)
            return parsed, quality_gate(parsed, settings.quality)

        try:
            parsed, gate = parse_and_gate(response.text)
        except StructureViolation as exc:
            parsed, gate, structure_error = None, None, exc
        else:
            structure_error = None

        if settings.retry_rejected and (structure_error or not gate.accepted):
            response = gateway.complete(request, use_cache=False)
            try:
                parsed, gate = parse_and_gate(response.text)
                structure_error = None
            except StructureViolation as exc:
                parsed, gate, structure_error = None, None, exc

        if structure_error is not None:
            return ("rejected", entry, ["structure"], str(structure_error))
        if not gate.accepted:
            rules = [v.rule_id for v in gate.violations]
            detail = "; ".join(v.detail for v in gate.violations)
            return ("rejected", entry, rules, detail)

        sample = InstructionSample(
            sample_id=sample_id_for(entry.image_id, entry.sample_type, entry.rng_seed),
            image_file=record.file_name,
            sample_type=entry.sample_type,
            turns=_assemble_turns(bundle, parsed),
            provenance=Provenance(
                model_name=settings.model_name,
                prompt_digest=request_digest(request),
                run_id=run_id,
            ),
        )
        return ("accepted", entry, sample, "")

    def worker(entry: PlanEntry):
        try:
            return produce(entry)
        except ContentFilterRefusal as exc:
            return ("refused", entry, [], str(exc))
        except AuthError:
            raise
        except GatewayError as exc:
            return ("failed", entry, [], str(exc))

    samples = []
    max_workers = max(1, gateway.config.max_in_flight)
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        outcomes = list(pool.map(worker, plan.entries))

    for outcome in sorted(outcomes, key=lambda o: (o[1].image_id, o[1].sample_type)):
        status, entry, payload, detail = outcome
        if status == "accepted":
            report.accepted += 1
            samples.append(payload)
        elif status == "rejected":
            report.record_rejection(entry.image_id, entry.sample_type, payload, detail)
        else:
            setattr(report, status, getattr(report, status) + 1)
            report.events.append(
                {
                    "image_id": entry.image_id,
                    "type": entry.sample_type,
                    "status": status,
                    "rules": [],
                    "detail": detail,
                }
            )
            logger.warning("%s: image %s (%s): %s", status, entry.image_id, entry.sample_type, detail)

    return samples, report


def sample_to_record(sample: InstructionSample) -> dict:
    return {
        "id": sample.sample_id,
        "image": sample.image_file,
        "conversations": [
            {"from": turn.speaker, "value": turn.text} for turn in sample.turns
        ],
    }


def validate_manifest(manifest: DatasetManifest) -> None:
    unknown = set(manifest.counts) - set(SAMPLE_TYPES)
    if unknown:
        raise SchemaViolation("counts", f"unknown sample types {sorted(unknown)}")
    subtotal = sum(manifest.counts.values())
    if subtotal != manifest.total:
        raise SchemaViolation(
            "total",
            f"manifest total {manifest.total} != sum of per-type counts {subtotal}",
        )


def manifest_path_for(dataset_path: str | Path) -> Path:
    dataset_path = Path(dataset_path)
    return dataset_path.with_name(dataset_path.stem + ".manifest.json")


def write_dataset(
    samples: Sequence[InstructionSample],
    path: str | Path,
    report: RunReport | None = None,
    run_id: str = "",
    config_digest: str = "",
) -> DatasetManifest:
    """Write samples as one JSON array plus a manifest file alongside.

    Output is deterministic for a given sample list: fixed key order, fixed
    indentation, trailing newline.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [sample_to_record(s) for s in samples]
    path.write_text(
        json.dumps(records, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )

    counts = {t: 0 for t in SAMPLE_TYPES}
    for sample in samples:
        counts[sample.sample_type] += 1
    manifest = DatasetManifest(
        total=len(samples),
        counts=counts,
        rejected_by_rule=dict(report.rejected_by_rule) if report else {},
        run_id=run_id or (report.run_id if report else ""),
        config_digest=config_digest,
    )
    validate_manifest(manifest)
    manifest_doc = {
        "total": manifest.total,
        "counts": manifest.counts,
        "rejected_by_rule": manifest.rejected_by_rule,
        "run_id": manifest.run_id,
        "config_digest": manifest.config_digest,
    }
    manifest_path_for(path).write_text(
        json.dumps(manifest_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest


def load_manifest(path: str | Path) -> DatasetManifest:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    for fld in ("total", "counts", "rejected_by_rule", "run_id", "config_digest"):
        if fld not in doc:
            raise SchemaViolation(fld, f"missing from manifest {path}")
    manifest = DatasetManifest(
        total=int(doc["total"]),
        counts={k: int(v) for k, v in doc["counts"].items()},
        rejected_by_rule=dict(doc["rejected_by_rule"]),
        run_id=str(doc["run_id"]),
        config_digest=str(doc["config_digest"]),
    )
    validate_manifest(manifest)
    return manifest


def read_dataset(path: str | Path) -> list[dict]:
    """Read a dataset file back, validating the record layout."""
    path = Path(path)
    if not path.exists():
        raise SchemaViolation("dataset", f"file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation("dataset", f"{path}: {exc.msg} at offset {exc.pos}") from exc
    if not isinstance(doc, list):
        raise SchemaViolation("dataset", "top level must be a JSON array")
    for i, record in enumerate(doc):
        for fld in ("id", "image", "conversations"):
            if fld not in record:
                raise SchemaViolation(fld, f"missing from sample {i}")
        convs = record["conversations"]
        if not isinstance(convs, list) or not convs:
            raise SchemaViolation("conversations", f"sample {i} has no turns")
        for j, turn in enumerate(convs):
            if turn.get("from") not in (HUMAN, GPT):
                raise SchemaViolation(
                    "from", f"sample {i} turn {j} has speaker {turn.get('from')!r}"
                )
            if "value" not in turn:
                raise SchemaViolation("value", f"sample {i} turn {j} has no text")
        if convs[0]["from"] != HUMAN or not convs[0]["value"].startswith(IMAGE_TOKEN + "\n"):
            raise SchemaViolation(
                "conversations",
                f"sample {i} must open with a human turn starting with {IMAGE_TOKEN!r}",
            )
    return doc
