"""Command-line front end.

Subcommands mirror the pipeline stages: ingest annotations, generate a
dataset, validate an existing dataset, build/score a benchmark, and report
dataset statistics.  Exit codes: 0 success, 1 validation findings, 2 usage or
config or schema problems, 3 backend/auth failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench import (
    EvalSettings,
    aggregate_scores,
    build_benchmark,
    collect_candidate_answers,
    generate_reference_answers,
    improvement_percent,
    judge_benchmark,
    load_answer_set,
    load_benchmark,
    load_judge_results,
    render_score_report,
    save_answer_set,
    save_benchmark,
    save_judge_results,
    score_table_to_dict,
)
from .config import CliConfig, config_digest, load_config, validate_config
from .context import SerializationPolicy
from .errors import (
    AuthError,
    ConfigError,
    GatewayError,
    KpinstructError,
    SchemaViolation,
)
from .gateway import Gateway, GatewayConfig, HttpBackend, MockBackend, RetryPolicy
from .ingest import (
    filter_person_images,
    join_image_records,
    load_annotation_bundle,
    record_to_dict,
)
from .pipeline import (
    GenerationSettings,
    counts_from_fractions,
    manifest_path_for,
    load_manifest,
    plan_generation,
    read_dataset,
    run_generation,
    write_dataset,
)
from .prompts import (
    DETAIL_INSTRUCTIONS,
    SAMPLE_TYPES,
    load_default_seeds,
    load_seed_examples,
)
from .qa import GPT, HUMAN, QualityPolicy, StructuredResponse, Turn, quality_gate
from .pipeline import IMAGE_TOKEN

logger = logging.getLogger(__name__)


def _parse_counts(text: str) -> dict:
    counts = {}
    for part in text.split(","):
        if "=" not in part:
            raise ConfigError(f"counts must look like type=N, got {part!r}")
        name, _, value = part.partition("=")
        name = name.strip()
        if name not in SAMPLE_TYPES:
            raise ConfigError(f"unknown sample type {name!r} in --counts")
        try:
            counts[name] = int(value)
        except ValueError as exc:
            raise ConfigError(f"bad count for {name!r}: {value!r}") from exc
    return counts


def _load_mock_fixture(path: str | None) -> tuple[dict, dict]:
    if not path:
        return {}, {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "digests" in doc or "tags" in doc:
        return dict(doc.get("digests", {})), dict(doc.get("tags", {}))
    return dict(doc), {}


def make_gateway(config: CliConfig) -> Gateway:
    gw = config.gateway
    if gw.backend == "mock":
        digests, tags = _load_mock_fixture(gw.mock_fixture)
        backend = MockBackend(fixture=digests, tag_fixture=tags, default=gw.mock_mode)
    else:
        backend = HttpBackend(gw.endpoint, api_key_env=gw.api_key_env, timeout=gw.timeout)
    return Gateway(
        backend,
        GatewayConfig(
            max_in_flight=gw.max_in_flight,
            requests_per_minute=gw.requests_per_minute,
            retry=RetryPolicy(
                max_attempts=gw.max_attempts,
                base_backoff=gw.base_backoff,
                jitter=gw.jitter,
            ),
            cache_dir=config.cache_dir,
        ),
    )


def _annotation_paths(args, config: CliConfig) -> tuple[str, str, str]:
    if getattr(args, "captions", None):
        config.annotations.captions = args.captions
    if getattr(args, "keypoints", None):
        config.annotations.keypoints = args.keypoints
    if getattr(args, "instances", None):
        config.annotations.instances = args.instances
    return config.annotations.require()


def _seed(args, config: CliConfig) -> int:
    return args.seed if args.seed is not None else config.global_seed


def _load_seed_set(config: CliConfig):
    if config.seed_file:
        return load_seed_examples(config.seed_file)
    return load_default_seeds()


def _eval_settings(config: CliConfig) -> EvalSettings:
    gw = config.gateway
    return EvalSettings(
        model_name=gw.model, temperature=gw.temperature_judging, max_tokens=gw.max_tokens
    )


# --- subcommand handlers -------------------------------------------------------


def cmd_ingest(args, config: CliConfig) -> int:
    captions, keypoints, instances = _annotation_paths(args, config)
    bundle = load_annotation_bundle(captions, keypoints, instances)
    records = join_image_records(bundle)
    summary = {
        "images": len(records),
        "captions": sum(len(r.captions) for r in records),
        "persons": sum(len(r.persons) for r in records),
        "objects": sum(len(r.objects) for r in records),
    }
    if args.json:
        payload = dict(summary)
        if args.dump:
            payload["records"] = [record_to_dict(r) for r in records]
        print(json.dumps(payload, indent=2))
    else:
        print(
            "{images} images, {captions} captions, {persons} persons, "
            "{objects} objects".format(**summary)
        )
    return 0


def _resolve_counts(args, config: CliConfig) -> dict:
    gen = config.generation
    if getattr(args, "counts", None):
        return _parse_counts(args.counts)
    if getattr(args, "total", None):
        return counts_from_fractions(int(args.total), gen.fractions)
    if gen.counts is not None:
        return dict(gen.counts)
    if gen.total is not None:
        return counts_from_fractions(int(gen.total), gen.fractions)
    raise ConfigError("no sample counts: set --counts, --total, or generation.counts")


def cmd_generate(args, config: CliConfig) -> int:
    captions, keypoints, instances = _annotation_paths(args, config)
    gen = config.generation
    records = filter_person_images(
        join_image_records(load_annotation_bundle(captions, keypoints, instances)),
        gen.min_visible_keypoints,
    )
    counts = _resolve_counts(args, config)
    seed = _seed(args, config)
    plan = plan_generation(records, counts, seed)

    gateway = make_gateway(config)
    settings = GenerationSettings(
        model_name=config.gateway.model,
        temperature=config.gateway.temperature_generation,
        max_tokens=config.gateway.max_tokens,
        max_seeds=gen.max_seeds,
        serialization=SerializationPolicy(
            caption_cap=gen.caption_cap,
            min_visible_keypoints=gen.context_min_visible_keypoints,
        ),
        quality=QualityPolicy(
            min_answer_chars=dict(gen.min_answer_chars),
            check_meta_references=gen.check_meta_references,
            enabled=gen.gate_enabled,
        ),
        retry_rejected=gen.retry_rejected,
        config_digest=config_digest(config),
    )
    samples, report = run_generation(plan, records, _load_seed_set(config), gateway, settings)

    out_dir = Path(args.output_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset_path = out_dir / (args.out or "dataset.json")
    manifest = write_dataset(
        samples, dataset_path, report=report, config_digest=settings.config_digest
    )
    report_path = out_dir / "run_report.jsonl"
    report_path.write_text(report.to_jsonl(), encoding="utf-8")

    if args.json:
        print(
            json.dumps(
                {
                    "dataset": str(dataset_path),
                    "manifest": str(manifest_path_for(dataset_path)),
                    "report": str(report_path),
                    "total": manifest.total,
                    "counts": manifest.counts,
                    "accepted": report.accepted,
                    "rejected": report.rejected,
                    "refused": report.refused,
                    "failed": report.failed,
                },
                indent=2,
            )
        )
    else:
        print(
            f"wrote {manifest.total} samples to {dataset_path} "
            f"(accepted {report.accepted}, rejected {report.rejected}, "
            f"refused {report.refused}, failed {report.failed})"
        )
    return 0


def _infer_sample_type(turns: list[Turn]) -> str:
    first = turns[0].text
    if first in DETAIL_INSTRUCTIONS:
        return "detail"
    return "conversation"


def cmd_validate(args, config: CliConfig) -> int:
    records = read_dataset(args.dataset)
    if not records:
        raise SchemaViolation("dataset", f"{args.dataset} contains no samples")

    gen = config.generation
    policy = QualityPolicy(
        min_answer_chars=dict(gen.min_answer_chars),
        check_meta_references=gen.check_meta_references,
    )
    findings = []
    for record in records:
        turns = []
        for j, turn in enumerate(record["conversations"]):
            text = turn["value"]
            if j == 0:
                text = text[len(IMAGE_TOKEN) + 1 :]
            turns.append(Turn(turn["from"], text))
        for j, turn in enumerate(turns):
            expected = HUMAN if j % 2 == 0 else GPT
            if turn.speaker != expected:
                findings.append(
                    {
                        "id": record["id"],
                        "rule": "structure",
                        "detail": f"turn {j} speaker {turn.speaker!r}, expected {expected!r}",
                    }
                )
        resp = StructuredResponse(
            sample_type=_infer_sample_type(turns), turns=tuple(turns)
        )
        gate = quality_gate(resp, policy)
        for violation in gate.violations:
            findings.append(
                {"id": record["id"], "rule": violation.rule_id, "detail": violation.detail}
            )

    if args.json:
        print(json.dumps({"samples": len(records), "findings": findings}, indent=2))
    else:
        for finding in findings:
            print(f"{finding['id']}: {finding['rule']}: {finding['detail']}")
        print(f"checked {len(records)} samples, {len(findings)} violation(s)")
    return 1 if findings else 0


def cmd_stats(args, config: CliConfig) -> int:
    records = read_dataset(args.dataset)

    manifest_path = Path(args.manifest) if args.manifest else manifest_path_for(args.dataset)
    manifest_info = None
    if manifest_path.exists():
        manifest = load_manifest(manifest_path)
        manifest_info = {"total": manifest.total, "counts": manifest.counts}

    turn_counts: dict = {}
    length_histogram: dict = {}
    for record in records:
        n_turns = len(record["conversations"])
        turn_counts[n_turns] = turn_counts.get(n_turns, 0) + 1
        for turn in record["conversations"]:
            if turn["from"] != GPT:
                continue
            length = len(turn["value"])
            if length >= 1000:
                bucket = "1000+"
            else:
                bucket = f"{length // 100 * 100}-{length // 100 * 100 + 99}"
            length_histogram[bucket] = length_histogram.get(bucket, 0) + 1

    stats = {
        "samples": len(records),
        "turns_per_sample": {str(k): v for k, v in sorted(turn_counts.items())},
        "gpt_chars_histogram": dict(sorted(length_histogram.items())),
    }
    if manifest_info:
        stats["manifest"] = manifest_info

    paths = config.annotations
    if paths.captions and paths.keypoints and paths.instances:
        try:
            bundle = load_annotation_bundle(paths.captions, paths.keypoints, paths.instances)
        except KpinstructError:
            bundle = None
        if bundle is not None:
            visibility = {0: 0, 1: 0, 2: 0}
            for person in bundle.person_annotations:
                for i in range(2, len(person.keypoints), 3):
                    visibility[int(person.keypoints[i])] += 1
            stats["keypoint_visibility"] = {str(k): v for k, v in visibility.items()}

    if args.json:
        print(json.dumps(stats, indent=2))
    else:
        print(f"samples: {stats['samples']}")
        if manifest_info:
            print(f"manifest total: {manifest_info['total']}")
            for sample_type in SAMPLE_TYPES:
                print(f"  {sample_type}: {manifest_info['counts'].get(sample_type, 0)}")
        print(f"turns per sample: {stats['turns_per_sample']}")
        print(f"gpt answer length histogram: {stats['gpt_chars_histogram']}")
        if "keypoint_visibility" in stats:
            print(f"keypoint visibility: {stats['keypoint_visibility']}")
    return 0


def cmd_bench_build(args, config: CliConfig) -> int:
    captions, keypoints, instances = _annotation_paths(args, config)
    records = filter_person_images(
        join_image_records(load_annotation_bundle(captions, keypoints, instances)),
        config.eval.min_visible_keypoints,
    )
    questions = None
    questions_file = args.questions or config.eval.questions_file
    if questions_file:
        questions = json.loads(Path(questions_file).read_text(encoding="utf-8"))
    gateway = None if questions else make_gateway(config)
    bench = build_benchmark(
        records,
        args.n_images or config.eval.n_images,
        rng_seed=_seed(args, config),
        gateway=gateway,
        questions=questions,
        settings=_eval_settings(config),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_benchmark(bench, out)
    if args.json:
        print(json.dumps({"benchmark": str(out), "items": len(bench.items)}, indent=2))
    else:
        print(f"wrote benchmark with {len(bench.items)} items to {out}")
    return 0


def cmd_bench_refs(args, config: CliConfig) -> int:
    bench = load_benchmark(args.benchmark)
    answers = generate_reference_answers(bench, make_gateway(config), _eval_settings(config))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_answer_set(answers, out)
    if args.json:
        print(
            json.dumps(
                {"refs": str(out), "answers": len(answers.answers), "gaps": list(answers.gaps)},
                indent=2,
            )
        )
    else:
        print(f"wrote {len(answers.answers)} reference answers to {out}")
        if answers.gaps:
            print(f"gaps ({len(answers.gaps)}): {', '.join(answers.gaps)}")
    return 0


def cmd_bench_judge(args, config: CliConfig) -> int:
    bench = load_benchmark(args.benchmark)
    references = load_answer_set(args.refs)
    candidates = collect_candidate_answers(
        bench, answers_file=args.answers, endpoint=args.endpoint
    )
    results, unjudged = judge_benchmark(
        bench,
        references,
        candidates,
        make_gateway(config),
        rng_seed=_seed(args, config),
        settings=_eval_settings(config),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_judge_results(results, unjudged, out)
    if args.json:
        print(
            json.dumps(
                {"results": str(out), "judged": len(results), "unjudged": unjudged},
                indent=2,
            )
        )
    else:
        print(f"judged {len(results)} items, {len(unjudged)} unjudged; wrote {out}")
    return 0


def cmd_bench_report(args, config: CliConfig) -> int:
    results, unjudged = load_judge_results(args.results)
    table = aggregate_scores(results, unjudged)
    tables = [(args.label, table)]
    improvement = None
    if args.baseline_results:
        baseline_results, baseline_unjudged = load_judge_results(args.baseline_results)
        baseline_table = aggregate_scores(baseline_results, baseline_unjudged)
        tables.append((args.baseline_label, baseline_table))
        improvement = improvement_percent(table.overall, baseline_table.overall)

    if args.json:
        payload = {label: score_table_to_dict(t) for label, t in tables}
        if improvement is not None:
            payload["improvement_percent"] = round(improvement, 2)
        text = json.dumps(payload, indent=2)
    else:
        text = render_score_report(tables)
        if improvement is not None:
            text += f"\nImprovement over {args.baseline_label}: {improvement:.2f}%\n"
    print(text, end="" if text.endswith("\n") else "\n")
    if args.out:
        Path(args.out).write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
    return 0


# --- parser --------------------------------------------------------------------


def _add_annotation_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--captions", help="captions annotation JSON")
    parser.add_argument("--keypoints", help="person keypoints annotation JSON")
    parser.add_argument("--instances", help="object instances annotation JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kpinstruct",
        description="Generate and evaluate pose-aware visual instruction data.",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    parser.add_argument("--seed", type=int, help="override the global random seed")
    parser.add_argument("--cache-dir", help="response cache directory")
    parser.add_argument("--output-dir", help="directory for generated artifacts")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="load annotations and print a summary")
    _add_annotation_flags(p_ingest)
    p_ingest.add_argument("--dump", action="store_true", help="include records in --json output")
    p_ingest.set_defaults(handler=cmd_ingest)

    p_gen = sub.add_parser("generate", help="run the data generation pipeline")
    _add_annotation_flags(p_gen)
    p_gen.add_argument("--counts", help="per-type counts, e.g. conversation=4,detail=3,complex=3")
    p_gen.add_argument("--total", type=int, help="total samples, split via mix fractions")
    p_gen.add_argument("--out", help="dataset file name (default dataset.json)")
    p_gen.set_defaults(handler=cmd_generate)

    p_val = sub.add_parser("validate", help="re-run response gates over a dataset")
    p_val.add_argument("dataset", help="dataset JSON file")
    p_val.set_defaults(handler=cmd_validate)

    p_stats = sub.add_parser("stats", help="dataset distribution report")
    p_stats.add_argument("dataset", help="dataset JSON file")
    p_stats.add_argument("--manifest", help="manifest path (default: alongside dataset)")
    p_stats.set_defaults(handler=cmd_stats)

    p_bench = sub.add_parser("bench", help="benchmark workflows")
    bench_sub = p_bench.add_subparsers(dest="bench_command", required=True)

    p_build = bench_sub.add_parser("build", help="sample images and draft questions")
    _add_annotation_flags(p_build)
    p_build.add_argument("--n-images", type=int, help="number of images to sample")
    p_build.add_argument("--questions", help="question file for conversation/complex")
    p_build.add_argument("--out", default="benchmark.json")
    p_build.set_defaults(handler=cmd_bench_build)

    p_refs = bench_sub.add_parser("refs", help="generate reference answers")
    p_refs.add_argument("--benchmark", required=True)
    p_refs.add_argument("--out", default="references.json")
    p_refs.set_defaults(handler=cmd_bench_refs)

    p_judge = bench_sub.add_parser("judge", help="judge candidate answers")
    p_judge.add_argument("--benchmark", required=True)
    p_judge.add_argument("--refs", required=True)
    p_judge.add_argument("--answers", help="candidate answers JSON file")
    p_judge.add_argument("--endpoint", help="candidate answer HTTP endpoint")
    p_judge.add_argument("--out", default="judge_results.json")
    p_judge.set_defaults(handler=cmd_bench_judge)

    p_report = bench_sub.add_parser("report", help="render scores as a table")
    p_report.add_argument("--results", required=True)
    p_report.add_argument("--label", default="candidate")
    p_report.add_argument("--baseline-results")
    p_report.add_argument("--baseline-label", default="baseline")
    p_report.add_argument("--out", help="also write the report to this file")
    p_report.set_defaults(handler=cmd_bench_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config)
        if args.cache_dir:
            config.cache_dir = args.cache_dir
        if args.seed is not None:
            config.global_seed = args.seed
        validate_config(config)
        return args.handler(args, config)
    except AuthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except GatewayError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except KpinstructError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
