"""Command-line entry point.

Exit codes: 0 success, 1 internal error, 2 bad input (missing file, schema
or config error, malformed answer). Errors are written to standard error as
one JSON object per line: ``{"error": kind, "message": ..., "path": ...}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from avground import __version__
from avground.config import AppConfig, ConfigError, load_config
from avground.embeddings import DimensionMismatch, EmbeddingFormatError, OutOfVocabulary, ZeroVector
from avground.grammar import FormatError, StructuredAnswer, TaskKind, parse_answer, parse_caption_analysis
from avground.grpo import ToyPolicy, demo_env, train_toy
from avground.metrics import DuplicateQaId, EmptyDenominator, UnknownQaId, aggregate, pair_predictions, score_one
from avground.pipeline import (
    PUBLISHED_SPLIT_COUNTS,
    InvalidScore,
    NoEligibleObjects,
    NonPositiveDuration,
    QaRecord,
    filter_manifest,
    filter_summary,
    generate_qas,
    load_box_sidecar,
    load_manifest,
    load_ratings,
    qc_aggregate,
    split_report,
)
from avground.records import SchemaError, iter_jsonl, load_ground_truth, load_predictions, write_jsonl
from avground.rewards import RewardBreakdown, score_sample

INPUT_ERRORS = (
    ConfigError,
    DimensionMismatch,
    DuplicateQaId,
    EmbeddingFormatError,
    EmptyDenominator,
    FormatError,
    InvalidScore,
    NonPositiveDuration,
    SchemaError,
    UnknownQaId,
    ZeroVector,
)


class InputError(Exception):
    """Bad command-line input that is not tied to a specific library error."""


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def _write_text(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _read_text(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    return Path(path).read_text(encoding="utf-8")


def _report_error(kind: str, message: str, path: str | None = None) -> None:
    payload = {"error": kind, "message": message}
    if path is not None:
        payload["path"] = path
    sys.stderr.write(json.dumps(payload) + "\n")


def _warn(message: str) -> None:
    sys.stderr.write(json.dumps({"warning": message}) + "\n")


def _reward_config(args, config: AppConfig, mode: str):
    rewards = config.rewards
    if args.tau is not None:
        rewards.tau = args.tau
    if args.tolerance is not None:
        rewards.tolerance = args.tolerance
    if args.embeddings is not None:
        rewards.embeddings = Path(args.embeddings)
    if args.fallback is not None:
        rewards.fallback = args.fallback
    return config.reward_config(mode)


def _select_task(gts, task: str | None):
    if task is None:
        return gts
    kind = TaskKind.parse(task)
    return [g for g in gts if g.task_kind is kind]


def _answer_to_dict(answer: StructuredAnswer) -> dict:
    return {
        "task": answer.task_kind.value,
        "when": answer.interval.to_list() if answer.interval else None,
        "objects": [
            {"name": t.name, "where": {repr(float(ts)): box.to_list() for ts, box in t.boxes.items()}}
            for t in answer.tracks
        ],
    }


def cmd_parse(args, config: AppConfig) -> int:
    text = _read_text(args.input)
    if args.caption:
        analysis = parse_caption_analysis(text)
        out = {
            "subjects": [{"name": n, "label": lab.value} for n, lab in analysis.subjects],
            "subject_count": analysis.subject_count,
        }
    else:
        if args.task is None:
            raise InputError("parse needs --task unless --caption is given")
        out = _answer_to_dict(parse_answer(text, args.task))
    _write_text(args.out, _dumps(out))
    return 0


def _scored_pairs(args, config: AppConfig, mode: str):
    if args.jobs < 1:
        raise InputError("--jobs must be at least 1")
    gts = _select_task(load_ground_truth(args.gt), args.task)
    preds = load_predictions(args.pred)
    if args.task is not None:
        wanted = {g.qa_id for g in gts}
        preds = [p for p in preds if p[0] in wanted]
    pairs = pair_predictions(preds, gts)
    reward_config = _reward_config(args, config, mode)
    if reward_config.fallback == "error":
        # unknown gold names must fail up front rather than per sample
        table = reward_config.table
        for gt, _ in pairs:
            for name in gt.names:
                if table is None:
                    raise OutOfVocabulary(name)
                table.phrase_vector(name, reward_config.stopwords)
    return pairs, reward_config


def _parallel_map(fn, items, jobs: int):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def cmd_score(args, config: AppConfig) -> int:
    pairs, reward_config = _scored_pairs(args, config, "train")

    def one(pair):
        gt, text = pair
        return score_sample(text, gt, reward_config) if text is not None else RewardBreakdown()

    breakdowns = _parallel_map(one, pairs, args.jobs)
    rows = [{"qa_id": gt.qa_id, "task": gt.task_kind.value, **b.to_dict()} for (gt, _), b in zip(pairs, breakdowns)]
    summary = {"count": len(rows), "mean": {}, "by_task": {}}
    for key in ("format", "object", "temporal", "spatial", "total"):
        summary["mean"][key] = float(np.mean([r[key] for r in rows])) if rows else None
    for task in TaskKind:
        totals = [r["total"] for r in rows if r["task"] == task.value]
        if totals:
            summary["by_task"][task.value] = {"count": len(totals), "mean_total": float(np.mean(totals))}

    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    if args.out is None:
        sys.stdout.write(lines)
    else:
        Path(args.out).write_text(lines, encoding="utf-8")
    summary_text = _dumps(summary)
    if args.summary_out is not None:
        Path(args.summary_out).write_text(summary_text, encoding="utf-8")
    elif args.out is not None:
        sys.stdout.write(summary_text)
    return 0


def cmd_evaluate(args, config: AppConfig) -> int:
    pairs, reward_config = _scored_pairs(args, config, "eval")
    scores = _parallel_map(lambda pair: score_one(pair[1], pair[0], reward_config), pairs, args.jobs)
    report = aggregate(scores)
    if args.scores_out is not None:
        write_jsonl(args.scores_out, [s.to_dict() for s in scores])
    if args.json_out is not None:
        Path(args.json_out).write_text(report.to_json(), encoding="utf-8")
    sys.stdout.write(report.to_json() if args.json else report.to_table())
    return 0


def _filter_config(args, config: AppConfig):
    overrides = {
        key: getattr(args, key)
        for key in ("min_et_ratio", "max_events", "min_duration")
        if getattr(args, key) is not None
    }
    try:
        return replace(config.filter, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_filter(args, config: AppConfig) -> int:
    fconfig = _filter_config(args, config)
    records = load_manifest(args.manifest)
    kept, rejected = filter_manifest(records, fconfig)
    _write_text(args.out, _dumps([r.to_dict() for r in kept]))
    if args.rejects is not None:
        Path(args.rejects).write_text(_dumps([r.to_dict() for r in rejected]), encoding="utf-8")
    if args.out is not None:
        sys.stdout.write(_dumps(filter_summary(kept, rejected, fconfig)))
    return 0


def cmd_generate_qa(args, config: AppConfig) -> int:
    records = load_manifest(args.manifest)
    boxes = load_box_sidecar(args.boxes) if args.boxes else {}
    if args.qc_result is not None:
        try:
            kept_ids = set(json.loads(_read_text(args.qc_result))["kept"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise SchemaError(f"{args.qc_result}: expected a qc result with a 'kept' list ({exc})") from None
        records = [r for r in records if r.video_id in kept_ids]
    rows = []
    for record in records:
        try:
            qas = generate_qas(record, boxes.get(record.video_id))
        except NoEligibleObjects as exc:
            _warn(str(exc))
            continue
        rows.extend(qa.to_dict() for qa in qas)
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    _write_text(args.out, lines)
    return 0


def cmd_split_report(args, config: AppConfig) -> int:
    if args.published and args.declared:
        raise InputError("--published and --declared are mutually exclusive")
    if args.published:
        declared = PUBLISHED_SPLIT_COUNTS
    elif args.declared:
        try:
            declared = json.loads(_read_text(args.declared))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{args.declared}: invalid JSON ({exc.msg})") from None
    else:
        declared = {}
    qas = None
    if args.qas is not None:
        qas = [QaRecord.from_dict(obj, f"{args.qas}:{n}") for n, obj in iter_jsonl(args.qas)]
    report = split_report(qas, declared)
    _write_text(args.out, _dumps(report.to_dict()))
    if args.strict and not report.consistent:
        _report_error("inconsistent_split", "declared and observed counts disagree")
        return 2
    return 0


def cmd_qc(args, config: AppConfig) -> int:
    cutoff = args.cutoff if args.cutoff is not None else config.qc_cutoff
    result = qc_aggregate(load_ratings(args.ratings), cutoff)
    _write_text(args.out, _dumps({"cutoff": cutoff, **result.to_dict()}))
    return 0


def cmd_grpo_demo(args, config: AppConfig) -> int:
    overrides = {
        key: getattr(args, key)
        for key in ("group_size", "epsilon", "beta", "lr", "max_grad_norm")
        if getattr(args, key) is not None
    }
    try:
        gconfig = replace(config.grpo, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.steps < 0:
        raise InputError("--steps must be non-negative")
    env = demo_env()
    policy = ToyPolicy(np.zeros(env.n_actions))
    trace = train_toy(env, policy, gconfig, args.steps, args.seed)
    if args.trace_out is not None:
        write_jsonl(args.trace_out, trace.records)
    probs = policy.probs(trace.logits)
    summary = {
        "seed": args.seed,
        "steps": args.steps,
        "group_size": gconfig.group_size,
        "arm_rewards": env.rewards.tolist(),
        "final_probs": probs.tolist(),
        "argmax_arm": int(np.argmax(probs)),
        "best_arm": int(np.argmax(env.rewards)),
        "expected_reward_start": trace.expected_rewards[0],
        "expected_reward_end": trace.expected_rewards[-1],
    }
    sys.stdout.write(_dumps(summary))
    return 0


def _add_reward_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pred", required=True, help="predictions JSONL, one {qa_id, text} per line")
    p.add_argument("--gt", required=True, help="ground-truth JSONL, one record per line")
    p.add_argument("--task", choices=[t.value for t in TaskKind], help="only score records of this task")
    p.add_argument("--jobs", type=int, default=1, help="worker threads; output order is by qa_id regardless")
    p.add_argument("--tau", type=float, help="similarity threshold for an object match (default 0.5)")
    p.add_argument("--tolerance", type=float, help="max seconds between matched box timestamps (default 0.5)")
    p.add_argument("--embeddings", help="word2vec text file for object-name similarity")
    p.add_argument(
        "--fallback",
        choices=["error", "jaccard"],
        help="policy for names without an embedding (score: error, evaluate: jaccard)",
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with reward, grpo, filter and qc settings; flags override it")
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")

    parser = argparse.ArgumentParser(prog="avground", description="Audio-visual grounding rewards, metrics and data tools.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", parents=[common], help="parse a tagged answer or a caption analysis")
    p.add_argument("--task", choices=[t.value for t in TaskKind], help="task whose tag set the answer must carry")
    p.add_argument("--input", default="-", help="text file to parse, '-' for stdin (default)")
    p.add_argument("--caption", action="store_true", help="parse a caption analysis instead of an answer")
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("score", parents=[common], help="per-sample reward breakdowns")
    _add_reward_flags(p)
    p.add_argument("--out", help="per-sample JSONL path (default stdout); the summary then goes to stdout")
    p.add_argument("--summary-out", help="write the summary JSON here")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", parents=[common], help="metrics report over a prediction file")
    _add_reward_flags(p)
    p.add_argument("--json", action="store_true", help="print the report as JSON instead of a table")
    p.add_argument("--json-out", help="also write the JSON report to this path")
    p.add_argument("--scores-out", help="write per-sample tIoU/vIoU/object hits as JSONL")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("filter", parents=[common], help="apply duration, event-count and ET-ratio gates")
    p.add_argument("--manifest", required=True, help="JSON array of video records")
    p.add_argument("--out", help="kept records as JSON (default stdout)")
    p.add_argument("--rejects", help="write rejected video ids with reasons here")
    p.add_argument("--min-et-ratio", type=float, help="minimum event-to-total duration ratio (default 0.08)")
    p.add_argument("--max-events", type=int, help="maximum events per video after merging (default 3)")
    p.add_argument("--min-duration", type=float, help="shortest accepted clip in seconds (default 2)")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("generate-qa", parents=[common], help="expand kept videos into template questions")
    p.add_argument("--manifest", required=True, help="JSON array of kept video records")
    p.add_argument("--out", help="QA JSONL path (default stdout)")
    p.add_argument("--boxes", help="box sidecar JSON: [{video_id, frames: {t: {object: box}}}]")
    p.add_argument("--qc-result", help="qc output JSON; only its kept videos are expanded")
    p.set_defaults(func=cmd_generate_qa)

    p = sub.add_parser("split-report", parents=[common], help="tally QAs per split and task against declared counts")
    p.add_argument("--qas", help="QA JSONL; without it only the declared arithmetic is checked")
    p.add_argument("--declared", help="JSON of declared counts: {split: {task: n, total: n}, total: n}")
    p.add_argument("--published", action="store_true", help="use the released dataset's per-split counts")
    p.add_argument("--out", help="write the report JSON here instead of stdout")
    p.add_argument("--strict", action="store_true", help="exit 2 when the report is inconsistent")
    p.set_defaults(func=cmd_split_report)

    p = sub.add_parser("qc", parents=[common], help="aggregate two-rater quality scores")
    p.add_argument("--ratings", required=True, help="CSV with columns video_id, rater_a, rater_b (1-4)")
    p.add_argument("--cutoff", type=float, help="minimum mean score to keep a video (default 2.5)")
    p.add_argument("--out", help="write the result JSON here instead of stdout")
    p.set_defaults(func=cmd_qc)

    p = sub.add_parser("grpo-demo", parents=[common], help="train a softmax policy on the four-answer bandit")
    p.add_argument("--steps", type=int, default=500, help="number of updates (default 500)")
    p.add_argument("--group-size", type=int, help="responses sampled per step (default 6)")
    p.add_argument("--epsilon", type=float, help="ratio clip range (default 0.2)")
    p.add_argument("--beta", type=float, help="KL penalty weight (default 0.04)")
    p.add_argument("--lr", type=float, help="step size (default 0.1)")
    p.add_argument("--max-grad-norm", type=float, help="gradient norm clip (default 1.0)")
    p.add_argument("--trace-out", help="JSONL of {step, mean_reward, objective, kl} per step")
    p.set_defaults(func=cmd_grpo_demo)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = load_config(args.config)
        return args.func(args, config)
    except FileNotFoundError as exc:
        _report_error("file_not_found", f"no such file: {exc.filename}", str(exc.filename))
        return 2
    except IsADirectoryError as exc:
        _report_error("file_not_found", f"expected a file, got a directory: {exc.filename}", str(exc.filename))
        return 2
    except OutOfVocabulary as exc:
        _report_error(
            "out_of_vocabulary",
            f"no embedding for gold name {exc.name!r}; pass --embeddings or --fallback jaccard",
        )
        return 2
    except FormatError as exc:
        _report_error(f"format:{exc.kind}", str(exc))
        return 2
    except (InputError, *INPUT_ERRORS) as exc:
        _report_error(type(exc).__name__, str(exc))
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        _report_error("internal", f"{type(exc).__name__}: {exc}")
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
