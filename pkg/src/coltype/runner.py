"""Orchestrate annotation strategies over a corpus split and persist runs."""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from .corpus import Corpus
from .errors import ColtypeError, GatewayError, ResponseParseError, RunFormatError
from .ledger import UsageEntry
from .prompts import (
    ColumnPrediction,
    PromptVariant,
    build_annotation_prompt,
    format_gold_answer,
    parse_annotation_response,
)
from .selector import HashedEmbedder, select_definitions, select_demonstrations
from .serialize import SerializationOptions, serialize_table

RUN_FORMAT_VERSION = 1


@dataclass
class Run:
    """One annotation pass: predictions, raw outputs, config, usage."""

    run_id: str
    split: str
    strategy: dict
    predictions: dict[str, list[ColumnPrediction]] = field(default_factory=dict)
    raw_responses: dict[str, str] = field(default_factory=dict)
    usage: list[UsageEntry] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)
    warnings: dict[str, list[str]] = field(default_factory=dict)
    started: str | None = None
    finished: str | None = None

    @property
    def partial(self) -> bool:
        return bool(self.failures)


def new_run_id() -> str:
    """Time-ordered unique id: nanosecond timestamp plus random suffix."""
    return f"{time.time_ns():016x}-{os.urandom(4).hex()}"


def _now(deterministic: bool) -> str | None:
    if deterministic:
        return None
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _variant_for_table(
    table,
    corpus: Corpus,
    variant: PromptVariant,
    *,
    embedder,
    few_shot_k: int,
    defs_topk: int | None,
    opts: SerializationOptions,
) -> PromptVariant:
    """Resolve per-table demonstrations and definition subsets."""
    resolved = variant
    if variant.strategy == "few_shot" and variant.demonstrations is None:
        chosen = select_demonstrations(table, corpus, k=few_shot_k, embedder=embedder, opts=opts)
        demos = [(corpus.by_id(tid), corpus.by_id(tid).gold) for tid in chosen]
        resolved = replace(resolved, demonstrations=demos)
    if variant.definitions and defs_topk is not None:
        subset = select_definitions(table, variant.definitions, k=defs_topk, embedder=embedder, opts=opts)
        resolved = replace(resolved, definitions=subset)
    return resolved


def annotate(
    corpus: Corpus,
    split: str,
    variant: PromptVariant,
    backend,
    *,
    opts: SerializationOptions = SerializationOptions(),
    embedder=None,
    few_shot_k: int = 5,
    defs_topk: int | None = None,
    temperature: float = 0.0,
    workers: int = 1,
    run_id: str | None = None,
    phase: str = "inference",
) -> Run:
    """One prompt per table, covering all its target columns at once."""
    embedder = embedder or HashedEmbedder()
    deterministic = getattr(backend, "deterministic", False)
    run = Run(
        run_id=run_id or new_run_id(),
        split=split,
        strategy={
            "strategy": variant.strategy,
            "include_instructions": variant.include_instructions,
            "include_hierarchy": variant.include_hierarchy,
            "definitions_kind": _definitions_kind(variant),
            "defs_topk": defs_topk,
            "few_shot_k": few_shot_k if variant.strategy == "few_shot" else None,
            "temperature": temperature,
            "model_id": getattr(backend, "model_id", "unknown"),
            "backend_digest": getattr(backend, "model_id", "unknown"),
        },
        started=_now(deterministic),
    )
    tables = sorted(corpus.split(split), key=lambda t: t.table_id)

    def annotate_one(table):
        resolved = _variant_for_table(
            table,
            corpus,
            variant,
            embedder=embedder,
            few_shot_k=few_shot_k,
            defs_topk=defs_topk,
            opts=opts,
        )
        messages = build_annotation_prompt(table, corpus.vocabulary, resolved, opts)
        completion = backend.complete(messages, temperature)
        parsed = parse_annotation_response(
            completion.text, corpus.vocabulary, table.target_columns()
        )
        return completion, parsed

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_safe(annotate_one), tables))
    else:
        outcomes = [_safe(annotate_one)(table) for table in tables]

    for table, outcome in zip(tables, outcomes):
        if isinstance(outcome, Exception):
            run.failures[table.table_id] = str(outcome)
            continue
        completion, parsed = outcome
        run.predictions[table.table_id] = parsed.predictions
        run.raw_responses[table.table_id] = completion.text
        notes = list(parsed.warnings)
        if parsed.unanswered:
            notes.append(
                "unanswered columns: " + ", ".join(str(i + 1) for i in parsed.unanswered)
            )
        if notes:
            run.warnings[table.table_id] = notes
        run.usage.append(
            UsageEntry(
                phase=phase,
                input_tokens=completion.usage.input_tokens,
                output_tokens=completion.usage.output_tokens,
                model_id=completion.model_id,
                estimated=completion.estimated,
                run_id=run.run_id,
            )
        )
    run.finished = _now(deterministic)
    return run


def _safe(fn):
    def wrapped(table):
        try:
            return fn(table)
        except (GatewayError, ResponseParseError, ColtypeError) as exc:
            return exc

    return wrapped


def _definitions_kind(variant: PromptVariant) -> str | None:
    if not variant.definitions:
        return None
    kinds = {d.kind for d in variant.definitions}
    return ",".join(sorted(kinds))


def annotate_self_consistency(
    corpus: Corpus,
    split: str,
    variant: PromptVariant,
    backend,
    temperatures: Sequence[float] = (0.0, 0.5, 0.7),
    *,
    opts: SerializationOptions = SerializationOptions(),
    embedder=None,
    few_shot_k: int = 5,
    defs_topk: int | None = None,
    workers: int = 1,
    run_id: str | None = None,
) -> Run:
    """Annotate once per temperature and majority-vote per column.

    A label wins if it was predicted in at least two of the runs; without a
    majority the prediction of the first (temperature-0) run stands, flagged
    ``no-majority``. In multi-label corpora the vote applies per label.
    """
    if len(temperatures) < 2:
        raise ValueError("self-consistency needs at least two temperatures")
    rounds = [
        annotate(
            corpus,
            split,
            variant,
            backend,
            opts=opts,
            embedder=embedder,
            few_shot_k=few_shot_k,
            defs_topk=defs_topk,
            temperature=temp,
            workers=workers,
        )
        for temp in temperatures
    ]
    base = rounds[0]
    run = Run(
        run_id=run_id or new_run_id(),
        split=split,
        strategy=dict(base.strategy, strategy="self_consistency", temperatures=list(temperatures)),
        started=base.started,
        finished=rounds[-1].finished,
    )
    for round_run in rounds:
        run.usage.extend(
            replace(entry, run_id=run.run_id) for entry in round_run.usage
        )
        for table_id, message in round_run.failures.items():
            run.failures.setdefault(table_id, message)

    multi_label = corpus.vocabulary.multi_label
    for table in sorted(corpus.split(split), key=lambda t: t.table_id):
        table_id = table.table_id
        voted: list[ColumnPrediction] = []
        notes: list[str] = []
        for index in table.target_columns():
            per_round = [
                _find_prediction(r.predictions.get(table_id, []), index) for r in rounds
            ]
            if multi_label:
                votes: dict[str, int] = {}
                for prediction in per_round:
                    if prediction:
                        for label in set(prediction.labels):
                            votes[label] = votes.get(label, 0) + 1
                winners = sorted(label for label, n in votes.items() if n >= 2)
                if winners:
                    voted.append(
                        ColumnPrediction(
                            column_index=index,
                            labels=tuple(winners),
                            in_vocabulary=tuple(l in corpus.vocabulary for l in winners),
                        )
                    )
                    continue
            else:
                votes = {}
                for prediction in per_round:
                    if prediction:
                        label = prediction.labels[0]
                        votes[label] = votes.get(label, 0) + 1
                winners = sorted(label for label, n in votes.items() if n >= 2)
                if winners:
                    label = winners[0]
                    voted.append(
                        ColumnPrediction(
                            column_index=index,
                            labels=(label,),
                            in_vocabulary=(label in corpus.vocabulary,),
                        )
                    )
                    continue
            fallback = per_round[0]
            if fallback is not None:
                voted.append(fallback)
                notes.append(f"column {index + 1}: no-majority, temperature-0 answer kept")
            else:
                notes.append(f"column {index + 1}: no-majority and no fallback answer")
        if voted or table_id in base.predictions:
            run.predictions[table_id] = voted
        if table_id in base.raw_responses:
            run.raw_responses[table_id] = base.raw_responses[table_id]
        if notes:
            run.warnings[table_id] = notes
    return run


def _find_prediction(predictions: list[ColumnPrediction], index: int):
    for prediction in predictions:
        if prediction.column_index == index:
            return prediction
    return None


def save_run(run: Run, runs_dir: str | Path) -> Path:
    """Write ``runs/<run_id>/`` with manifest, predictions, responses, usage."""
    root = Path(runs_dir) / run.run_id
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": RUN_FORMAT_VERSION,
        "run_id": run.run_id,
        "split": run.split,
        "strategy": run.strategy,
        "failures": run.failures,
        "warnings": run.warnings,
        "started": run.started,
        "finished": run.finished,
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    with (root / "predictions.jsonl").open("w", encoding="utf-8", newline="\n") as handle:
        for table_id in sorted(run.predictions):
            for prediction in run.predictions[table_id]:
                record = {
                    "table_id": table_id,
                    "column_index": prediction.column_index,
                    "labels": list(prediction.labels),
                    "in_vocabulary": list(prediction.in_vocabulary),
                    "explanation": prediction.explanation,
                }
                handle.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
    with (root / "responses.jsonl").open("w", encoding="utf-8", newline="\n") as handle:
        for table_id in sorted(run.raw_responses):
            record = {"table_id": table_id, "text": run.raw_responses[table_id]}
            handle.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
    with (root / "usage.jsonl").open("w", encoding="utf-8", newline="\n") as handle:
        for entry in run.usage:
            handle.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")
    return root


def load_run(path: str | Path) -> Run:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise RunFormatError(f"cannot read run manifest under {root}: {exc}") from exc
    if manifest.get("version") != RUN_FORMAT_VERSION:
        raise RunFormatError(
            f"unsupported run format version {manifest.get('version')!r} in {root}"
        )
    run = Run(
        run_id=manifest["run_id"],
        split=manifest["split"],
        strategy=manifest["strategy"],
        failures=manifest.get("failures", {}),
        warnings=manifest.get("warnings", {}),
        started=manifest.get("started"),
        finished=manifest.get("finished"),
    )
    try:
        for line in (root / "predictions.jsonl").read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            run.predictions.setdefault(record["table_id"], []).append(
                ColumnPrediction(
                    column_index=record["column_index"],
                    labels=tuple(record["labels"]),
                    in_vocabulary=tuple(record["in_vocabulary"]),
                    explanation=record.get("explanation"),
                )
            )
        for line in (root / "responses.jsonl").read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            run.raw_responses[record["table_id"]] = record["text"]
        for line in (root / "usage.jsonl").read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            run.usage.append(UsageEntry(**json.loads(line)))
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise RunFormatError(f"corrupt run files under {root}: {exc}") from exc
    return run


def make_gold_rule(corpus: Corpus, opts: SerializationOptions = SerializationOptions()):
    """Mock-backend rule that answers gold for whichever table is in the prompt.

    Matches on the serialized table block; the test table is the last one in
    the user message, so the match scans for the latest occurrence.
    """
    serialized = {serialize_table(t, opts): t for t in corpus.tables}

    def rule(messages, temperature):
        user = messages[-1].content
        best = None
        best_pos = -1
        for text, table in serialized.items():
            pos = user.rfind(text)
            if pos > best_pos:
                best_pos = pos
                best = table
        if best is None:
            raise GatewayError("gold rule: no known table in prompt")
        return format_gold_answer(best, corpus.vocabulary.multi_label, mask_headers=opts.mask_headers)

    return rule
