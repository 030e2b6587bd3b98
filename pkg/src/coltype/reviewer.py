"""Two-step self-correction: a reviewer model critiques a prior run."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

from .corpus import Corpus, TableDoc
from .definitions import Definition
from .errors import ColtypeError
from .gateway import ChatMessage
from .ledger import UsageEntry
from .prompts import (
    ColumnPrediction,
    PromptVariant,
    build_task_description,
    load_template,
    parse_review_response,
)
from .runner import Run, new_run_id
from .serialize import SerializationOptions, column_name, serialize_table

SCENARIOS = ("plain", "demo_defs", "selected_comparative")


def select_comparative_for_prediction(
    prior_table_predictions: Sequence[ColumnPrediction],
    comparative_defs: Sequence[Definition],
) -> list[Definition]:
    """Comparative definitions whose label the first model predicted."""
    predicted = {
        label
        for prediction in prior_table_predictions
        for label in prediction.labels
    }
    by_label = {d.label: d for d in comparative_defs}
    return [by_label[label] for label in sorted(predicted & set(by_label))]


def _render_prior(table: TableDoc, predictions: Sequence[ColumnPrediction], multi_label: bool, mask_headers: bool) -> str:
    import json

    payload = {}
    for prediction in sorted(predictions, key=lambda p: p.column_index):
        key = column_name(table, prediction.column_index, mask_headers)
        labels = list(prediction.labels)
        payload[key] = labels if multi_label else labels[0]
    return json.dumps(payload, ensure_ascii=False)


def build_review_prompt(
    table: TableDoc,
    corpus: Corpus,
    prior_predictions: Sequence[ColumnPrediction],
    scenario: str,
    defs: Sequence[Definition] | None,
    opts: SerializationOptions = SerializationOptions(),
) -> list[ChatMessage]:
    if scenario == "plain":
        variant = PromptVariant()
    elif scenario == "demo_defs":
        variant = PromptVariant(definitions=list(defs or []))
    else:  # selected_comparative
        variant = PromptVariant(
            definitions=select_comparative_for_prediction(prior_predictions, defs or [])
            or None
        )
    system = (
        build_task_description(corpus.vocabulary, variant)
        + "\n\n"
        + load_template("review_instructions")
    )
    names = ", ".join(
        column_name(table, i, opts.mask_headers) for i in table.target_columns()
    )
    user = load_template("review_request").format(
        table=serialize_table(table, opts),
        prior=_render_prior(
            table, prior_predictions, corpus.vocabulary.multi_label, opts.mask_headers
        ),
        columns=names,
    )
    return [ChatMessage("system", system), ChatMessage("user", user)]


def self_correct(
    prior: Run,
    corpus: Corpus,
    backend,
    scenario: str = "plain",
    defs: Sequence[Definition] | None = None,
    *,
    opts: SerializationOptions = SerializationOptions(),
    run_id: str | None = None,
) -> Run:
    """Review the prior run one table at a time and return the corrected run.

    On a reviewer failure (gateway or unparseable review) the prior
    prediction for that table survives, flagged ``reviewer-failed``.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    if scenario == "demo_defs" and not defs:
        raise ValueError("demo_defs scenario requires demonstration definitions")
    if scenario == "selected_comparative" and not defs:
        raise ValueError("selected_comparative scenario requires comparative definitions")

    run = Run(
        run_id=run_id or new_run_id(),
        split=prior.split,
        strategy={
            "strategy": "self_correction",
            "scenario": scenario,
            "prior_run": prior.run_id,
            "model_id": getattr(backend, "model_id", "unknown"),
        },
        started=prior.started if getattr(backend, "deterministic", False) else None,
    )
    for table_id in sorted(prior.predictions):
        table = corpus.by_id(table_id)
        prior_predictions = prior.predictions[table_id]
        messages = build_review_prompt(table, corpus, prior_predictions, scenario, defs, opts)
        try:
            completion = backend.complete(messages, 0.0)
            parsed = parse_review_response(
                completion.text, corpus.vocabulary, table.target_columns()
            )
        except ColtypeError as exc:
            run.predictions[table_id] = list(prior_predictions)
            run.failures[table_id] = f"reviewer-failed: {exc}"
            continue
        reviewed = {p.column_index: p for p in parsed.predictions}
        merged = []
        notes = list(parsed.warnings)
        for index in table.target_columns():
            if index in reviewed:
                merged.append(reviewed[index])
            else:
                kept = next(
                    (p for p in prior_predictions if p.column_index == index), None
                )
                if kept is not None:
                    merged.append(replace(kept))
                    notes.append(
                        f"column {index + 1}: review missing, prior prediction kept"
                    )
        run.predictions[table_id] = merged
        run.raw_responses[table_id] = completion.text
        if notes:
            run.warnings[table_id] = notes
        run.usage.append(
            UsageEntry(
                phase="inference",
                input_tokens=completion.usage.input_tokens,
                output_tokens=completion.usage.output_tokens,
                model_id=completion.model_id,
                estimated=completion.estimated,
                run_id=run.run_id,
            )
        )
    return run
