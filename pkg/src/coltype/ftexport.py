"""Build fine-tuning training sets and export chat-format JSONL.

Three sets: simple (zero-shot prompt -> gold JSON), definitions (gold JSON
with a templated explanation per column), and multi-task (simple plus one
definition-generation example per label). Training itself is out of scope;
only files and hyperparameter manifests are produced.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .corpus import Corpus, TableDoc, Vocabulary
from .definitions import Definition, render_demonstrations, sample_demonstrations
from .gateway import ChatMessage
from .prompts import (
    PromptVariant,
    annotation_request,
    build_task_description,
    load_template,
)
from .serialize import SerializationOptions, column_name, serialize_table

EXPLANATION_TEMPLATE = "Label {label} is correct because the term {definition}"


@dataclass
class TrainingRecord:
    messages: list[ChatMessage]
    task: str  # cta | definition_generation
    source_table: str = ""
    source_label: str = ""

    def __post_init__(self):
        if self.messages[-1].role != "assistant":
            raise ValueError("last training message must be the assistant answer")


@dataclass
class ExportOptions:
    include_instructions: bool = False  # paper-default off for fine-tuning
    serialization: SerializationOptions = field(default_factory=SerializationOptions)
    shuffle_seed: int | None = None


def _prompt_messages(
    table: TableDoc, vocab: Vocabulary, opts: ExportOptions
) -> list[ChatMessage]:
    variant = PromptVariant(include_instructions=opts.include_instructions)
    system = build_task_description(vocab, variant)
    if opts.include_instructions:
        name = "instructions_multi" if vocab.multi_label else "instructions_single"
        system += "\n\n" + load_template(name)
    user = (
        "Table:\n"
        + serialize_table(table, opts.serialization)
        + "\n"
        + annotation_request(table, opts.serialization.mask_headers)
    )
    return [ChatMessage("system", system), ChatMessage("user", user)]


def _gold_payload(table: TableDoc, vocab: Vocabulary, mask_headers: bool) -> dict:
    payload = {}
    for index in table.training_columns():
        key = column_name(table, index, mask_headers)
        labels = list(table.gold[index])
        payload[key] = labels if vocab.multi_label else labels[0]
    return payload


def build_simple_set(
    corpus: Corpus, opts: ExportOptions = ExportOptions()
) -> list[TrainingRecord]:
    """One record per train table; the assistant answer is the gold JSON."""
    vocab = corpus.vocabulary
    records = []
    for table in corpus.split("train"):
        payload = _gold_payload(table, vocab, opts.serialization.mask_headers)
        records.append(
            TrainingRecord(
                messages=_prompt_messages(table, vocab, opts)
                + [ChatMessage("assistant", json.dumps(payload, ensure_ascii=False))],
                task="cta",
                source_table=table.table_id,
            )
        )
    return _maybe_shuffle(records, opts)


def build_definitions_set(
    corpus: Corpus,
    defs: Sequence[Definition],
    opts: ExportOptions = ExportOptions(),
) -> tuple[list[TrainingRecord], dict[str, str]]:
    """Simple set with per-column [label, explanation] assistant values.

    The explanation instantiates a fixed template around the label's
    demonstration definition. Tables whose gold labels lack a definition are
    reported in the failure map instead of being silently dropped.
    """
    vocab = corpus.vocabulary
    by_label = {d.label: d for d in defs}
    records = []
    failures: dict[str, str] = {}
    for table in corpus.split("train"):
        payload = {}
        missing = None
        for index in table.training_columns():
            key = column_name(table, index, opts.serialization.mask_headers)
            labels = list(table.gold[index])
            primary = labels[0]
            definition = by_label.get(primary)
            if definition is None:
                missing = primary
                break
            explanation = EXPLANATION_TEMPLATE.format(
                label=primary, definition=definition.text
            )
            head = labels if vocab.multi_label else primary
            payload[key] = [head, explanation]
        if missing is not None:
            failures[table.table_id] = f"no definition for gold label {missing!r}"
            continue
        records.append(
            TrainingRecord(
                messages=_prompt_messages(table, vocab, opts)
                + [ChatMessage("assistant", json.dumps(payload, ensure_ascii=False))],
                task="cta",
                source_table=table.table_id,
            )
        )
    return _maybe_shuffle(records, opts), failures


def build_multitask_set(
    corpus: Corpus,
    defs: Sequence[Definition],
    with_demonstrations: bool = False,
    n_demos: int = 3,
    seed: int = 0,
    opts: ExportOptions = ExportOptions(),
) -> list[TrainingRecord]:
    """Simple set plus one definition-generation record per label."""
    vocab = corpus.vocabulary
    by_label = {d.label: d for d in defs}
    missing = [label for label in vocab.labels if label not in by_label]
    if missing:
        raise ValueError(f"definitions missing for labels: {missing}")
    records = build_simple_set(corpus, opts)
    system = build_task_description(vocab, PromptVariant())
    for label in vocab.labels:
        if with_demonstrations:
            samples = sample_demonstrations(corpus, label, n_demos, seed)
            user = load_template("defgen_demonstration").format(
                label=label, demonstrations=render_demonstrations(samples)
            )
        else:
            user = load_template("defgen_initial").format(label=label)
        records.append(
            TrainingRecord(
                messages=[
                    ChatMessage("system", system),
                    ChatMessage("user", user),
                    ChatMessage("assistant", by_label[label].text),
                ],
                task="definition_generation",
                source_label=label,
            )
        )
    return _maybe_shuffle(records, opts)


def _maybe_shuffle(records: list[TrainingRecord], opts: ExportOptions) -> list[TrainingRecord]:
    if opts.shuffle_seed is not None:
        rng = random.Random(opts.shuffle_seed)
        rng.shuffle(records)
    return records


def export_jsonl(records: Sequence[TrainingRecord], path: str | Path) -> Path:
    """Chat fine-tuning JSONL: one {"messages": [...]} object per line."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        for record in records:
            payload = {
                "messages": [
                    {"role": m.role, "content": m.content} for m in record.messages
                ]
            }
            handle.write(json.dumps(payload, ensure_ascii=False) + "\n")
    return path


def load_jsonl(path: str | Path) -> list[list[ChatMessage]]:
    conversations = []
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                raw = json.loads(line)
                conversations.append(
                    [ChatMessage(m["role"], m["content"]) for m in raw["messages"]]
                )
    return conversations


OPEN_MODEL_HYPERPARAMETERS = {
    "model_class": "open",
    "learning_rate": 1e-4,
    "epochs": 10,
    "max_input_length": 5020,
    "lora_rank": 32,
    "lora_alpha": 32,
    "lora_dropout": 0.1,
    "batch_size": {"8B": 16, "70B": 8},
    "quantization": "4bit",
}

HOSTED_MODEL_HYPERPARAMETERS = {
    "model_class": "hosted",
    "epochs": 3,
    "batch_size": 1,
    "other": "provider defaults",
}


def export_hyperparameter_manifest(model_class: str, path: str | Path) -> Path:
    if model_class == "open":
        manifest = OPEN_MODEL_HYPERPARAMETERS
    elif model_class == "hosted":
        manifest = HOSTED_MODEL_HYPERPARAMETERS
    else:
        raise ValueError(f"unknown model class {model_class!r}")
    path = Path(path)
    path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return path
