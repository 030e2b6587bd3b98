"""Generate label definitions and refine them from validation-set errors.

Three generation flavors (initial, demonstration, comparative) plus an
error-based refinement loop that updates demonstration definitions using
the false positives/negatives of a validation run.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

from .corpus import Corpus, TableDoc, Vocabulary
from .errors import ColtypeError
from .gateway import ChatMessage
from .ledger import UsageEntry
from .prompts import PromptVariant, build_task_description, load_template
from .serialize import column_excerpt

if TYPE_CHECKING:
    from .runner import Run

KINDS = ("initial", "demonstration", "comparative", "refined")


@dataclass(frozen=True)
class Definition:
    label: str
    kind: str
    text: str
    generator_model: str = ""
    source_run: str = ""
    round: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown definition kind {self.kind!r}")
        if not self.text:
            raise ValueError("definition text must be non-empty")


@dataclass
class ErrorDigest:
    """Validation errors of one label: (column excerpt, counterpart label)."""

    label: str
    false_positives: list[tuple[str, str]] = field(default_factory=list)
    false_negatives: list[tuple[str, str]] = field(default_factory=list)
    confused_with: set[str] = field(default_factory=set)
    source_run: str = ""

    @property
    def empty(self) -> bool:
        return not self.false_positives and not self.false_negatives


@dataclass
class GenerationResult:
    definitions: list[Definition]
    failures: dict[str, str] = field(default_factory=dict)
    usage: list[UsageEntry] = field(default_factory=list)
    flags: dict[str, str] = field(default_factory=dict)


def _system_message(vocab: Vocabulary) -> ChatMessage:
    return ChatMessage("system", build_task_description(vocab, PromptVariant()))


def _complete_per_label(
    labels: Sequence[str],
    user_texts: dict[str, str],
    vocab: Vocabulary,
    backend,
    kind: str,
    source_run: str = "",
    round_number: int = 0,
) -> GenerationResult:
    result = GenerationResult(definitions=[])
    system = _system_message(vocab)
    for label in labels:
        messages = [system, ChatMessage("user", user_texts[label])]
        try:
            completion = backend.complete(messages, 0.0)
        except ColtypeError as exc:
            result.failures[label] = str(exc)
            continue
        text = completion.text.strip()
        if not text:
            result.failures[label] = "empty definition text"
            continue
        result.definitions.append(
            Definition(
                label=label,
                kind=kind,
                text=text,
                generator_model=completion.model_id,
                source_run=source_run,
                round=round_number,
            )
        )
        result.usage.append(
            UsageEntry(
                phase="generation",
                input_tokens=completion.usage.input_tokens,
                output_tokens=completion.usage.output_tokens,
                model_id=completion.model_id,
                estimated=completion.estimated,
            )
        )
    return result


def generate_initial(vocab: Vocabulary, backend) -> GenerationResult:
    """One definition per label from the model's background knowledge."""
    template = load_template("defgen_initial")
    user_texts = {label: template.format(label=label) for label in vocab.labels}
    return _complete_per_label(vocab.labels, user_texts, vocab, backend, kind="initial")


def _label_columns(train: Corpus, label: str) -> list[tuple[TableDoc, int]]:
    columns = []
    for table in train.split("train"):
        for index in table.training_columns():
            if label in table.gold[index]:
                columns.append((table, index))
    return columns


def sample_demonstrations(
    train: Corpus, label: str, n_demos: int, seed: int
) -> list[tuple[TableDoc, int]]:
    """Seeded per-label sample of annotated train columns, order-stable."""
    columns = _label_columns(train, label)
    rng = random.Random(f"{seed}:{label}")
    if len(columns) <= n_demos:
        return columns
    return rng.sample(columns, n_demos)


def render_demonstrations(samples: Sequence[tuple[TableDoc, int]]) -> str:
    if not samples:
        return "- none"
    return "\n".join(
        f"- Column values: {column_excerpt(table, index)}" for table, index in samples
    )


def _render_error_lines(pairs: Sequence[tuple[str, str]], note: str) -> str:
    if not pairs:
        return "- none"
    return "\n".join(
        f'- Column values: {excerpt} ({note} "{label}")' for excerpt, label in pairs
    )


def generate_demonstration(
    vocab: Vocabulary, train: Corpus, backend, n_demos: int = 3, seed: int = 0
) -> GenerationResult:
    """Definitions generated from sampled labeled columns of each label."""
    template = load_template("defgen_demonstration")
    fallback = load_template("defgen_initial")
    user_texts = {}
    flags = {}
    for label in vocab.labels:
        samples = sample_demonstrations(train, label, n_demos, seed)
        if not samples:
            user_texts[label] = fallback.format(label=label)
            flags[label] = "no train columns; initial-style prompt used"
            continue
        if len(samples) < n_demos:
            flags[label] = f"n_used={len(samples)}"
        user_texts[label] = template.format(
            label=label, demonstrations=render_demonstrations(samples)
        )
    result = _complete_per_label(vocab.labels, user_texts, vocab, backend, kind="demonstration")
    result.flags = flags
    return result


def collect_errors(run: "Run", corpus: Corpus) -> list[ErrorDigest]:
    """Group wrongly annotated validation columns under their gold labels.

    Every vocabulary label gets a digest (possibly empty). Excerpts follow
    the serializer's cell and word caps.
    """
    digests = {label: ErrorDigest(label=label, source_run=run.run_id) for label in corpus.vocabulary.labels}
    for table in corpus.split(run.split):
        predictions = {
            p.column_index: p for p in run.predictions.get(table.table_id, [])
        }
        for index in table.target_columns():
            gold = set(table.gold[index])
            prediction = predictions.get(index)
            predicted = set(prediction.labels) if prediction else set()
            excerpt = column_excerpt(table, index)
            for gold_label in gold - predicted:
                wrong = sorted(predicted - gold) or ["(unanswered)"]
                for counterpart in wrong:
                    digests[gold_label].false_negatives.append((excerpt, counterpart))
                    if counterpart != "(unanswered)":
                        digests[gold_label].confused_with.add(counterpart)
            for predicted_label in predicted - gold:
                if predicted_label not in corpus.vocabulary:
                    continue
                for gold_label in sorted(gold):
                    digests[predicted_label].false_positives.append((excerpt, gold_label))
                    digests[predicted_label].confused_with.add(gold_label)
    return [digests[label] for label in corpus.vocabulary.labels]


def generate_comparative(
    errors: Sequence[ErrorDigest],
    train: Corpus,
    backend,
    n_demos: int = 3,
    seed: int = 0,
) -> GenerationResult:
    """Tips distinguishing each errorful label from the labels it was confused with.

    Labels without validation errors receive no comparative definition; at
    annotation time callers fall back to the demonstration definition.
    """
    template = load_template("defgen_comparative")
    vocab = train.vocabulary
    errorful = [digest for digest in errors if not digest.empty]
    user_texts = {}
    for digest in errorful:
        samples = sample_demonstrations(train, digest.label, n_demos, seed)
        user_texts[digest.label] = template.format(
            label=digest.label,
            demonstrations=render_demonstrations(samples),
            false_negatives=_render_error_lines(digest.false_negatives, "was wrongly labeled"),
            false_positives=_render_error_lines(digest.false_positives, "correct label is"),
            confused_with=", ".join(sorted(digest.confused_with)) or "(none recorded)",
        )
    source_run = errorful[0].source_run if errorful else ""
    return _complete_per_label(
        [d.label for d in errorful], user_texts, vocab, backend,
        kind="comparative", source_run=source_run,
    )


def refine(
    defs: Sequence[Definition],
    errors: Sequence[ErrorDigest],
    corpus: Corpus,
    backend,
    n_demos: int = 3,
    rounds: int = 1,
    seed: int = 0,
    classify=None,
) -> GenerationResult:
    """Update demonstration definitions using validation errors.

    ``errors`` must come from a validation run that used ``defs``. Labels
    with an empty digest keep their text (re-tagged refined, round bumped).
    With ``rounds > 1`` a ``classify`` callable (defs -> validation Run) is
    required to repeat the classify/collect/refine cycle.
    """
    if rounds > 1 and classify is None:
        raise ValueError("multi-round refinement needs a classify callable")
    template = load_template("defgen_refine")
    vocab = corpus.vocabulary
    current = {d.label: d for d in defs}
    combined = GenerationResult(definitions=[])

    for round_number in range(1, rounds + 1):
        by_label = {digest.label: digest for digest in errors}
        user_texts = {}
        to_refine = []
        for label, definition in current.items():
            digest = by_label.get(label)
            if digest is None or digest.empty:
                continue
            samples = sample_demonstrations(corpus, label, n_demos, seed)
            user_texts[label] = template.format(
                label=label,
                definition=definition.text,
                demonstrations=render_demonstrations(samples),
                false_negatives=_render_error_lines(digest.false_negatives, "was wrongly labeled"),
                false_positives=_render_error_lines(digest.false_positives, "correct label is"),
            )
            to_refine.append(label)
        source_run = next((d.source_run for d in errors if d.source_run), "")
        result = _complete_per_label(
            to_refine, user_texts, vocab, backend,
            kind="refined", source_run=source_run, round_number=round_number,
        )
        combined.failures.update(result.failures)
        combined.usage.extend(result.usage)
        refined = {d.label: d for d in result.definitions}
        next_defs = {}
        for label, definition in current.items():
            if label in refined:
                next_defs[label] = refined[label]
            else:
                next_defs[label] = Definition(
                    label=label,
                    kind="refined",
                    text=definition.text,
                    generator_model=definition.generator_model,
                    source_run=definition.source_run or source_run,
                    round=round_number,
                )
        current = next_defs
        if round_number < rounds:
            validation_run = classify(list(current.values()))
            errors = collect_errors(validation_run, corpus)

    combined.definitions = [current[label] for label in vocab.labels if label in current]
    return combined


def save_definitions(defs: Sequence[Definition], path: str | Path):
    with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
        for definition in defs:
            record = {
                "label": definition.label,
                "kind": definition.kind,
                "round": definition.round,
                "text": definition.text,
                "generator_model": definition.generator_model,
                "source_run": definition.source_run,
            }
            handle.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


def load_definitions(path: str | Path) -> list[Definition]:
    definitions = []
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                definitions.append(Definition(**json.loads(line)))
    return definitions
