"""Build annotation/review prompts and parse model responses.

Wording lives in versioned text assets under ``assets/prompts/``; leading
``#`` lines in an asset are header metadata and are stripped on load.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Sequence

from .corpus import TableDoc, Vocabulary
from .errors import ResponseParseError
from .gateway import ChatMessage
from .serialize import SerializationOptions, column_name, serialize_table

STRATEGIES = ("zero_shot", "few_shot", "with_definitions", "reviewer")

_COLUMN_KEY = re.compile(r"^\s*column\s*(\d+)\s*$", re.IGNORECASE)


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    raw = resources.files("coltype.assets.prompts").joinpath(f"{name}.txt").read_text(
        encoding="utf-8"
    )
    lines = raw.splitlines()
    while lines and lines[0].startswith("#"):
        lines.pop(0)
    return "\n".join(lines).strip("\n")


@dataclass
class PromptVariant:
    """Which prompt layout to build and what extra knowledge it carries."""

    strategy: str = "zero_shot"
    include_instructions: bool = True
    include_hierarchy: bool = False
    definitions: list | None = None  # list[Definition]
    demonstrations: list[tuple[TableDoc, dict[int, tuple[str, ...]]]] | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")

    def validate(self):
        if self.strategy == "few_shot" and not self.demonstrations:
            raise ValueError("few_shot variant requires demonstrations")
        if self.strategy == "with_definitions" and not self.definitions:
            raise ValueError("with_definitions variant requires definitions")


@dataclass
class ColumnPrediction:
    column_index: int  # 0-based grid index
    labels: tuple[str, ...]
    in_vocabulary: tuple[bool, ...]
    explanation: str | None = None

    def __post_init__(self):
        if not self.labels:
            raise ValueError("prediction must carry at least one label")
        if len(self.labels) != len(self.in_vocabulary):
            raise ValueError("in_vocabulary flags must match labels")


@dataclass
class ParseResult:
    predictions: list[ColumnPrediction]
    unanswered: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def render_hierarchy(vocab: Vocabulary) -> str:
    """Indented tree; children appear under their parents, roots at margin."""
    children: dict[str, list[str]] = {}
    has_parent = set()
    for child, parent in sorted(vocab.hierarchy):
        children.setdefault(parent, []).append(child)
        has_parent.add(child)
    lines: list[str] = []

    def walk(label: str, depth: int):
        lines.append("  " * depth + label)
        for child in sorted(children.get(label, ())):
            walk(child, depth + 1)

    for label in vocab.labels:
        if label not in has_parent:
            walk(label, 0)
    return "\n".join(lines)


def build_task_description(vocab: Vocabulary, variant: PromptVariant) -> str:
    """Label set, then optional hierarchy tree, then optional definitions."""
    parts = [load_template("task_description").format(labels="\n".join(vocab.labels))]
    if variant.include_hierarchy and vocab.hierarchy:
        parts.append(load_template("hierarchy_intro").format(tree=render_hierarchy(vocab)))
    if variant.definitions:
        rendered = "\n".join(f"{d.label}: {d.text}" for d in variant.definitions)
        parts.append(load_template("definitions_intro").format(definitions=rendered))
    return "\n\n".join(parts)


def format_gold_answer(
    table: TableDoc,
    multi_label: bool,
    columns: Sequence[int] | None = None,
    mask_headers: bool = True,
) -> str:
    """The assistant-side JSON a model is expected to produce for gold."""
    if columns is None:
        columns = table.target_columns()
    payload = {}
    for index in columns:
        key = column_name(table, index, mask_headers)
        labels = list(table.gold[index])
        payload[key] = labels if multi_label else labels[0]
    return json.dumps(payload, ensure_ascii=False)


def annotation_request(table: TableDoc, mask_headers: bool = True) -> str:
    names = ", ".join(
        column_name(table, i, mask_headers) for i in table.target_columns()
    )
    return load_template("annotation_request").format(columns=names)


def build_annotation_prompt(
    table: TableDoc,
    vocab: Vocabulary,
    variant: PromptVariant,
    opts: SerializationOptions = SerializationOptions(),
) -> list[ChatMessage]:
    """System message with the task description, user message with the table.

    Few-shot demonstrations precede the test table, each with its gold
    answer. Exactly the test table's target columns are requested.
    """
    variant.validate()
    system = build_task_description(vocab, variant)
    if variant.include_instructions:
        name = "instructions_multi" if vocab.multi_label else "instructions_single"
        system += "\n\n" + load_template(name)

    blocks = []
    for demo_table, demo_gold in variant.demonstrations or []:
        blocks.append(
            "Table:\n"
            + serialize_table(demo_table, opts)
            + "\n"
            + annotation_request(demo_table, opts.mask_headers)
            + "\nAnswer:\n"
            + format_gold_answer(demo_table, vocab.multi_label, mask_headers=opts.mask_headers)
        )
    blocks.append(
        "Table:\n"
        + serialize_table(table, opts)
        + "\n"
        + annotation_request(table, opts.mask_headers)
    )
    return [
        ChatMessage("system", system),
        ChatMessage("user", "\n\n".join(blocks)),
    ]


def extract_json(text: str) -> dict:
    """First balanced, parseable ``{...}`` region; code fences are ignored."""
    stripped = re.sub(r"```[a-zA-Z]*", "", text).replace("```", "")
    start = stripped.find("{")
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for position in range(start, len(stripped)):
            char = stripped[position]
            if in_string:
                if escaped:
                    escaped = False
                elif char == "\\":
                    escaped = True
                elif char == '"':
                    in_string = False
                continue
            if char == '"':
                in_string = True
            elif char == "{":
                depth += 1
            elif char == "}":
                depth -= 1
                if depth == 0:
                    candidate = stripped[start : position + 1]
                    try:
                        parsed = json.loads(candidate)
                    except json.JSONDecodeError:
                        break
                    if isinstance(parsed, dict):
                        return parsed
                    break
        start = stripped.find("{", start + 1)
    raise ResponseParseError("no JSON object found in response", raw=text)


def _match_columns(
    payload: dict, expected_columns: Sequence[int], warnings: list[str]
) -> dict[int, object]:
    """Map response keys to 0-based column indices; last duplicate wins."""
    matched: dict[int, object] = {}
    for key, value in payload.items():
        match = _COLUMN_KEY.match(str(key))
        if not match:
            warnings.append(f"unrecognized response key {key!r}")
            continue
        index = int(match.group(1)) - 1
        if index in matched:
            warnings.append(f"duplicate response key for column {index + 1}; last wins")
        matched[index] = value
    for index in matched:
        if index not in expected_columns:
            warnings.append(f"response for unrequested column {index + 1}")
    return matched


def parse_annotation_response(
    text: str,
    vocab: Vocabulary,
    expected_columns: Sequence[int],
    multi_label: bool | None = None,
) -> ParseResult:
    """Typed predictions out of a (possibly hostile) model response.

    Out-of-vocabulary labels are kept and flagged, never remapped. Columns
    absent from the response are reported as unanswered.
    """
    if multi_label is None:
        multi_label = vocab.multi_label
    payload = extract_json(text)
    warnings: list[str] = []
    matched = _match_columns(payload, expected_columns, warnings)

    predictions = []
    unanswered = []
    for index in expected_columns:
        if index not in matched:
            unanswered.append(index)
            continue
        value = matched[index]
        if multi_label:
            labels = [str(v) for v in value] if isinstance(value, list) else [str(value)]
        else:
            if isinstance(value, list):
                if not value:
                    unanswered.append(index)
                    warnings.append(f"empty label list for column {index + 1}")
                    continue
                labels = [str(value[0])]
            else:
                labels = [str(value)]
        if not labels:
            unanswered.append(index)
            continue
        predictions.append(
            ColumnPrediction(
                column_index=index,
                labels=tuple(labels),
                in_vocabulary=tuple(label in vocab for label in labels),
            )
        )
    return ParseResult(predictions=predictions, unanswered=unanswered, warnings=warnings)


def parse_review_response(
    text: str, vocab: Vocabulary, expected_columns: Sequence[int]
) -> ParseResult:
    """Like annotation parsing but values are [label, explanation] pairs."""
    payload = extract_json(text)
    warnings: list[str] = []
    matched = _match_columns(payload, expected_columns, warnings)

    predictions = []
    unanswered = []
    for index in expected_columns:
        if index not in matched:
            unanswered.append(index)
            continue
        value = matched[index]
        if not (isinstance(value, list) and len(value) == 2 and isinstance(value[1], str)):
            warnings.append(
                f"column {index + 1}: review value is not a [label, explanation] pair"
            )
            unanswered.append(index)
            continue
        head, explanation = value
        labels = tuple(str(v) for v in head) if isinstance(head, list) else (str(head),)
        if not labels:
            warnings.append(f"column {index + 1}: empty label list in review")
            unanswered.append(index)
            continue
        predictions.append(
            ColumnPrediction(
                column_index=index,
                labels=labels,
                in_vocabulary=tuple(label in vocab for label in labels),
                explanation=explanation,
            )
        )
    return ParseResult(predictions=predictions, unanswered=unanswered, warnings=warnings)
