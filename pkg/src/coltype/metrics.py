"""Micro-F1, Hamming score and per-label error tables for a run.

Out-of-vocabulary and unanswered predictions count as errors for the gold
label (a false negative) and are additionally tallied in their own counters;
they never create false positives for labels that do not exist.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .corpus import Corpus

if TYPE_CHECKING:
    from .runner import Run


@dataclass
class LabelCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class MetricsReport:
    micro_f1: float
    precision: float
    recall: float
    hamming_score: float | None
    per_label: dict[str, LabelCounts]
    out_of_vocab_count: int
    unanswered_count: int
    n_columns: int

    def to_dict(self) -> dict:
        return {
            "micro_f1": self.micro_f1,
            "precision": self.precision,
            "recall": self.recall,
            "hamming_score": self.hamming_score,
            "per_label": {
                label: {"tp": c.tp, "fp": c.fp, "fn": c.fn}
                for label, c in sorted(self.per_label.items())
            },
            "out_of_vocab_count": self.out_of_vocab_count,
            "unanswered_count": self.unanswered_count,
            "n_columns": self.n_columns,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"columns        {self.n_columns}",
            f"micro_f1       {self.micro_f1:.3f}",
            f"precision      {self.precision:.3f}",
            f"recall         {self.recall:.3f}",
        ]
        if self.hamming_score is not None:
            lines.append(f"hamming_score  {self.hamming_score:.3f}")
        lines.append(f"out_of_vocab   {self.out_of_vocab_count}")
        lines.append(f"unanswered     {self.unanswered_count}")
        return "\n".join(lines)

    def per_label_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["label", "tp", "fp", "fn"])
        for label, counts in sorted(self.per_label.items()):
            writer.writerow([label, counts.tp, counts.fp, counts.fn])
        return buffer.getvalue()


def _prediction_for(run: "Run", table_id: str, column_index: int):
    for prediction in run.predictions.get(table_id, []):
        if prediction.column_index == column_index:
            return prediction
    return None


def score(run: "Run", corpus: Corpus) -> MetricsReport:
    """Pool TP/FP/FN over every target column of the run's split."""
    tables = corpus.split(run.split)
    if not tables:
        raise ValueError(f"corpus has no tables in split {run.split!r}")
    multi_label = corpus.vocabulary.multi_label
    per_label: dict[str, LabelCounts] = {}

    def counts(label: str) -> LabelCounts:
        return per_label.setdefault(label, LabelCounts())

    out_of_vocab = 0
    unanswered = 0
    n_columns = 0
    jaccard_sum = 0.0

    for table in tables:
        for index in table.target_columns():
            n_columns += 1
            gold = set(table.gold[index])
            prediction = _prediction_for(run, table.table_id, index)

            if multi_label:
                if prediction is None:
                    unanswered += 1
                    predicted_in_vocab: set[str] = set()
                else:
                    predicted_in_vocab = {
                        label
                        for label, ok in zip(prediction.labels, prediction.in_vocabulary)
                        if ok
                    }
                    out_of_vocab += sum(1 for ok in prediction.in_vocabulary if not ok)
                for label in gold & predicted_in_vocab:
                    counts(label).tp += 1
                for label in predicted_in_vocab - gold:
                    counts(label).fp += 1
                for label in gold - predicted_in_vocab:
                    counts(label).fn += 1
                union = gold | predicted_in_vocab
                jaccard_sum += len(gold & predicted_in_vocab) / len(union) if union else 1.0
            else:
                gold_label = next(iter(gold)) if len(gold) == 1 else table.gold[index][0]
                if prediction is None:
                    unanswered += 1
                    counts(gold_label).fn += 1
                    continue
                predicted = prediction.labels[0]
                if not prediction.in_vocabulary[0]:
                    out_of_vocab += 1
                    counts(gold_label).fn += 1
                elif predicted == gold_label:
                    counts(gold_label).tp += 1
                else:
                    counts(gold_label).fn += 1
                    counts(predicted).fp += 1

    total_tp = sum(c.tp for c in per_label.values())
    total_fp = sum(c.fp for c in per_label.values())
    total_fn = sum(c.fn for c in per_label.values())
    precision = total_tp / (total_tp + total_fp) if total_tp + total_fp else 0.0
    recall = total_tp / (total_tp + total_fn) if total_tp + total_fn else 0.0
    micro_f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricsReport(
        micro_f1=micro_f1,
        precision=precision,
        recall=recall,
        hamming_score=(jaccard_sum / n_columns) if multi_label and n_columns else None,
        per_label=per_label,
        out_of_vocab_count=out_of_vocab,
        unanswered_count=unanswered,
        n_columns=n_columns,
    )


def error_table(run: "Run", corpus: Corpus, threshold: int = 5) -> list[tuple[str, int]]:
    """Labels whose gold columns were missed more than ``threshold`` times."""
    report = score(run, corpus)
    rows = [
        (label, counts.fn)
        for label, counts in report.per_label.items()
        if counts.fn > threshold
    ]
    rows.sort(key=lambda row: (-row[1], row[0]))
    return rows


def diff_runs(a: "Run", b: "Run", corpus: Corpus) -> list[tuple[str, int, int, int]]:
    """Per-label missed-column counts of two runs and their signed delta."""
    fn_a = {label: c.fn for label, c in score(a, corpus).per_label.items()}
    fn_b = {label: c.fn for label, c in score(b, corpus).per_label.items()}
    rows = []
    for label in sorted(set(fn_a) | set(fn_b)):
        ea, eb = fn_a.get(label, 0), fn_b.get(label, 0)
        if ea or eb:
            rows.append((label, ea, eb, eb - ea))
    rows.sort(key=lambda row: (-row[1], row[0]))
    return rows


def average_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Field-wise arithmetic mean, for averaging repeated runs."""
    if not reports:
        raise ValueError("nothing to average")
    n = len(reports)
    labels = {label for report in reports for label in report.per_label}
    per_label = {}
    for label in labels:
        per_label[label] = LabelCounts(
            tp=sum(r.per_label.get(label, LabelCounts()).tp for r in reports) // n,
            fp=sum(r.per_label.get(label, LabelCounts()).fp for r in reports) // n,
            fn=sum(r.per_label.get(label, LabelCounts()).fn for r in reports) // n,
        )
    hammings = [r.hamming_score for r in reports if r.hamming_score is not None]
    return MetricsReport(
        micro_f1=sum(r.micro_f1 for r in reports) / n,
        precision=sum(r.precision for r in reports) / n,
        recall=sum(r.recall for r in reports) / n,
        hamming_score=sum(hammings) / len(hammings) if hammings else None,
        per_label=per_label,
        out_of_vocab_count=sum(r.out_of_vocab_count for r in reports) // n,
        unanswered_count=sum(r.unanswered_count for r in reports) // n,
        n_columns=reports[0].n_columns,
    )
