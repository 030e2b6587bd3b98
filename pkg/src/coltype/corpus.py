"""Neutral on-disk corpus format: tables, label vocabulary, splits.

A corpus directory contains:
  vocabulary.json    labels array, optional hierarchy ([child, parent] pairs),
                     multi_label flag
  tables/<id>.csv    raw cell grid, no header row, UTF-8
  annotations.jsonl  one record per table: table_id, roles, gold, domain
  splits.json        table_id -> split
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import CorpusError

SPLITS = ("train", "validation", "test")
ROLES = ("target", "context")


@dataclass(frozen=True)
class Vocabulary:
    """The label set, with an optional child->parent hierarchy."""

    labels: tuple[str, ...]
    hierarchy: frozenset[tuple[str, str]] = frozenset()
    multi_label: bool = False

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            dupes = sorted({l for l in self.labels if list(self.labels).count(l) > 1})
            raise CorpusError(f"duplicate label ids in vocabulary: {dupes}")
        known = set(self.labels)
        for child, parent in self.hierarchy:
            if child not in known or parent not in known:
                raise CorpusError(
                    f"hierarchy edge ({child!r}, {parent!r}) references unknown label"
                )
        self._check_acyclic()

    def _check_acyclic(self):
        parent_of: dict[str, list[str]] = {}
        for child, parent in self.hierarchy:
            parent_of.setdefault(child, []).append(parent)
        for start in parent_of:
            seen = {start}
            frontier = list(parent_of.get(start, ()))
            while frontier:
                node = frontier.pop()
                if node in seen:
                    raise CorpusError(f"label hierarchy contains a cycle through {node!r}")
                seen.add(node)
                frontier.extend(parent_of.get(node, ()))

    def __contains__(self, label: str) -> bool:
        return label in self.labels


@dataclass
class TableDoc:
    """One table: cell grid, per-column roles, gold labels for target columns."""

    table_id: str
    cells: list[list[str]]
    column_roles: list[str]
    gold: dict[int, tuple[str, ...]]
    domain: str = ""
    split: str = "test"
    original_headers: list[str] | None = None
    # target columns whose gold labels were dropped by downsampling; they keep
    # their annotations for scoring but must not feed training sets
    excluded_columns: frozenset[int] = frozenset()

    @property
    def n_columns(self) -> int:
        return len(self.column_roles)

    @property
    def n_rows(self) -> int:
        return len(self.cells)

    def target_columns(self) -> list[int]:
        return [i for i, role in enumerate(self.column_roles) if role == "target"]

    def training_columns(self) -> list[int]:
        """Target columns that still count as annotated after downsampling."""
        return [i for i in self.target_columns() if i not in self.excluded_columns]

    def column_values(self, index: int) -> list[str]:
        return [row[index] for row in self.cells]

    def validate(self, vocabulary: Vocabulary | None = None):
        widths = {len(row) for row in self.cells}
        if len(widths) > 1:
            raise CorpusError(
                f"table {self.table_id!r}: non-rectangular grid, row lengths {sorted(widths)}"
            )
        if self.cells and len(self.cells[0]) != self.n_columns:
            raise CorpusError(
                f"table {self.table_id!r}: {len(self.cells[0])} cell columns but "
                f"{self.n_columns} declared roles"
            )
        for role in self.column_roles:
            if role not in ROLES:
                raise CorpusError(f"table {self.table_id!r}: unknown column role {role!r}")
        if self.split not in SPLITS:
            raise CorpusError(f"table {self.table_id!r}: unknown split {self.split!r}")
        for index in self.target_columns():
            if not self.gold.get(index):
                raise CorpusError(
                    f"table {self.table_id!r}: target column {index} has no gold labels"
                )
        for index, labels in self.gold.items():
            if index < 0 or index >= self.n_columns:
                raise CorpusError(
                    f"table {self.table_id!r}: gold annotation for missing column {index}"
                )
            if vocabulary is not None:
                for label in labels:
                    if label not in vocabulary:
                        raise CorpusError(
                            f"table {self.table_id!r}: unknown label {label!r} "
                            f"on column {index}"
                        )


@dataclass
class Corpus:
    """An immutable-by-convention bundle of vocabulary and tables."""

    name: str
    vocabulary: Vocabulary
    tables: list[TableDoc] = field(default_factory=list)

    def __post_init__(self):
        ids = [t.table_id for t in self.tables]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise CorpusError(f"duplicate table ids: {dupes}")

    def by_id(self, table_id: str) -> TableDoc:
        for table in self.tables:
            if table.table_id == table_id:
                return table
        raise KeyError(table_id)

    def split(self, name: str) -> list[TableDoc]:
        return [t for t in self.tables if t.split == name]

    def validate(self):
        for table in self.tables:
            table.validate(self.vocabulary)


def load_corpus(path: str | Path) -> Corpus:
    """Load and validate a corpus directory."""
    root = Path(path)
    vocab_file = root / "vocabulary.json"
    ann_file = root / "annotations.jsonl"
    splits_file = root / "splits.json"
    for required in (vocab_file, ann_file, splits_file):
        if not required.exists():
            raise CorpusError(f"missing corpus file: {required}")

    vocab_raw = _read_json(vocab_file)
    vocabulary = Vocabulary(
        labels=tuple(vocab_raw["labels"]),
        hierarchy=frozenset((c, p) for c, p in vocab_raw.get("hierarchy", [])),
        multi_label=bool(vocab_raw.get("multi_label", False)),
    )
    splits = _read_json(splits_file)

    tables = []
    with ann_file.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{ann_file}:{lineno}: malformed JSON: {exc}") from exc
            table_id = record.get("table_id")
            if not table_id:
                raise CorpusError(f"{ann_file}:{lineno}: record without table_id")
            csv_file = root / "tables" / f"{table_id}.csv"
            if not csv_file.exists():
                raise CorpusError(f"{ann_file}:{lineno}: missing table file {csv_file}")
            with csv_file.open(encoding="utf-8", newline="") as grid_handle:
                cells = [list(row) for row in csv.reader(grid_handle)]
            if table_id not in splits:
                raise CorpusError(f"{splits_file}: no split assigned to table {table_id!r}")
            table = TableDoc(
                table_id=table_id,
                cells=cells,
                column_roles=list(record["column_roles"]),
                gold={int(k): tuple(v) for k, v in record.get("gold", {}).items()},
                domain=record.get("domain", ""),
                split=splits[table_id],
                original_headers=record.get("original_headers"),
                excluded_columns=frozenset(record.get("excluded_columns", [])),
            )
            try:
                table.validate(vocabulary)
            except CorpusError as exc:
                raise CorpusError(f"{ann_file}:{lineno}: {exc}") from exc
            tables.append(table)

    return Corpus(name=root.name, vocabulary=vocabulary, tables=tables)


def save_corpus(corpus: Corpus, path: str | Path):
    """Write a corpus directory in the neutral format (load round-trips)."""
    root = Path(path)
    (root / "tables").mkdir(parents=True, exist_ok=True)
    vocab = {
        "labels": list(corpus.vocabulary.labels),
        "hierarchy": sorted([c, p] for c, p in corpus.vocabulary.hierarchy),
        "multi_label": corpus.vocabulary.multi_label,
    }
    _write_json(root / "vocabulary.json", vocab)
    _write_json(root / "splits.json", {t.table_id: t.split for t in corpus.tables})
    with (root / "annotations.jsonl").open("w", encoding="utf-8", newline="\n") as handle:
        for table in corpus.tables:
            record = {
                "table_id": table.table_id,
                "column_roles": table.column_roles,
                "gold": {str(k): list(v) for k, v in sorted(table.gold.items())},
                "domain": table.domain,
            }
            if table.original_headers is not None:
                record["original_headers"] = table.original_headers
            if table.excluded_columns:
                record["excluded_columns"] = sorted(table.excluded_columns)
            handle.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
    for table in corpus.tables:
        with (root / "tables" / f"{table.table_id}.csv").open(
            "w", encoding="utf-8", newline=""
        ) as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerows(table.cells)


def filter_domains(corpus: Corpus, domains: set[str]) -> Corpus:
    """Keep only tables whose domain tag is in ``domains``.

    The vocabulary is restricted to labels that still occur. An empty result
    is allowed (callers get an empty corpus, not an error).
    """
    if not domains:
        raise ValueError("domains must be non-empty")
    kept = [t for t in corpus.tables if t.domain in domains]
    surviving = {label for table in kept for labels in table.gold.values() for label in labels}
    vocabulary = Vocabulary(
        labels=tuple(l for l in corpus.vocabulary.labels if l in surviving),
        hierarchy=frozenset(
            (c, p) for c, p in corpus.vocabulary.hierarchy if c in surviving and p in surviving
        ),
        multi_label=corpus.vocabulary.multi_label,
    )
    return Corpus(name=corpus.name, vocabulary=vocabulary, tables=kept)


def downsample(corpus: Corpus, max_columns_per_label: int = 20, seed: int = 0) -> Corpus:
    """Cap the number of annotated train-split columns per label.

    Annotated train columns are visited in a seeded random order; a column is
    kept while every one of its gold labels is still under the cap (so in
    multi-label corpora a column counts toward the cap of each of its labels).
    Columns over the cap stay in their table with gold intact but are marked
    excluded from training. A table survives if any target column survives.
    Validation/test splits pass through untouched.
    """
    if max_columns_per_label < 1:
        raise ValueError("max_columns_per_label must be >= 1")
    candidates = [
        (table.table_id, index)
        for table in corpus.split("train")
        for index in table.training_columns()
    ]
    rng = random.Random(seed)
    rng.shuffle(candidates)

    tally: dict[str, int] = {label: 0 for label in corpus.vocabulary.labels}
    kept_columns: set[tuple[str, int]] = set()
    table_index = {t.table_id: t for t in corpus.tables}
    for table_id, index in candidates:
        labels = table_index[table_id].gold[index]
        if all(tally[label] < max_columns_per_label for label in labels):
            kept_columns.add((table_id, index))
            for label in labels:
                tally[label] += 1

    tables = []
    for table in corpus.tables:
        if table.split != "train":
            tables.append(table)
            continue
        excluded = frozenset(
            index
            for index in table.target_columns()
            if (table.table_id, index) not in kept_columns
        ) | table.excluded_columns
        if len(excluded) == len(table.target_columns()):
            continue
        tables.append(replace(table, excluded_columns=excluded))
    return Corpus(name=corpus.name, vocabulary=corpus.vocabulary, tables=tables)


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: malformed JSON: {exc}") from exc


def _write_json(path: Path, payload):
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
