"""Render a table as the markdown block embedded in prompts."""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import TableDoc

_WHITESPACE = str.maketrans({"\n": " ", "\r": " ", "\t": " "})


@dataclass(frozen=True)
class SerializationOptions:
    max_rows: int = 5
    max_words_per_cell: int = 20
    mask_headers: bool = True
    include_context_columns: bool = True

    def __post_init__(self):
        if self.max_rows < 1:
            raise ValueError("max_rows must be >= 1")
        if self.max_words_per_cell < 1:
            raise ValueError("max_words_per_cell must be >= 1")


def clean_cell(text: str, max_words: int) -> str:
    """Flatten newlines, escape pipes, keep the first ``max_words`` words."""
    flat = text.translate(_WHITESPACE)
    words = flat.split()
    return " ".join(words[:max_words]).replace("|", "\\|")


def column_name(table: TableDoc, index: int, mask_headers: bool) -> str:
    """Prompt-facing name of a column; 1-based across all columns."""
    if not mask_headers and table.original_headers:
        return table.original_headers[index]
    return f"Column {index + 1}"


def serialize_table(
    table: TableDoc, opts: SerializationOptions = SerializationOptions()
) -> str:
    """Markdown pipe-table: masked header row, dashes, first rows only.

    Columns keep their original 1-based numbers even when context columns
    are left out, so response keys always address the same column.
    """
    if opts.include_context_columns:
        columns = list(range(table.n_columns))
    else:
        columns = table.target_columns()
    header = [column_name(table, i, opts.mask_headers) for i in columns]
    lines = [
        "| " + " | ".join(header) + " |",
        "| " + " | ".join("---" for _ in columns) + " |",
    ]
    for row in table.cells[: opts.max_rows]:
        cells = [clean_cell(row[i], opts.max_words_per_cell) for i in columns]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def column_excerpt(
    table: TableDoc,
    index: int,
    max_cells: int = 5,
    max_words_per_cell: int = 20,
) -> str:
    """Short comma-joined sample of a column's values for error prompts."""
    values = [clean_cell(v, max_words_per_cell) for v in table.column_values(index)[:max_cells]]
    return ", ".join(values)
