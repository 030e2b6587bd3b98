"""Phase-tagged token accounting, dollar costing and breakeven analysis.

Dollar amounts are exact decimals (``Decimal``), never binary floats, so
report arithmetic is drift-free.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_CEILING, Decimal
from pathlib import Path
from typing import Iterable, Sequence

PHASES = ("generation", "inference", "finetune")

MILLION = Decimal(1_000_000)


@dataclass(frozen=True)
class UsageEntry:
    phase: str  # generation | inference | finetune
    input_tokens: int
    output_tokens: int
    model_id: str = ""
    estimated: bool = False
    run_id: str = ""

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be >= 0")

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "model_id": self.model_id,
            "estimated": self.estimated,
            "run_id": self.run_id,
        }


@dataclass(frozen=True)
class PriceSheet:
    """Per-million-token prices in dollars."""

    input_per_million: Decimal = Decimal("0")
    output_per_million: Decimal = Decimal("0")
    training_per_million: Decimal = Decimal("0")
    finetuned_input_per_million: Decimal = Decimal("0")
    effective_date: str = ""

    @classmethod
    def from_dict(cls, raw: dict) -> "PriceSheet":
        return cls(
            input_per_million=Decimal(str(raw.get("input_per_million", 0))),
            output_per_million=Decimal(str(raw.get("output_per_million", 0))),
            training_per_million=Decimal(str(raw.get("training_per_million", 0))),
            finetuned_input_per_million=Decimal(
                str(raw.get("finetuned_input_per_million", 0))
            ),
            effective_date=str(raw.get("effective_date", "")),
        )

    @classmethod
    def load(cls, path: str | Path) -> "PriceSheet":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class CostBreakdown:
    by_phase: dict[str, Decimal]

    @property
    def total(self) -> Decimal:
        return sum(self.by_phase.values(), Decimal("0"))

    def to_dict(self) -> dict:
        payload = {phase: str(amount) for phase, amount in sorted(self.by_phase.items())}
        payload["total"] = str(self.total)
        return payload


def total_cost(entries: Iterable[UsageEntry], prices: PriceSheet) -> CostBreakdown:
    """Dollar cost per phase.

    Generation and inference bill input tokens at the input price and output
    tokens at the output price; finetune entries bill input tokens at the
    training price (training output is not a billable concept).
    """
    by_phase = {phase: Decimal("0") for phase in PHASES}
    for entry in entries:
        tokens_in = Decimal(entry.input_tokens)
        tokens_out = Decimal(entry.output_tokens)
        if entry.phase == "finetune":
            by_phase["finetune"] += tokens_in * prices.training_per_million / MILLION
        else:
            by_phase[entry.phase] += (
                tokens_in * prices.input_per_million / MILLION
                + tokens_out * prices.output_per_million / MILLION
            )
    return CostBreakdown(by_phase=by_phase)


def cost_per_column(
    entries: Iterable[UsageEntry],
    prices: PriceSheet,
    n_columns: int,
    phase: str = "inference",
) -> Decimal:
    if n_columns < 1:
        raise ValueError("n_columns must be >= 1")
    return total_cost(entries, prices).by_phase[phase] / Decimal(n_columns)


@dataclass(frozen=True)
class BreakevenResult:
    # smallest N from which method B stays the cheaper option, or None when
    # the cost lines never cross for N > 0
    columns: int | None
    # one side is cheaper from the start (no meaningful crossing point)
    dominated: bool = False


def breakeven_columns(
    fixed_a: Decimal | float | str,
    per_col_a: Decimal | float | str,
    fixed_b: Decimal | float | str,
    per_col_b: Decimal | float | str,
) -> BreakevenResult:
    """Smallest N with fixed_a + N*per_col_a >= fixed_b + N*per_col_b.

    Only meaningful when per_col_a > per_col_b (B trades a fixed cost for a
    cheaper margin). Parallel or diverging lines yield ``columns=None``.
    """
    fa, pa = Decimal(str(fixed_a)), Decimal(str(per_col_a))
    fb, pb = Decimal(str(fixed_b)), Decimal(str(per_col_b))
    if pa <= pb:
        # B never wins on the margin, so it never becomes the cheaper
        # long-run option.
        return BreakevenResult(columns=None, dominated=pa < pb or fa > fb)
    n = ((fb - fa) / (pa - pb)).to_integral_value(rounding=ROUND_CEILING)
    if n < 1:
        return BreakevenResult(columns=1, dominated=True)
    return BreakevenResult(columns=int(n))


def write_usage(entries: Sequence[UsageEntry], path: str | Path):
    with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
        for entry in entries:
            handle.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")


def read_usage(path: str | Path) -> list[UsageEntry]:
    entries = []
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                entries.append(UsageEntry(**json.loads(line)))
    return entries
