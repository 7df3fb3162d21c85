"""Dataset statistics: per-source token accounting and table rendering.

Token totals are tokenizer-relative; the same pluggable tokenizer used for
reasoning-length control produces them, so absolute counts depend on the
tokenizer in the config.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .core import ConversationSample, TokenStats
from .tokenizer import Tokenizer


@dataclass
class SourceStats:
    name: str
    category: str
    samples: int = 0
    user_tokens: int = 0
    assistant_tokens: int = 0
    reasoning_tokens: int = 0
    total_tokens: int = 0
    multi_turn: bool = False

    def add(self, stats: TokenStats, multi_turn: bool) -> None:
        self.samples += 1
        self.user_tokens += stats.user_tokens
        self.assistant_tokens += stats.assistant_tokens
        self.reasoning_tokens += stats.reasoning_tokens
        self.total_tokens += stats.total_tokens
        self.multi_turn = self.multi_turn or multi_turn

    @property
    def avg_user(self) -> float:
        return self.user_tokens / self.samples if self.samples else 0.0

    @property
    def avg_assistant(self) -> float:
        return self.assistant_tokens / self.samples if self.samples else 0.0

    @property
    def avg_reasoning(self) -> float:
        return self.reasoning_tokens / self.samples if self.samples else 0.0

    @property
    def avg_total(self) -> float:
        return self.total_tokens / self.samples if self.samples else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "category": self.category,
            "samples": self.samples,
            "total_tokens": self.total_tokens,
            "avg_user": self.avg_user,
            "avg_assistant": self.avg_assistant,
            "avg_reasoning": self.avg_reasoning,
            "avg_total": self.avg_total,
            "multi_turn": self.multi_turn,
        }


@dataclass
class DatasetStats:
    rows: list[SourceStats] = field(default_factory=list)

    @property
    def aggregate(self) -> SourceStats:
        # The aggregate averages are token-weighted by construction: summed
        # token counts divided by the summed sample count.
        agg = SourceStats(name="total", category="---")
        for row in self.rows:
            agg.samples += row.samples
            agg.user_tokens += row.user_tokens
            agg.assistant_tokens += row.assistant_tokens
            agg.reasoning_tokens += row.reasoning_tokens
            agg.total_tokens += row.total_tokens
            agg.multi_turn = agg.multi_turn or row.multi_turn
        return agg

    def to_dict(self) -> dict[str, Any]:
        return {"rows": [r.to_dict() for r in self.rows], "aggregate": self.aggregate.to_dict()}


def compute_stats(
    entries: Iterable[tuple[str, str, ConversationSample]],
    tokenizer: Tokenizer,
) -> DatasetStats:
    """Aggregate (source_name, category, sample) triples into per-source rows.

    Rows appear in first-seen source order; the aggregate row sums samples
    and tokens across rows.
    """
    rows: dict[str, SourceStats] = {}
    for name, category, sample in entries:
        row = rows.get(name)
        if row is None:
            row = rows[name] = SourceStats(name=name, category=category)
        row.add(TokenStats.from_sample(sample, tokenizer), multi_turn=sample.user_turn_count > 1)
    return DatasetStats(rows=list(rows.values()))


_COLUMNS = (
    "name",
    "category",
    "samples",
    "total_tokens",
    "avg_user",
    "avg_assistant",
    "avg_reasoning",
    "avg_total",
    "multi_turn",
)


def render_stats_table(stats: DatasetStats) -> str:
    """Fixed-width text table with one row per source plus the aggregate."""
    header = [
        "Dataset Name",
        "Category",
        "Samples",
        "Total Tokens",
        "Avg User",
        "Avg Assistant",
        "Avg Reasoning",
        "Avg Total",
        "Multi-turn",
    ]
    body = []
    for row in stats.rows + [stats.aggregate]:
        body.append(
            [
                row.name,
                row.category,
                f"{row.samples:,}",
                f"{row.total_tokens:,}",
                f"{row.avg_user:.1f}",
                f"{row.avg_assistant:.1f}",
                f"{row.avg_reasoning:.1f}",
                f"{row.avg_total:.1f}",
                ("Yes" if row.multi_turn else "No") if row.name != "total" else "---",
            ]
        )
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) for i in range(len(header))]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(header)),
        "  ".join("-" * w for w in widths),
    ]
    for r in body:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(r))))
    return "\n".join(lines)


def write_stats_csv(stats: DatasetStats, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=_COLUMNS)
        writer.writeheader()
        for row in stats.rows + [stats.aggregate]:
            writer.writerow(row.to_dict())
