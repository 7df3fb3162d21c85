"""Adapters that pull question-only seeds from external instruction datasets.

Sources are pure configuration: a file path, a field selector for the
question text, and the task type to assign. Extracted questions enter the
pipeline at the filtering stage as ordinary instruction records, carrying an
ingested lineage marker; their downstream dialogues are forced single-turn
and their responses are regenerated rather than reused.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterator

from .core import (
    DomainTag,
    InstructionRecord,
    JsonlError,
    LineageEntry,
    LineageStage,
    TaskType,
    TopicNode,
    read_jsonl,
)
from .synthesis import StageReport

logger = logging.getLogger(__name__)


class CategoryTag(str, Enum):
    MATH = "math"
    INSTRUCTION_FOLLOWING = "instruction_following"
    OTHER = "other"


@dataclass(frozen=True)
class IngestSource:
    name: str
    path: str
    question_field_path: str
    task_type: TaskType
    category_tag: CategoryTag = CategoryTag.OTHER
    max_records: int | None = None  # cap on extracted questions; None = uncapped

    def __post_init__(self) -> None:
        object.__setattr__(self, "task_type", TaskType(self.task_type))
        object.__setattr__(self, "category_tag", CategoryTag(self.category_tag))
        if not self.name:
            raise ValueError("source name must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "name": self.name,
            "path": self.path,
            "question_field_path": self.question_field_path,
            "task_type": self.task_type.value,
            "category_tag": self.category_tag.value,
        }
        if self.max_records is not None:
            d["max_records"] = self.max_records
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "IngestSource":
        return cls(
            name=d["name"],
            path=d["path"],
            question_field_path=d["question_field_path"],
            task_type=TaskType(d["task_type"]),
            category_tag=CategoryTag(d.get("category_tag", "other")),
            max_records=d.get("max_records"),
        )


_SELECTOR_RX = re.compile(r"([^.\[\]]+)|\[(\d+)\]")


def resolve_field(obj: Any, selector: str) -> Any:
    """Follow a dot-separated path with optional array indices, e.g. ``turns[0].text``.

    Raises KeyError/IndexError/TypeError when the path does not resolve.
    """
    pos = 0
    for match in _SELECTOR_RX.finditer(selector):
        if match.start() != pos:
            raise KeyError(f"malformed selector {selector!r}")
        pos = match.end()
        if pos < len(selector) and selector[pos] == ".":
            pos += 1
        name, index = match.group(1), match.group(2)
        if name is not None:
            if not isinstance(obj, dict):
                raise TypeError(f"cannot select {name!r} from non-object")
            obj = obj[name]
        else:
            if not isinstance(obj, list):
                raise TypeError(f"cannot index non-array with [{index}]")
            obj = obj[int(index)]
    if pos != len(selector):
        raise KeyError(f"malformed selector {selector!r}")
    return obj


def _iter_source_records(path: Path) -> Iterator[dict[str, Any]]:
    # Either JSONL or a single top-level JSON array of objects.
    with open(path, "rb") as fh:
        head = fh.read(64).lstrip()
    if head.startswith(b"["):
        records = json.loads(path.read_text(encoding="utf-8"))
        for record in records:
            if isinstance(record, dict):
                yield record
    else:
        yield from read_jsonl(path)


def source_topic(source: IngestSource) -> TopicNode:
    """The synthetic topic node that ingested records hang off for lineage."""
    return TopicNode(text=f"ingest:{source.name}", domain_tag=DomainTag.GENERAL, depth=0)


def extract_questions(
    source: IngestSource,
    report: StageReport | None = None,
) -> tuple[TopicNode, list[InstructionRecord]]:
    """Extract question texts from one source file.

    Question text is used byte-identically; records whose selector does not
    resolve to a string are skipped and counted. An unreadable file is a
    stage error.
    """
    path = Path(source.path)
    if not path.exists():
        raise FileNotFoundError(f"ingest source {source.name!r}: no such file {source.path}")
    topic = source_topic(source)
    records: list[InstructionRecord] = []
    read = 0
    skipped: dict[str, int] = {}

    def skip(reason: str) -> None:
        skipped[reason] = skipped.get(reason, 0) + 1

    try:
        for raw in _iter_source_records(path):
            read += 1
            try:
                value = resolve_field(raw, source.question_field_path)
            except (KeyError, IndexError, TypeError):
                skip("missing_field")
                continue
            if not isinstance(value, str) or not value:
                skip("not_a_string" if not isinstance(value, str) else "empty_field")
                continue
            records.append(
                InstructionRecord(
                    text=value,
                    task_type=source.task_type,
                    topic_id=topic.id,
                    lineage=(LineageEntry(stage=LineageStage.INGESTED),),
                )
            )
            if source.max_records is not None and len(records) >= source.max_records:
                break
    except (JsonlError, json.JSONDecodeError) as exc:
        raise ValueError(f"ingest source {source.name!r}: unreadable file: {exc}") from exc

    if report is not None:
        report.input_count += read
        report.output_count += len(records)
        for reason, n in skipped.items():
            report.drop(reason, n)
        per_source = report.extra.setdefault("per_source", {})
        per_source[source.name] = {"read": read, "extracted": len(records), "skipped": skipped}
    logger.info("ingested %d/%d questions from %s", len(records), read, source.name)
    return topic, records
