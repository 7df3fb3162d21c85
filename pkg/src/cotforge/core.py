"""Shared data model, stable content-hash IDs, and JSONL (de)serialization.

Every pipeline stage exchanges data through these types. All record types are
frozen dataclasses: immutable after construction and safe to share between
workers. IDs are content hashes, never sequence numbers, so stages can run
resumably and in parallel without nondeterministic numbering.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator

SCHEMA_VERSION = "cotforge/1"

DEFAULT_MAX_TURNS = 3


class DomainTag(str, Enum):
    TARGET = "target"
    GENERAL = "general"


class TaskType(str, Enum):
    OPEN_ENDED = "open_ended"
    MATH_REASONING = "math_reasoning"
    CREATIVE_WRITING = "creative_writing"
    MULTIPLE_CHOICE = "multiple_choice"


class LineageStage(str, Enum):
    GENERATED = "generated"
    EXPANDED = "expanded"
    INGESTED = "ingested"


class ModificationKind(str, Enum):
    ADD_CONTEXT = "add_context"
    CONVERT_FORMAT_STYLE = "convert_format_style"
    ELABORATE_SPECIFIC_CASE = "elaborate_specific_case"
    REWRITE_RELATED_TOPIC = "rewrite_related_topic"


class SampleSource(str, Enum):
    SYNTHESIZED = "synthesized"
    INGESTED = "ingested"


class Role(str, Enum):
    USER = "user"
    ASSISTANT = "assistant"


def canonical_json(obj: Any) -> str:
    """One canonical text form: sorted keys, no insignificant whitespace."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def compute_id(payload: bytes) -> str:
    """128-bit content hash of a canonical byte serialization, as 32 hex chars.

    Deterministic across machines and runs; collision-resistant far beyond
    dataset scale.
    """
    return hashlib.blake2b(payload, digest_size=16).hexdigest()


def _id_of(fields: dict[str, Any]) -> str:
    # None-valued fields are omitted so that "absent" has one canonical form.
    present = {k: v for k, v in fields.items() if v is not None}
    return compute_id(canonical_json(present).encode("utf-8"))


@dataclass(frozen=True)
class TopicNode:
    """A seed or sub-topic word with its domain tag and lineage."""

    text: str
    domain_tag: DomainTag
    parent_id: str | None = None
    depth: int = 0
    id: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("topic text must be non-empty")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if (self.depth == 0) != (self.parent_id is None):
            raise ValueError("depth 0 iff parent_id absent (seed word)")
        object.__setattr__(self, "domain_tag", DomainTag(self.domain_tag))
        object.__setattr__(self, "id", self._compute_id())

    def _compute_id(self) -> str:
        return _id_of(
            {
                "text": self.text,
                "domain_tag": self.domain_tag.value,
                "parent_id": self.parent_id,
            }
        )

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "id": self.id,
            "text": self.text,
            "domain_tag": self.domain_tag.value,
            "depth": self.depth,
        }
        if self.parent_id is not None:
            d["parent_id"] = self.parent_id
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TopicNode":
        return cls(
            text=d["text"],
            domain_tag=DomainTag(d["domain_tag"]),
            parent_id=d.get("parent_id"),
            depth=int(d.get("depth", 0)),
        )


@dataclass(frozen=True)
class LineageEntry:
    """One provenance step of an instruction: where it came from and how."""

    stage: LineageStage
    modification: ModificationKind | None = None
    parent_instruction_id: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage", LineageStage(self.stage))
        if self.modification is not None:
            object.__setattr__(self, "modification", ModificationKind(self.modification))
        if self.stage is LineageStage.EXPANDED and self.parent_instruction_id is None:
            raise ValueError("expanded lineage entry requires parent_instruction_id")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"stage": self.stage.value}
        if self.modification is not None:
            d["modification"] = self.modification.value
        if self.parent_instruction_id is not None:
            d["parent_instruction_id"] = self.parent_instruction_id
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LineageEntry":
        return cls(
            stage=LineageStage(d["stage"]),
            modification=ModificationKind(d["modification"]) if d.get("modification") else None,
            parent_instruction_id=d.get("parent_instruction_id"),
        )


@dataclass(frozen=True)
class InstructionRecord:
    """One instruction with task type, provenance chain, and stable ID."""

    text: str
    task_type: TaskType
    topic_id: str
    lineage: tuple[LineageEntry, ...]
    id: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("instruction text must be non-empty")
        object.__setattr__(self, "task_type", TaskType(self.task_type))
        object.__setattr__(self, "lineage", tuple(self.lineage))
        if not self.lineage:
            raise ValueError("lineage must have at least one entry")
        object.__setattr__(self, "id", self._compute_id())

    def _compute_id(self) -> str:
        return _id_of(
            {
                "text": self.text,
                "task_type": self.task_type.value,
                "topic_id": self.topic_id,
                "lineage": [e.to_dict() for e in self.lineage],
            }
        )

    @property
    def stage(self) -> LineageStage:
        return self.lineage[-1].stage

    @property
    def is_ingested(self) -> bool:
        return self.lineage[0].stage is LineageStage.INGESTED

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "task_type": self.task_type.value,
            "topic_id": self.topic_id,
            "lineage": [e.to_dict() for e in self.lineage],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "InstructionRecord":
        return cls(
            text=d["text"],
            task_type=TaskType(d["task_type"]),
            topic_id=d["topic_id"],
            lineage=tuple(LineageEntry.from_dict(e) for e in d["lineage"]),
        )


@dataclass(frozen=True)
class Turn:
    """One message of a conversation. Only assistant turns carry reasoning."""

    role: Role
    content: str
    reasoning: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", Role(self.role))
        if self.role is Role.USER and self.reasoning is not None:
            raise ValueError("user turns carry no reasoning")
        if self.role is Role.ASSISTANT and self.reasoning is None:
            # Empty string is tolerated for ingested legacy data; absence is not.
            raise ValueError("assistant turns must carry reasoning (may be empty)")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"role": self.role.value, "content": self.content}
        if self.reasoning is not None:
            d["reasoning"] = self.reasoning
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Turn":
        return cls(role=Role(d["role"]), content=d["content"], reasoning=d.get("reasoning"))


@dataclass(frozen=True)
class ConversationSample:
    """Ordered user/assistant turns; the unit of SFT data.

    Turn alternation and role shape are rejected here, at construction, so
    malformed conversations never reach downstream stages. Use ``build`` to
    also enforce that the first turn equals its source instruction verbatim.
    """

    source: SampleSource
    instruction_id: str
    turns: tuple[Turn, ...]
    id: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "source", SampleSource(self.source))
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.turns:
            raise ValueError("sample must have at least one turn")
        for i, turn in enumerate(self.turns):
            expected = Role.USER if i % 2 == 0 else Role.ASSISTANT
            if turn.role is not expected:
                raise ValueError(f"turn {i} must have role {expected.value}")
        if self.source is SampleSource.INGESTED and self.user_turn_count != 1:
            raise ValueError("ingested samples are single-turn")
        object.__setattr__(self, "id", self._compute_id())

    def _compute_id(self) -> str:
        return _id_of(
            {
                "source": self.source.value,
                "instruction_id": self.instruction_id,
                "turns": [t.to_dict() for t in self.turns],
            }
        )

    @property
    def user_turn_count(self) -> int:
        return sum(1 for t in self.turns if t.role is Role.USER)

    @classmethod
    def build(
        cls,
        instruction: InstructionRecord,
        turns: Iterable[Turn],
        source: SampleSource = SampleSource.SYNTHESIZED,
        max_turns: int = DEFAULT_MAX_TURNS,
    ) -> "ConversationSample":
        """Construct a sample bound to its source instruction.

        Raises ValueError if the first turn does not equal the instruction
        text verbatim or the user-turn count exceeds ``max_turns``.
        """
        turns = tuple(turns)
        if not turns or turns[0].content != instruction.text:
            raise ValueError("first turn must equal the source instruction text verbatim")
        sample = cls(source=source, instruction_id=instruction.id, turns=turns)
        if sample.user_turn_count > max_turns:
            raise ValueError(f"user-turn count {sample.user_turn_count} exceeds max_turns {max_turns}")
        return sample

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "source": self.source.value,
            "instruction_id": self.instruction_id,
            "turns": [t.to_dict() for t in self.turns],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ConversationSample":
        return cls(
            source=SampleSource(d["source"]),
            instruction_id=d["instruction_id"],
            turns=tuple(Turn.from_dict(t) for t in d["turns"]),
        )


@dataclass(frozen=True)
class TokenStats:
    """Per-sample token counts, split by who produced them."""

    user_tokens: int
    assistant_tokens: int
    reasoning_tokens: int
    total_tokens: int

    def __post_init__(self) -> None:
        for name in ("user_tokens", "assistant_tokens", "reasoning_tokens", "total_tokens"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.total_tokens != self.user_tokens + self.assistant_tokens + self.reasoning_tokens:
            raise ValueError("total_tokens must equal the sum of the parts")

    @classmethod
    def from_sample(cls, sample: ConversationSample, tokenizer) -> "TokenStats":
        user = assistant = reasoning = 0
        for turn in sample.turns:
            if turn.role is Role.USER:
                user += tokenizer.count(turn.content)
            else:
                assistant += tokenizer.count(turn.content)
                reasoning += tokenizer.count(turn.reasoning or "")
        return cls(user, assistant, reasoning, user + assistant + reasoning)

    def to_dict(self) -> dict[str, Any]:
        return {
            "user_tokens": self.user_tokens,
            "assistant_tokens": self.assistant_tokens,
            "reasoning_tokens": self.reasoning_tokens,
            "total_tokens": self.total_tokens,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TokenStats":
        return cls(
            user_tokens=int(d["user_tokens"]),
            assistant_tokens=int(d["assistant_tokens"]),
            reasoning_tokens=int(d["reasoning_tokens"]),
            total_tokens=int(d["total_tokens"]),
        )


class JsonlError(Exception):
    """A malformed JSONL line, carrying its line number and byte offset."""

    def __init__(self, path: str | Path, line: int, byte_offset: int, reason: str):
        self.path = str(path)
        self.line = line
        self.byte_offset = byte_offset
        self.reason = reason
        super().__init__(f"{self.path}: line {line} (byte offset {byte_offset}): {reason}")


def read_jsonl(path: str | Path, model: type | None = None) -> Iterator[Any]:
    """Stream records from a JSONL file, one object per line, UTF-8.

    With ``model`` set, each line is parsed into that type via ``from_dict``;
    otherwise plain dicts are yielded (the ``schema`` key is left in place).
    """
    offset = 0
    with open(path, "rb") as fh:
        for line_no, raw in enumerate(fh, start=1):
            stripped = raw.strip()
            if stripped:
                try:
                    record = json.loads(stripped.decode("utf-8"))
                except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                    raise JsonlError(path, line_no, offset, str(exc)) from exc
                if not isinstance(record, dict):
                    raise JsonlError(path, line_no, offset, "line is not a JSON object")
                yield model.from_dict(record) if model is not None else record
            offset += len(raw)


def write_jsonl(records: Iterable[Any], path: str | Path) -> int:
    """Write records as canonical JSONL; returns the record count.

    Records may be dicts or any object with ``to_dict``. Every line carries
    the ``schema`` version field. The file is written to a temp path and
    atomically renamed, so partial outputs are never left behind.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for record in records:
                d = record.to_dict() if hasattr(record, "to_dict") else dict(record)
                d.setdefault("schema", SCHEMA_VERSION)
                fh.write(canonical_json(d))
                fh.write("\n")
                count += 1
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise
    return count
