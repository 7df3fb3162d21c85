"""Synthesis stages: sub-topic expansion, typed instruction generation,
instruction expansion/modification, and multi-turn dialogue generation.

Prompt templates are data, not code: plain UTF-8 files with ``{placeholder}``
slots, shipped with documented defaults and overridable per run. All stages
are embarrassingly parallel over their inputs and emit output in input order,
so a fixed scripted provider makes the whole stage byte-deterministic.
"""

from __future__ import annotations

import logging
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

from .core import (
    DEFAULT_MAX_TURNS,
    ConversationSample,
    DomainTag,
    InstructionRecord,
    LineageEntry,
    LineageStage,
    ModificationKind,
    Role,
    SampleSource,
    TaskType,
    TopicNode,
    Turn,
)
from .provider import (
    ChatRequest,
    Provider,
    ProviderError,
    SamplingParams,
    assistant,
    run_ordered,
    system,
    user,
)

logger = logging.getLogger(__name__)

END_OF_DIALOGUE_SENTINEL = "<NO_FOLLOWUP>"

GENERATION_TEMPLATES = {
    TaskType.OPEN_ENDED: "generate_open_ended",
    TaskType.MATH_REASONING: "generate_math_reasoning",
    TaskType.CREATIVE_WRITING: "generate_creative_writing",
    TaskType.MULTIPLE_CHOICE: "generate_multiple_choice",
}


class SynthesisError(Exception):
    pass


def load_template(name: str, templates_dir: str | Path | None = None) -> str:
    """Load ``<name>.txt`` from ``templates_dir``, falling back to the packaged defaults."""
    if templates_dir is not None:
        candidate = Path(templates_dir) / f"{name}.txt"
        if candidate.exists():
            return candidate.read_text(encoding="utf-8")
    return resources.files("cotforge.templates").joinpath(f"{name}.txt").read_text(encoding="utf-8")


def render_template(template: str, **slots: str) -> str:
    # Plain replacement, not str.format: template bodies may legitimately
    # contain literal braces.
    out = template
    for key, value in slots.items():
        out = out.replace("{" + key + "}", str(value))
    return out


def normalize_topic_text(text: str) -> str:
    """Dedup key for sub-topics: NFKC, case fold, collapsed whitespace."""
    folded = unicodedata.normalize("NFKC", text).casefold()
    return " ".join(folded.split())


def parse_list_output(content: str) -> list[str]:
    """Parse a model's list reply: numbered/bulleted lines, or one comma-separated line."""
    lines = [ln.strip() for ln in content.splitlines() if ln.strip()]
    if len(lines) == 1 and ("," in lines[0] or "、" in lines[0]):
        parts = lines[0].replace("、", ",").split(",")
        return [p.strip() for p in parts if p.strip()]
    items = []
    for line in lines:
        items.append(_strip_list_marker(line))
    return [it for it in items if it]


def _strip_list_marker(line: str) -> str:
    stripped = line.lstrip("-*• \t")
    head, _, rest = stripped.partition(" ")
    if head.rstrip(".)").isdigit() and head != stripped:
        return rest.strip()
    return stripped.strip()


@dataclass(frozen=True)
class GenerationPlan:
    """Per-stage generation counts. Defaults mirror the standard pipeline setup."""

    per_subtopic_counts: dict[TaskType, int] = field(
        default_factory=lambda: {
            TaskType.OPEN_ENDED: 10,
            TaskType.MATH_REASONING: 10,
            TaskType.CREATIVE_WRITING: 10,
            TaskType.MULTIPLE_CHOICE: 8,
        }
    )
    expansion_variants: dict[TaskType, int] = field(
        default_factory=lambda: {
            TaskType.OPEN_ENDED: 5,
            TaskType.MATH_REASONING: 5,
            TaskType.CREATIVE_WRITING: 5,
            TaskType.MULTIPLE_CHOICE: 3,
        }
    )
    max_turns: int = DEFAULT_MAX_TURNS
    target_seed_count: int = 135  # reference seed-list sizes, not enforced
    general_seed_count: int = 20

    def __post_init__(self) -> None:
        for task in TaskType:
            if self.per_subtopic_counts.get(task, 0) < 1 or self.expansion_variants.get(task, 0) < 1:
                raise ValueError(f"plan counts for {task.value} must be >= 1")
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")

    @property
    def requested_per_subtopic(self) -> int:
        return sum(self.per_subtopic_counts[t] for t in TaskType)

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_subtopic_counts": {t.value: self.per_subtopic_counts[t] for t in TaskType},
            "expansion_variants": {t.value: self.expansion_variants[t] for t in TaskType},
            "max_turns": self.max_turns,
            "seed_counts": {"target": self.target_seed_count, "general": self.general_seed_count},
        }


@dataclass
class StageReport:
    """Input/output accounting for one stage; reasons map drop cause to count."""

    stage: str
    input_count: int = 0
    output_count: int = 0
    dropped: int = 0
    reasons: dict[str, int] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    def drop(self, reason: str, n: int = 1) -> None:
        self.dropped += n
        self.reasons[reason] = self.reasons.get(reason, 0) + n

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "stage": self.stage,
            "input_count": self.input_count,
            "output_count": self.output_count,
            "dropped": self.dropped,
            "reasons": dict(sorted(self.reasons.items())),
        }
        d.update(self.extra)
        return d


def _chat(provider: Provider, messages, sampling: SamplingParams) -> str:
    response = provider.complete(ChatRequest(messages=tuple(messages), sampling=sampling))
    return response.content


def expand_topics(
    seeds: Iterable[TopicNode],
    provider: Provider,
    fanout: int,
    templates_dir: str | Path | None = None,
    sampling: SamplingParams = SamplingParams(),
    max_workers: int = 1,
    report: StageReport | None = None,
) -> list[TopicNode]:
    """Generate depth-1 sub-topic nodes for each seed word.

    Sub-topics inherit the parent's domain tag and are deduplicated per
    parent on normalized text. Provider errors propagate with the offending
    seed id attached.
    """
    if fanout < 1:
        raise ValueError("fanout must be >= 1")
    seeds = list(seeds)
    for seed in seeds:
        if seed.depth != 0:
            raise ValueError(f"seed {seed.id} has depth {seed.depth}; seeds must have depth 0")
    template = load_template("topic_expansion", templates_dir)

    def one(seed: TopicNode) -> list[TopicNode]:
        prompt = render_template(template, domain=seed.domain_tag.value, fanout=fanout, topic=seed.text)
        try:
            content = _chat(provider, [user(prompt)], sampling)
        except ProviderError as exc:
            raise SynthesisError(f"topic expansion failed for seed {seed.id} ({seed.text!r}): {exc}") from exc
        nodes: list[TopicNode] = []
        seen: set[str] = set()
        for text in parse_list_output(content):
            key = normalize_topic_text(text)
            if not key or key in seen:
                continue
            seen.add(key)
            nodes.append(TopicNode(text=text, domain_tag=seed.domain_tag, parent_id=seed.id, depth=1))
        return nodes

    expanded = run_ordered(one, seeds, max_workers)
    out = [node for batch in expanded for node in batch]
    if report is not None:
        report.input_count = len(seeds)
        report.output_count = len(out)
    return out


def generate_instructions(
    topics: Iterable[TopicNode],
    plan: GenerationPlan,
    provider: Provider,
    templates_dir: str | Path | None = None,
    sampling: SamplingParams = SamplingParams(),
    max_workers: int = 1,
    report: StageReport | None = None,
) -> list[InstructionRecord]:
    """Generate instructions of every task type for each sub-topic.

    Per sub-topic and task type, exactly ``plan.per_subtopic_counts[type]``
    records are requested; a batch whose output cannot be parsed is skipped
    and counted, and the pipeline continues.
    """
    topics = list(topics)
    if not topics:
        raise SynthesisError("no topics")
    templates = {task: load_template(name, templates_dir) for task, name in GENERATION_TEMPLATES.items()}
    batches = [(topic, task) for topic in topics for task in TaskType]

    def one(batch: tuple[TopicNode, TaskType]) -> list[InstructionRecord]:
        topic, task = batch
        count = plan.per_subtopic_counts[task]
        prompt = render_template(templates[task], count=count, topic=topic.text)
        content = _chat(provider, [user(prompt)], sampling)
        texts = parse_list_output(content)[:count]
        return [
            InstructionRecord(
                text=text,
                task_type=task,
                topic_id=topic.id,
                lineage=(LineageEntry(stage=LineageStage.GENERATED),),
            )
            for text in texts
        ]

    records: list[InstructionRecord] = []
    skipped_batches = 0
    for batch, result in zip(batches, run_ordered(one, batches, max_workers)):
        if not result:
            skipped_batches += 1
            logger.warning("unparseable generation output for topic %s / %s", batch[0].id, batch[1].value)
            continue
        records.extend(result)
    if report is not None:
        report.input_count = len(topics)
        report.output_count = len(records)
        report.extra["requested"] = len(topics) * plan.requested_per_subtopic
        if skipped_batches:
            report.drop("unparseable_generation_batch", skipped_batches)
    return records


def parse_variant_lines(content: str) -> list[tuple[ModificationKind | None, str]]:
    """Parse "[tag] text" variant lines; unknown or missing tags yield kind None."""
    variants: list[tuple[ModificationKind | None, str]] = []
    for line in content.splitlines():
        line = _strip_list_marker(line.strip())
        if not line:
            continue
        if line.startswith("["):
            tag, closed, rest = line[1:].partition("]")
            if closed:
                try:
                    kind = ModificationKind(tag.strip())
                except ValueError:
                    kind = None
                variants.append((kind, rest.strip()))
                continue
        variants.append((None, line))
    return variants


def expand_instructions(
    records: Iterable[InstructionRecord],
    plan: GenerationPlan,
    provider: Provider,
    templates_dir: str | Path | None = None,
    sampling: SamplingParams = SamplingParams(),
    max_workers: int = 1,
    report: StageReport | None = None,
) -> list[InstructionRecord]:
    """Expand each generated instruction into tagged variants.

    The model chooses the modification kind per variant and reports it in a
    tagged output format. Originals are retained in the output stream, each
    followed by its variants; unparseable variants are dropped and counted.
    """
    records = list(records)
    for record in records:
        if record.stage is not LineageStage.GENERATED:
            raise ValueError(f"record {record.id} has stage {record.stage.value}; expected generated")
    template = load_template("expand_instruction", templates_dir)

    def one(record: InstructionRecord) -> tuple[list[InstructionRecord], int]:
        count = plan.expansion_variants[record.task_type]
        prompt = render_template(template, count=count, instruction=record.text)
        content = _chat(provider, [user(prompt)], sampling)
        variants: list[InstructionRecord] = []
        bad = 0
        for kind, text in parse_variant_lines(content)[:count]:
            if kind is None or not text:
                bad += 1
                continue
            variants.append(
                InstructionRecord(
                    text=text,
                    task_type=record.task_type,
                    topic_id=record.topic_id,
                    lineage=record.lineage
                    + (
                        LineageEntry(
                            stage=LineageStage.EXPANDED,
                            modification=kind,
                            parent_instruction_id=record.id,
                        ),
                    ),
                )
            )
        return variants, bad

    out: list[InstructionRecord] = []
    dropped_variants = 0
    for record, (variants, bad) in zip(records, run_ordered(one, records, max_workers)):
        out.append(record)
        out.extend(variants)
        dropped_variants += bad
    if report is not None:
        report.input_count = len(records)
        report.output_count = len(out)
        if dropped_variants:
            report.drop("variant_parse_failure", dropped_variants)
    return out


class DialogueError(SynthesisError):
    """No complete user/assistant exchange could be produced."""


def _render_transcript(turns: list[Turn]) -> str:
    lines = []
    for turn in turns:
        speaker = "User" if turn.role is Role.USER else "Assistant"
        lines.append(f"{speaker}: {turn.content}")
    return "\n".join(lines)


def generate_dialogue(
    instruction: InstructionRecord,
    plan: GenerationPlan,
    provider: Provider,
    templates_dir: str | Path | None = None,
    sampling: SamplingParams = SamplingParams(),
) -> ConversationSample:
    """Generate one conversation sample from a filtered instruction.

    The first turn is the instruction verbatim; follow-up user turns come
    from the provider acting as a simulated user until it emits the
    end-of-dialogue sentinel or ``plan.max_turns`` is reached. Ingested
    instructions are forced single-turn. A provider failure mid-dialogue
    truncates at the last complete exchange; with no complete exchange the
    sample is dropped (DialogueError).
    """
    source = SampleSource.INGESTED if instruction.is_ingested else SampleSource.SYNTHESIZED
    max_turns = 1 if source is SampleSource.INGESTED else plan.max_turns
    system_text = load_template("assistant_system", templates_dir).strip()
    followup_template = load_template("followup_user", templates_dir)

    turns: list[Turn] = []
    user_text = instruction.text
    for turn_index in range(max_turns):
        # History goes into context as plain chat messages; reasoning stays out.
        messages = [system(system_text)]
        for turn in turns:
            messages.append(user(turn.content) if turn.role is Role.USER else assistant(turn.content))
        messages.append(user(user_text))
        try:
            response = provider.complete(ChatRequest(messages=tuple(messages), sampling=sampling))
        except ProviderError as exc:
            if not turns:
                raise DialogueError(f"dialogue failed on first exchange for {instruction.id}: {exc}") from exc
            logger.warning("dialogue truncated for %s after %d turns: %s", instruction.id, len(turns) // 2, exc)
            break
        reasoning = response.reasoning or ""
        if not reasoning and source is SampleSource.SYNTHESIZED:
            if not turns:
                raise DialogueError(f"assistant response without reasoning for {instruction.id}")
            break
        turns.append(Turn(role=Role.USER, content=user_text))
        turns.append(Turn(role=Role.ASSISTANT, content=response.content, reasoning=reasoning))
        if turn_index + 1 >= max_turns:
            break
        followup_prompt = render_template(
            followup_template,
            sentinel=END_OF_DIALOGUE_SENTINEL,
            transcript=_render_transcript(turns),
        )
        try:
            followup = provider.complete(ChatRequest(messages=(user(followup_prompt),), sampling=sampling))
        except ProviderError as exc:
            logger.warning("follow-up generation failed for %s: %s", instruction.id, exc)
            break
        if END_OF_DIALOGUE_SENTINEL in followup.content:
            break
        user_text = followup.content.strip()
        if not user_text:
            break
    if not turns:
        raise DialogueError(f"no complete exchange for instruction {instruction.id}")
    return ConversationSample.build(instruction, turns, source=source, max_turns=max_turns)


def check_lineage(
    topics: Iterable[TopicNode],
    instructions: Iterable[InstructionRecord],
) -> list[str]:
    """Linker pass: verify every parent reference resolves and lineage is acyclic.

    Returns a list of human-readable problems (empty when all links resolve).
    """
    topic_ids = set()
    problems: list[str] = []
    topics = list(topics)
    instructions = list(instructions)
    for node in topics:
        topic_ids.add(node.id)
    for node in topics:
        if node.parent_id is not None and node.parent_id not in topic_ids:
            problems.append(f"topic {node.id} has unresolved parent {node.parent_id}")
    instruction_ids = {r.id for r in instructions}
    for record in instructions:
        if record.topic_id not in topic_ids:
            problems.append(f"instruction {record.id} has unresolved topic {record.topic_id}")
        for entry in record.lineage:
            if entry.parent_instruction_id is not None:
                if entry.parent_instruction_id == record.id:
                    problems.append(f"instruction {record.id} is its own lineage parent")
                elif entry.parent_instruction_id not in instruction_ids:
                    problems.append(
                        f"instruction {record.id} has unresolved parent {entry.parent_instruction_id}"
                    )
    return problems
