"""Quality scoring of conversation samples with a judge model.

Each sample is judged in one call (all turns in context) on five criteria
scored 1-5. The judge prompt demands a machine-readable tag line after the
free-form justification; one automatic re-ask is allowed on parse failure,
after which the sample is dropped as unjudgeable.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

from .core import ConversationSample, Role
from .provider import ChatRequest, Provider, SamplingParams, assistant, user
from .synthesis import load_template, render_template

logger = logging.getLogger(__name__)

CRITERIA = ("accuracy", "relevance", "usefulness", "reasoning_depth", "safety")

# Tag names in the judge's output line, mapped to score fields.
_TAG_FIELDS = {
    "accuracy": "accuracy",
    "relevance": "relevance",
    "usefulness": "usefulness",
    "reasoning": "reasoning_depth",
    "safety": "safety",
}


@dataclass(frozen=True)
class QualityScores:
    accuracy: int
    relevance: int
    usefulness: int
    reasoning_depth: int
    safety: int

    def __post_init__(self) -> None:
        for name in CRITERIA:
            value = getattr(self, name)
            if not isinstance(value, int) or not (1 <= value <= 5):
                raise ValueError(f"{name} must be an integer in [1, 5], got {value!r}")

    def min(self) -> int:
        return min(getattr(self, name) for name in CRITERIA)

    def mean(self) -> float:
        return sum(getattr(self, name) for name in CRITERIA) / len(CRITERIA)

    def to_dict(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in CRITERIA}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "QualityScores":
        return cls(**{name: int(d[name]) for name in CRITERIA})


class SelectionMode(str, Enum):
    ALL_MAX = "all_max"
    MEAN_THRESHOLD = "mean_threshold"


@dataclass(frozen=True)
class SelectionPolicy:
    """all_max keeps only perfect scores; mean_threshold keeps mean >= tau."""

    mode: SelectionMode = SelectionMode.ALL_MAX
    tau: float = 4.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", SelectionMode(self.mode))
        if not (1 <= self.tau <= 5):
            raise ValueError("tau must be in [1, 5]")

    def to_dict(self) -> dict[str, Any]:
        return {"mode": self.mode.value, "tau": self.tau}


def select(scores: QualityScores, policy: SelectionPolicy) -> bool:
    if policy.mode is SelectionMode.ALL_MAX:
        return scores.min() == 5
    return scores.mean() >= policy.tau


class JudgeParseError(Exception):
    def __init__(self, message: str, raw_text: str):
        self.raw_text = raw_text
        super().__init__(message)


def parse_scores(raw_text: str) -> QualityScores:
    """Extract the five scores from judge output.

    Tags may be embedded in prose; the last occurrence of each tag wins, so
    the final tag line overrides any earlier mention in the justification.
    """
    values: dict[str, int] = {}
    for tag, fieldname in _TAG_FIELDS.items():
        matches = re.findall(rf"\b{tag}\s*[:=]\s*([0-9]+)", raw_text, flags=re.IGNORECASE)
        if not matches:
            raise JudgeParseError(f"missing {tag} score in judge output", raw_text)
        values[fieldname] = int(matches[-1])
    try:
        return QualityScores(**values)
    except ValueError as exc:
        raise JudgeParseError(str(exc), raw_text) from exc


def render_judged_transcript(sample: ConversationSample, include_reasoning: bool = True) -> str:
    lines = []
    for turn in sample.turns:
        if turn.role is Role.USER:
            lines.append(f"User: {turn.content}")
        else:
            if include_reasoning and turn.reasoning:
                lines.append(f"Assistant reasoning: {turn.reasoning}")
            lines.append(f"Assistant: {turn.content}")
    return "\n".join(lines)


def raw_text_hash(raw_text: str) -> str:
    return hashlib.blake2b(raw_text.encode("utf-8"), digest_size=16).hexdigest()


def score_sample(
    sample: ConversationSample,
    provider: Provider,
    templates_dir: str | Path | None = None,
    include_reasoning: bool = True,
    sampling: SamplingParams = SamplingParams(),
) -> tuple[QualityScores, str]:
    """Judge one sample; returns the parsed scores and the raw judge text.

    On a parse failure the judge is re-asked once with its malformed reply in
    context; a second failure raises JudgeParseError and the caller drops the
    sample with reason ``judge_parse_failure``.
    """
    if len(sample.turns) < 2:
        raise ValueError("sample must contain at least one complete exchange")
    template = load_template("judge", templates_dir)
    prompt = render_template(template, transcript=render_judged_transcript(sample, include_reasoning))
    response = provider.complete(ChatRequest(messages=(user(prompt),), sampling=sampling))
    raw = response.content
    try:
        return parse_scores(raw), raw
    except JudgeParseError:
        logger.warning("judge output unparseable for sample %s; re-asking once", sample.id)
    reask = ChatRequest(
        messages=(
            user(prompt),
            assistant(raw),
            user(
                "Your score line was missing or malformed. Reply with only the score line, "
                "in exactly this format: accuracy:<n> relevance:<n> usefulness:<n> reasoning:<n> safety:<n>"
            ),
        ),
        sampling=sampling,
    )
    second = provider.complete(reask)
    combined = raw + "\n" + second.content
    return parse_scores(second.content), combined


@dataclass(frozen=True)
class JudgeDecision:
    sample_id: str
    kept: bool
    scores: QualityScores | None = None
    reason: str | None = None
    raw_text_hash: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"sample_id": self.sample_id, "kept": self.kept}
        if self.scores is not None:
            d["scores"] = self.scores.to_dict()
        if self.reason is not None:
            d["reason"] = self.reason
        if self.raw_text_hash is not None:
            d["raw_text_hash"] = self.raw_text_hash
        return d


@dataclass
class SelectionReport:
    judged: int = 0
    kept: int = 0
    dropped_low_score: int = 0
    dropped_unjudgeable: int = 0
    retention_rate: float | None = None
    per_criterion_5_rate: dict[str, float] | None = None

    @property
    def dropped(self) -> int:
        return self.dropped_low_score + self.dropped_unjudgeable

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "judged": self.judged,
            "kept": self.kept,
            "dropped": self.dropped,
            "dropped_low_score": self.dropped_low_score,
            "dropped_unjudgeable": self.dropped_unjudgeable,
        }
        if self.retention_rate is not None:
            d["retention_rate"] = self.retention_rate
        if self.per_criterion_5_rate is not None:
            d["per_criterion_5_rate"] = self.per_criterion_5_rate
        return d


def selection_report(decisions: Iterable[JudgeDecision]) -> SelectionReport:
    """Aggregate keep/drop decisions.

    Retention is kept over kept+dropped; the per-criterion rate of perfect
    scores is computed over all samples that produced scores. Parse-failure
    drops are tallied separately from score-based drops. An empty stream
    yields zero counts with the rates absent.
    """
    report = SelectionReport()
    fives = {name: 0 for name in CRITERIA}
    scored = 0
    for decision in decisions:
        if decision.kept:
            report.kept += 1
        elif decision.scores is None:
            report.dropped_unjudgeable += 1
        else:
            report.dropped_low_score += 1
        if decision.scores is not None:
            scored += 1
            for name in CRITERIA:
                if getattr(decision.scores, name) == 5:
                    fives[name] += 1
    report.judged = report.kept + report.dropped
    if report.judged:
        report.retention_rate = report.kept / report.judged
    if scored:
        report.per_criterion_5_rate = {name: fives[name] / scored for name in CRITERIA}
    return report
