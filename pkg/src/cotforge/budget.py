"""Reasoning-length control and answer-accuracy scoring.

Fixes the reasoning trace of an inference to a token budget by string
surgery: a trace that ends naturally below budget has its end token removed
and a continuation cue appended so generation resumes; a trace reaching the
budget is truncated to exactly that many tokens, after which the end token
and a finalize cue are appended and the final answer is generated anew.
Sweeping the budget grid yields accuracy-versus-budget curves for any
provider that supports prefix continuation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable

from .provider import ChatRequest, Provider, SamplingParams, run_ordered, user
from .tokenizer import Tokenizer, WhitespaceTokenizer

logger = logging.getLogger(__name__)

DEFAULT_BUDGETS = (128, 256, 512, 1024, 2048, 4096, 8192)


@dataclass(frozen=True)
class BudgetSpec:
    budgets: tuple[int, ...] = DEFAULT_BUDGETS
    continuation_text: str = "Wait,"
    finalize_text: str = "\nFinal Answer:"
    reasoning_end_token: str = "</think>"
    max_continuations: int = 8
    attempts_per_item: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "budgets", tuple(self.budgets))
        if not self.budgets or any(b <= 0 for b in self.budgets):
            raise ValueError("budgets must be positive")
        if any(b >= a for b, a in zip(self.budgets, self.budgets[1:])):
            raise ValueError("budgets must be strictly increasing")
        if self.max_continuations < 1:
            raise ValueError("max_continuations must be >= 1")
        if self.attempts_per_item < 1:
            raise ValueError("attempts_per_item must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "budgets": list(self.budgets),
            "continuation_text": self.continuation_text,
            "finalize_text": self.finalize_text,
            "reasoning_end_token": self.reasoning_end_token,
            "max_continuations": self.max_continuations,
            "attempts_per_item": self.attempts_per_item,
        }


class SurgeryEvent(str, Enum):
    NATURAL_END_SHORT = "natural_end_short"
    CONTINUATION_INJECTED = "continuation_injected"
    TRUNCATED_AT_BUDGET = "truncated_at_budget"
    FINALIZED = "finalized"


@dataclass(frozen=True)
class TranscriptEvent:
    kind: SurgeryEvent
    at_token: int
    inserted: str | None = None  # surgery string recorded verbatim

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind.value, "at_token": self.at_token}
        if self.inserted is not None:
            d["inserted"] = self.inserted
        return d


@dataclass(frozen=True)
class BudgetTranscript:
    """Full audit trail of one reasoning-controlled inference."""

    item_id: str
    budget: int
    events: tuple[TranscriptEvent, ...]
    reasoning_final: str
    answer_text: str
    extracted_answer: str | None = None

    def __post_init__(self) -> None:
        if not self.events or self.events[-1].kind is not SurgeryEvent.FINALIZED:
            raise ValueError("events must end with finalized")
        positions = [e.at_token for e in self.events]
        if any(b < a for a, b in zip(positions, positions[1:])):
            raise ValueError("event positions must be non-decreasing")
        for event in self.events:
            if event.kind is SurgeryEvent.TRUNCATED_AT_BUDGET and event.at_token != self.budget:
                raise ValueError("truncation events must sit exactly at the budget")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "item_id": self.item_id,
            "budget": self.budget,
            "events": [e.to_dict() for e in self.events],
            "reasoning_final": self.reasoning_final,
            "answer_text": self.answer_text,
        }
        if self.extracted_answer is not None:
            d["extracted_answer"] = self.extracted_answer
        return d


@dataclass(frozen=True)
class EvalItem:
    id: str
    prompt: str
    reference_answer: str

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "prompt": self.prompt, "reference_answer": self.reference_answer}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvalItem":
        return cls(id=str(d["id"]), prompt=d["prompt"], reference_answer=str(d["reference_answer"]))


def extract_boxed(answer_text: str) -> str | None:
    r"""Content of the last complete ``\boxed{...}`` span, braces balanced.

    Occurrences are matched non-overlapping, left to right; the last complete
    one wins. A span left unclosed at end of input yields nothing, so fully
    unbalanced input returns None.
    """
    marker = "\\boxed{"
    result: str | None = None
    pos = 0
    while True:
        start = answer_text.find(marker, pos)
        if start < 0:
            return result
        depth = 1
        i = start + len(marker)
        while i < len(answer_text) and depth > 0:
            ch = answer_text[i]
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
            i += 1
        if depth != 0:
            return result  # unbalanced tail; keep any earlier complete span
        result = answer_text[start + len(marker) : i - 1]
        pos = i


_FULLWIDTH_DIGITS = str.maketrans("０１２３４５６７８９", "0123456789")


def normalize_answer(text: str) -> str:
    """Match normalization: trim, case-fold, unify full/half-width digits."""
    return text.strip().translate(_FULLWIDTH_DIGITS).casefold()


def answers_match(extracted: str | None, reference: str) -> bool:
    if extracted is None:
        return False
    return normalize_answer(extracted) == normalize_answer(reference)


def _join_continuation(reasoning: str, continuation_text: str) -> str:
    if reasoning and not reasoning[-1].isspace():
        return reasoning + " " + continuation_text
    return reasoning + continuation_text


def _strip_end_token(reasoning: str, end_token: str) -> str:
    stripped = reasoning.rstrip()
    if stripped.endswith(end_token):
        return stripped[: -len(end_token)].rstrip()
    return reasoning


def run_budgeted(
    item: EvalItem,
    spec: BudgetSpec,
    budget: int,
    provider: Provider,
    tokenizer: Tokenizer | None = None,
    sampling: SamplingParams = SamplingParams(),
) -> BudgetTranscript:
    """Run one item with its reasoning length forced to ``budget`` tokens.

    Short branch: a natural end below budget strips the end token, appends
    the continuation cue, and resumes generation; after
    ``spec.max_continuations`` rounds it falls through to finalization at the
    current length. Long branch: reasoning at or beyond the budget is
    truncated to exactly ``budget`` tokens. Either way the end token plus the
    finalize cue are appended and the final answer is generated anew.
    """
    if budget not in spec.budgets:
        raise ValueError(f"budget {budget} is not one of the spec budgets {spec.budgets}")
    tokenizer = tokenizer or WhitespaceTokenizer()
    request = ChatRequest(messages=(user(item.prompt),), sampling=sampling)

    events: list[TranscriptEvent] = []
    response = provider.complete(request)
    reasoning = _strip_end_token(response.reasoning or "", spec.reasoning_end_token)
    continuations = 0
    while tokenizer.count(reasoning) < budget:
        count = tokenizer.count(reasoning)
        events.append(TranscriptEvent(SurgeryEvent.NATURAL_END_SHORT, count))
        if continuations >= spec.max_continuations:
            break  # give up extending; finalize at the current length
        events.append(TranscriptEvent(SurgeryEvent.CONTINUATION_INJECTED, count, inserted=spec.continuation_text))
        reasoning = _join_continuation(reasoning, spec.continuation_text)
        response = provider.complete_prefixed(request, reasoning)
        reasoning = _strip_end_token(response.reasoning or "", spec.reasoning_end_token)
        continuations += 1

    if tokenizer.count(reasoning) >= budget:
        reasoning = tokenizer.truncate(reasoning, budget)
        events.append(TranscriptEvent(SurgeryEvent.TRUNCATED_AT_BUDGET, budget))

    final_count = tokenizer.count(reasoning)
    finalize_suffix = spec.reasoning_end_token + spec.finalize_text
    final_response = provider.complete_prefixed(request, reasoning + finalize_suffix)
    events.append(TranscriptEvent(SurgeryEvent.FINALIZED, final_count, inserted=finalize_suffix))
    answer_text = final_response.content
    return BudgetTranscript(
        item_id=item.id,
        budget=budget,
        events=tuple(events),
        reasoning_final=reasoning,
        answer_text=answer_text,
        extracted_answer=extract_boxed(answer_text),
    )


@dataclass
class ItemScore:
    item_id: str
    attempts: int
    hits: int

    @property
    def accuracy(self) -> float:
        return self.hits / self.attempts

    def to_dict(self) -> dict[str, Any]:
        return {"item_id": self.item_id, "attempts": self.attempts, "hits": self.hits, "accuracy": self.accuracy}


@dataclass
class PassAt1Result:
    budget: int
    accuracy: float
    per_item: list[ItemScore]
    transcripts: list[BudgetTranscript] = field(default_factory=list)


def score_pass_at_1(
    items: Iterable[EvalItem],
    spec: BudgetSpec,
    budget: int,
    provider: Provider,
    tokenizer: Tokenizer | None = None,
    sampling: SamplingParams = SamplingParams(),
    base_seed: int = 0,
    max_workers: int = 1,
) -> PassAt1Result:
    """pass@1 accuracy at one budget, averaged over independent attempts.

    Attempts are distinguished by the sampling seed. A missing extraction
    counts as incorrect, never as an error. Overall accuracy is the mean of
    per-item accuracies.
    """
    items = list(items)
    if not items:
        raise ValueError("no items to score")

    def one(job: tuple[EvalItem, int]) -> BudgetTranscript:
        item, attempt = job
        attempt_sampling = SamplingParams(
            temperature=sampling.temperature,
            top_p=sampling.top_p,
            max_tokens=sampling.max_tokens,
            seed=base_seed + attempt,
        )
        return run_budgeted(item, spec, budget, provider, tokenizer, sampling=attempt_sampling)

    jobs = [(item, attempt) for item in items for attempt in range(spec.attempts_per_item)]
    transcripts = run_ordered(one, jobs, max_workers)

    per_item: list[ItemScore] = []
    for index, item in enumerate(items):
        window = transcripts[index * spec.attempts_per_item : (index + 1) * spec.attempts_per_item]
        hits = sum(1 for t in window if answers_match(t.extracted_answer, item.reference_answer))
        per_item.append(ItemScore(item_id=item.id, attempts=spec.attempts_per_item, hits=hits))
    accuracy = sum(s.accuracy for s in per_item) / len(per_item)
    return PassAt1Result(budget=budget, accuracy=accuracy, per_item=per_item, transcripts=transcripts)


@dataclass
class CurvePoint:
    budget: int
    accuracy: float

    def to_dict(self) -> dict[str, Any]:
        return {"budget": self.budget, "accuracy": self.accuracy}


def sweep_budgets(
    items: Iterable[EvalItem],
    spec: BudgetSpec,
    provider: Provider,
    tokenizer: Tokenizer | None = None,
    sampling: SamplingParams = SamplingParams(),
    base_seed: int = 0,
    max_workers: int = 1,
) -> tuple[list[CurvePoint], list[BudgetTranscript]]:
    """Accuracy at every budget in the spec; returns the curve and all transcripts."""
    items = list(items)
    curve: list[CurvePoint] = []
    transcripts: list[BudgetTranscript] = []
    for budget in spec.budgets:
        result = score_pass_at_1(
            items, spec, budget, provider, tokenizer, sampling=sampling, base_seed=base_seed, max_workers=max_workers
        )
        curve.append(CurvePoint(budget=budget, accuracy=result.accuracy))
        transcripts.extend(result.transcripts)
        logger.info("budget %d: pass@1 %.4f", budget, result.accuracy)
    return curve, transcripts


@dataclass
class NaturalRunResult:
    """Baseline without any surgery: natural reasoning lengths and accuracy."""

    accuracy: float
    per_item: list[ItemScore]
    reasoning_tokens: list[int]

    @property
    def reasoning_token_stats(self) -> dict[str, float]:
        if not self.reasoning_tokens:
            return {"mean": 0.0, "min": 0.0, "max": 0.0}
        return {
            "mean": sum(self.reasoning_tokens) / len(self.reasoning_tokens),
            "min": float(min(self.reasoning_tokens)),
            "max": float(max(self.reasoning_tokens)),
        }


def run_natural(
    items: Iterable[EvalItem],
    spec: BudgetSpec,
    provider: Provider,
    tokenizer: Tokenizer | None = None,
    sampling: SamplingParams = SamplingParams(),
    base_seed: int = 0,
    max_workers: int = 1,
) -> NaturalRunResult:
    """Run items without forcing, recording the natural reasoning-length distribution."""
    items = list(items)
    if not items:
        raise ValueError("no items to score")
    tokenizer = tokenizer or WhitespaceTokenizer()

    def one(job: tuple[EvalItem, int]) -> tuple[int, str | None]:
        item, attempt = job
        attempt_sampling = SamplingParams(
            temperature=sampling.temperature,
            top_p=sampling.top_p,
            max_tokens=sampling.max_tokens,
            seed=base_seed + attempt,
        )
        response = provider.complete(ChatRequest(messages=(user(item.prompt),), sampling=attempt_sampling))
        return tokenizer.count(response.reasoning or ""), extract_boxed(response.content)

    jobs = [(item, attempt) for item in items for attempt in range(spec.attempts_per_item)]
    outcomes = run_ordered(one, jobs, max_workers)

    per_item: list[ItemScore] = []
    reasoning_tokens: list[int] = []
    for index, item in enumerate(items):
        window = outcomes[index * spec.attempts_per_item : (index + 1) * spec.attempts_per_item]
        hits = sum(1 for _tokens, answer in window if answers_match(answer, item.reference_answer))
        reasoning_tokens.extend(tokens for tokens, _answer in window)
        per_item.append(ItemScore(item_id=item.id, attempts=spec.attempts_per_item, hits=hits))
    accuracy = sum(s.accuracy for s in per_item) / len(per_item)
    return NaturalRunResult(accuracy=accuracy, per_item=per_item, reasoning_tokens=reasoning_tokens)
