"""Deterministic offline responder for the scripted provider's fallback mode.

Answers any pipeline request with format-correct content derived purely from
the request hash, so full offline runs are reproducible byte for byte at any
worker count. Dispatch is keyed to distinctive phrases in the packaged
default templates; custom templates need their own fixtures instead.
"""

from __future__ import annotations

import hashlib
import re

from .provider import ChatRequest, MessageRole, request_fingerprint
from .tokenizer import WhitespaceTokenizer

_TOKENIZER = WhitespaceTokenizer()

_FACETS = (
    "pricing", "regulation", "liquidity", "history", "risks", "forecasting",
    "settlement", "hedging", "disclosure", "governance", "automation", "auditing",
    "taxation", "benchmarks", "contracts", "reporting",
)

_FILLER = (
    "careful", "structured", "practical", "modern", "quarterly", "regional",
    "volatile", "emerging", "balanced", "audited", "nominal", "effective",
    "baseline", "adjusted", "projected", "historical", "composite", "weighted",
    "marginal", "aggregate", "robust", "granular", "seasonal", "calibrated",
    "diversified", "incremental", "realized", "implied", "observed", "modeled",
    "screened", "validated", "approved", "tracked", "indexed", "pooled",
    "rolling", "annualized", "deferred", "accrued", "netted", "cleared",
    "quoted", "settled", "matched", "ranked", "scored", "phased",
)

_MODIFICATION_CYCLE = ("add_context", "convert_format_style", "elaborate_specific_case", "rewrite_related_topic")

_REASONING_END = "</think>"
_FINALIZE_MARK = "Final Answer:"
_CONTINUATION_MARK = "Wait,"


def _seed_int(request: ChatRequest, prefix: str | None, salt: str = "") -> int:
    digest = hashlib.blake2b(
        (request_fingerprint(request, prefix) + salt).encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big")


def _words(seed: int, count: int, vocab: tuple[str, ...] = _FILLER) -> list[str]:
    # Portable deterministic sampling: a hash counter stream, no RNG state.
    out: list[str] = []
    i = 0
    while len(out) < count:
        digest = hashlib.blake2b(f"{seed}:{i}".encode(), digest_size=4).digest()
        word = vocab[int.from_bytes(digest, "big") % len(vocab)]
        if word not in out[-len(vocab) :]:
            out.append(word)
        i += 1
    return out


def _last_user_content(request: ChatRequest) -> str:
    for message in reversed(request.messages):
        if message.role is MessageRole.USER:
            return message.content
    return request.messages[-1].content


def _marker(prompt: str, name: str, default: int) -> int:
    match = re.search(rf"\[{name}:(\d+)\]", prompt)
    return int(match.group(1)) if match else default


def _topic_expansion(prompt: str, seed: int) -> str:
    fanout = int(re.search(r"List (\d+) distinct sub-topics", prompt).group(1))
    topic = re.search(r"Topic word: (.+)", prompt, re.DOTALL).group(1).strip()
    picks = _words(seed, fanout, _FACETS) if fanout <= len(_FACETS) else None
    lines = []
    for i in range(fanout):
        facet = picks[i] if picks else f"{_FACETS[i % len(_FACETS)]} {i + 1}"
        lines.append(f"{i + 1}. {topic} {facet}")
    return "\n".join(lines)


_LEADS = {
    "open-ended questions": "Explain in detail how {topic} shapes {w0} {w1} decisions for {w2} {w3} institutions over a {w4} horizon, scenario {i}?",
    "calculation problems": "A {w0} fund holding {topic} positions worth {amount} grows {pct} percent each {w1} period; compute the {w2} value after {n} periods, case {i}.",
    "creative writing prompts": "Write a {w0} memo from a {w1} analyst describing how {topic} changed one {w2} team during a {w3} review, draft {i}.",
    "multiple-choice questions": "Which {w0} factor most affects {topic} under {w1} conditions, case {i}? (A) {w2} exposure (B) {w3} timing (C) {w4} costs (D) none of these",
}


def _instruction_batch(prompt: str, seed: int) -> str:
    count = int(re.search(r"Write (\d+) ", prompt).group(1))
    topic = re.search(r"Sub-topic: (.+)", prompt, re.DOTALL).group(1).strip()
    lead = next((template for marker, template in _LEADS.items() if marker in prompt), None)
    if lead is None:
        return ""
    lines = []
    for i in range(count):
        picks = _words(seed + i * 7919, 5)
        text = lead.format(
            topic=topic,
            i=i + 1,
            n=2 + (seed + i) % 5,
            amount=1000 + (seed + i * 31) % 9000,
            pct=1 + (seed + i * 17) % 9,
            w0=picks[0],
            w1=picks[1],
            w2=picks[2],
            w3=picks[3],
            w4=picks[4],
        )
        lines.append(f"{i + 1}. {text}")
    return "\n".join(lines)


_VARIANT_SUFFIXES = {
    "add_context": "assuming a {w0} portfolio under {w1} oversight",
    "convert_format_style": "rewritten as a {w0} checklist for {w1} reviewers",
    "elaborate_specific_case": "focused on one {w0} case from a {w1} desk",
    "rewrite_related_topic": "recast toward the adjacent {w0} {w1} question",
}


def _expansion_batch(prompt: str, seed: int) -> str:
    count = int(re.search(r"into (\d+) new variants", prompt).group(1))
    instruction = re.search(r"Instruction: (.+)", prompt, re.DOTALL).group(1).strip()
    lines = []
    for i in range(count):
        kind = _MODIFICATION_CYCLE[(seed + i) % len(_MODIFICATION_CYCLE)]
        picks = _words(seed + i * 104729, 2)
        suffix = _VARIANT_SUFFIXES[kind].format(w0=picks[0], w1=picks[1])
        lines.append(f"[{kind}] {instruction} Now {suffix}.")
    return "\n".join(lines)


def _followup(prompt: str, seed: int) -> str:
    sentinel_match = re.search(r"reply with exactly (\S+)", prompt)
    exchanges = prompt.count("Assistant:")
    # Converse a while, then stop: the odds of ending rise with each exchange.
    if exchanges >= 2 and seed % 3 != 0:
        return sentinel_match.group(1) if sentinel_match else "<NO_FOLLOWUP>"
    picks = _words(seed, 3)
    return f"Could you expand on the {picks[0]} side of that, especially the {picks[1]} impact on {picks[2]} planning?"


def _judge(prompt: str, seed: int) -> str:
    accuracy = 4 if seed % 5 == 0 else 5
    depth = 4 if seed % 7 == 0 else 5
    verdict = "solid and well grounded" if min(accuracy, depth) == 5 else "mostly sound with minor gaps"
    return (
        f"The responses are {verdict}; claims are checkable and the steps follow.\n"
        f"accuracy:{accuracy} relevance:5 usefulness:5 reasoning:{depth} safety:5"
    )


def _assistant_reply(request: ChatRequest, seed: int) -> tuple[str, str]:
    question = _last_user_content(request)
    picks = _words(seed, 6)
    reasoning = (
        f"The question asks about {question[:60]!r}. First consider the {picks[0]} angle, "
        f"then weigh the {picks[1]} constraints against {picks[2]} practice before concluding."
    )
    content = (
        f"In short, the {picks[3]} factors dominate: review the {picks[4]} assumptions, "
        f"quantify the {picks[5]} impact, and revisit the plan each cycle."
    )
    return reasoning, content


def _budget_initial(prompt: str, seed: int) -> tuple[str, str]:
    natural = _marker(prompt, "natural", 24 + seed % 16)
    reasoning = " ".join(f"step{i + 1}" for i in range(natural))
    return reasoning, "Still thinking."


def _budget_continuation(prompt: str, seed: int) -> tuple[str, str]:
    extra = _marker(prompt, "cont", 64)
    continuation = "".join(f" more{i + 1}" for i in range(extra))
    return continuation, "Still thinking."


def _budget_finalize(prompt: str, prefix: str) -> tuple[str, str]:
    reasoning_part = prefix.rsplit(_REASONING_END, 1)[0]
    spent = _TOKENIZER.count(reasoning_part)
    difficulty = _marker(prompt, "difficulty", 0)
    ref_match = re.search(r"\[ref:([^\]]+)\]", prompt)
    reference = ref_match.group(1) if ref_match else "42"
    answer = reference if spent >= difficulty else "unresolved"
    return "", f"The answer is \\boxed{{{answer}}}."


def demo_responder(request: ChatRequest, prefix: str | None) -> tuple[str | None, str]:
    """Pure function of (request, prefix) -> (reasoning, content).

    For prefixed continuations the returned reasoning is the continuation
    text only, per the scripted provider contract.
    """
    prompt = _last_user_content(request)
    seed = _seed_int(request, None)

    if prefix is not None:
        stripped = prefix.rstrip()
        if stripped.endswith(_FINALIZE_MARK):
            return _budget_finalize(prompt, prefix)
        if stripped.endswith(_CONTINUATION_MARK):
            return _budget_continuation(prompt, seed)
        return " continuing the earlier line of thought.", "Still thinking."

    if request.messages[0].role is MessageRole.SYSTEM and "knowledgeable assistant" in request.messages[0].content:
        return _assistant_reply(request, seed)
    if "distinct sub-topics" in prompt:
        return None, _topic_expansion(prompt, seed)
    if "Sub-topic:" in prompt and "Write " in prompt:
        return None, _instruction_batch(prompt, seed)
    if "new variants" in prompt:
        return None, _expansion_batch(prompt, seed)
    if "simulating the user" in prompt:
        return None, _followup(prompt, seed)
    if "data-quality judge" in prompt:
        return None, _judge(prompt, seed)
    return _budget_initial(prompt, seed)
