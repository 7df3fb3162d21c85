"""Single abstraction for all LLM calls.

Two implementations share one contract: a deterministic scripted provider
(fixture-keyed, for offline tests and reproducible runs) and an HTTP client
speaking the OpenAI-compatible chat completions protocol. Retries use
exponential backoff with full jitter and only fire on transport or
rate-limit errors; every call is a pure request, so retrying is always safe.
"""

from __future__ import annotations

import logging
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

from .core import canonical_json, compute_id, read_jsonl
from .tokenizer import Tokenizer, WhitespaceTokenizer

logger = logging.getLogger(__name__)

API_KEY_ENV = "COTFORGE_API_KEY"

T = TypeVar("T")
U = TypeVar("U")


class MessageRole(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"


@dataclass(frozen=True)
class ChatMessage:
    role: MessageRole
    content: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", MessageRole(self.role))

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role.value, "content": self.content}


def system(content: str) -> ChatMessage:
    return ChatMessage(MessageRole.SYSTEM, content)


def user(content: str) -> ChatMessage:
    return ChatMessage(MessageRole.USER, content)


def assistant(content: str) -> ChatMessage:
    return ChatMessage(MessageRole.ASSISTANT, content)


@dataclass(frozen=True)
class SamplingParams:
    """Sampling controls sent with every request.

    ``seed`` distinguishes otherwise-identical requests (e.g. repeated
    attempts of one item); deterministic providers key on it like any other
    field, and the wire protocol forwards it when set.
    """

    temperature: float = 1.0
    top_p: float = 1.0
    max_tokens: int = 16384
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not (0 < self.top_p <= 1):
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        }
        if self.seed is not None:
            d["seed"] = self.seed
        return d


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    sampling: SamplingParams = SamplingParams()
    reasoning_visible: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[-1].role is MessageRole.ASSISTANT:
            # Continuation is expressed through complete_prefixed, not a
            # trailing assistant message.
            raise ValueError("last message must not have role assistant")

    def to_dict(self) -> dict[str, Any]:
        return {
            "messages": [m.to_dict() for m in self.messages],
            "sampling": self.sampling.to_dict(),
            "reasoning_visible": self.reasoning_visible,
        }


@dataclass(frozen=True)
class TokenUsage:
    prompt: int = 0
    reasoning: int = 0
    completion: int = 0

    def to_dict(self) -> dict[str, int]:
        return {"prompt": self.prompt, "reasoning": self.reasoning, "completion": self.completion}


@dataclass(frozen=True)
class ChatResponse:
    content: str
    reasoning: str | None = None
    token_usage: TokenUsage = TokenUsage()
    finish: FinishReason = FinishReason.STOP

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "content": self.content,
            "token_usage": self.token_usage.to_dict(),
            "finish": self.finish.value,
        }
        if self.reasoning is not None:
            d["reasoning"] = self.reasoning
        return d


class ProviderError(Exception):
    """Base class for provider failures."""

    retryable = False


class TransportError(ProviderError):
    retryable = True

    def __init__(self, message: str, attempts: int = 1):
        self.attempts = attempts
        super().__init__(message)


class RateLimitError(ProviderError):
    retryable = True

    def __init__(self, message: str, backoff_hint: float | None = None):
        self.backoff_hint = backoff_hint
        super().__init__(message)


class MalformedReplyError(ProviderError):
    """Server replied, but not with anything parseable. Carries the raw body."""

    def __init__(self, message: str, body: str = ""):
        self.body = body
        super().__init__(message)


class ContinuationUnsupportedError(ProviderError):
    pass


class AuthError(ProviderError):
    pass


class ScriptMissError(ProviderError):
    """No fixture entry for this request hash and no fallback configured."""

    def __init__(self, fingerprint: str, request: ChatRequest):
        self.fingerprint = fingerprint
        last = request.messages[-1].content
        preview = last[:120] + ("…" if len(last) > 120 else "")
        super().__init__(f"no scripted response for request {fingerprint} (last message: {preview!r})")


def request_fingerprint(request: ChatRequest, prefix: str | None = None) -> str:
    """Stable hash of a canonicalized request (plus continuation prefix).

    An empty prefix hashes identically to no prefix, so prefix-free
    continuation is equivalent to a plain completion.
    """
    payload: dict[str, Any] = request.to_dict()
    if prefix:
        payload["forced_reasoning_prefix"] = prefix
    return compute_id(canonical_json(payload).encode("utf-8"))


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff with full jitter; retries transport/rate-limit only."""

    max_attempts: int = 5
    base_delay: float = 0.5
    max_delay: float = 30.0


class Provider:
    """Shared retry/accounting shell; subclasses implement the single-shot calls."""

    def __init__(self, retry: RetryPolicy = RetryPolicy(), sleep: Callable[[float], None] = time.sleep):
        self._retry = retry
        self._sleep = sleep
        self._rng = random.Random()
        self._local = threading.local()

    @property
    def last_attempt_count(self) -> int:
        """Attempts consumed by this thread's most recent call (1 = no retry)."""
        return getattr(self._local, "attempts", 0)

    def complete(self, request: ChatRequest) -> ChatResponse:
        return self._call_with_retry(lambda: self._complete_once(request))

    def complete_prefixed(self, request: ChatRequest, forced_reasoning_prefix: str) -> ChatResponse:
        """Resume generation with the assistant's reasoning forced to start
        with ``forced_reasoning_prefix`` verbatim."""
        if not forced_reasoning_prefix:
            return self.complete(request)
        return self._call_with_retry(lambda: self._complete_prefixed_once(request, forced_reasoning_prefix))

    def _call_with_retry(self, call: Callable[[], ChatResponse]) -> ChatResponse:
        attempts = 0
        while True:
            attempts += 1
            self._local.attempts = attempts
            try:
                return call()
            except ProviderError as exc:
                if not exc.retryable or attempts >= self._retry.max_attempts:
                    raise
                delay = min(self._retry.max_delay, self._retry.base_delay * (2 ** (attempts - 1)))
                hint = getattr(exc, "backoff_hint", None)
                wait = hint if hint is not None else self._rng.uniform(0.0, delay)
                logger.warning("retryable provider error (attempt %d/%d): %s", attempts, self._retry.max_attempts, exc)
                self._sleep(wait)

    def _complete_once(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError

    def _complete_prefixed_once(self, request: ChatRequest, prefix: str) -> ChatResponse:
        raise NotImplementedError


class ScriptedProvider(Provider):
    """Deterministic provider keyed by a hash of the canonicalized request.

    Responses come from a fixture table (JSONL of
    ``{request_hash, reasoning, content}``). For prefixed continuations the
    fixture's ``reasoning`` is the continuation text only; the returned
    reasoning is ``prefix + continuation``. A ``fallback`` callable
    ``(request, prefix) -> (reasoning, content)`` may answer requests with no
    fixture entry; it must be a pure function of its arguments for runs to
    stay reproducible.
    """

    def __init__(
        self,
        fixtures: str | Path | None = None,
        tokenizer: Tokenizer | None = None,
        fallback: Callable[[ChatRequest, str | None], tuple[str | None, str]] | None = None,
        fail_first: int = 0,
        retry: RetryPolicy = RetryPolicy(),
        sleep: Callable[[float], None] = lambda _s: None,
    ):
        super().__init__(retry=retry, sleep=sleep)
        self.tokenizer = tokenizer or WhitespaceTokenizer()
        self.fallback = fallback
        self._table: dict[str, dict[str, Any]] = {}
        self._fail_remaining = fail_first
        self._fail_lock = threading.Lock()
        if fixtures is not None:
            self.load_fixtures(fixtures)

    def load_fixtures(self, path: str | Path) -> int:
        n = 0
        for row in read_jsonl(path):
            self._table[row["request_hash"]] = row
            n += 1
        return n

    def add_fixture(self, request_hash: str, reasoning: str | None, content: str, finish: str | None = None) -> None:
        row: dict[str, Any] = {"request_hash": request_hash, "reasoning": reasoning, "content": content}
        if finish is not None:
            row["finish"] = finish
        self._table[request_hash] = row

    def _maybe_fail(self) -> None:
        with self._fail_lock:
            if self._fail_remaining > 0:
                self._fail_remaining -= 1
                raise TransportError("injected transport failure", attempts=self.last_attempt_count)

    def _lookup(self, request: ChatRequest, prefix: str | None) -> tuple[str | None, str, str | None]:
        fp = request_fingerprint(request, prefix)
        row = self._table.get(fp)
        if row is not None:
            return row.get("reasoning"), row["content"], row.get("finish")
        if self.fallback is not None:
            reasoning, content = self.fallback(request, prefix)
            return reasoning, content, None
        raise ScriptMissError(fp, request)

    def _respond(self, request: ChatRequest, reasoning: str | None, content: str, finish: str | None) -> ChatResponse:
        prompt_tokens = sum(self.tokenizer.count(m.content) for m in request.messages)
        usage = TokenUsage(
            prompt=prompt_tokens,
            reasoning=self.tokenizer.count(reasoning or ""),
            completion=self.tokenizer.count(content),
        )
        if finish is None:
            finish = (
                FinishReason.LENGTH.value
                if usage.reasoning + usage.completion >= request.sampling.max_tokens
                else FinishReason.STOP.value
            )
        return ChatResponse(content=content, reasoning=reasoning, token_usage=usage, finish=FinishReason(finish))

    def _complete_once(self, request: ChatRequest) -> ChatResponse:
        self._maybe_fail()
        reasoning, content, finish = self._lookup(request, None)
        return self._respond(request, reasoning, content, finish)

    def _complete_prefixed_once(self, request: ChatRequest, prefix: str) -> ChatResponse:
        self._maybe_fail()
        continuation, content, finish = self._lookup(request, prefix)
        return self._respond(request, prefix + (continuation or ""), content, finish)


_THINK_RX = re.compile(r"<think>(.*?)</think>", re.DOTALL)


def split_think_spans(content: str) -> tuple[str | None, str]:
    """Extract ``<think>…</think>`` spans; returns (reasoning, remainder)."""
    spans = _THINK_RX.findall(content)
    if not spans:
        return None, content
    remainder = _THINK_RX.sub("", content).lstrip("\n")
    return "\n".join(spans), remainder


class HttpProvider(Provider):
    """OpenAI-compatible chat completions client.

    Reads the API key from the ``COTFORGE_API_KEY`` environment variable.
    Reasoning comes from the response message's ``reasoning`` (or
    ``reasoning_content``) field when present, else from ``<think>`` spans in
    the content. Prefix continuation requires an endpoint that honors
    ``continue_final_message`` (vLLM-style); it is off by default and must be
    enabled explicitly via ``continuation=True``.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        continuation: bool = False,
        retry: RetryPolicy = RetryPolicy(),
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__(retry=retry, sleep=sleep)
        import os

        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.timeout = timeout
        self.continuation = continuation
        if not self.api_key:
            raise AuthError(f"no API key: set the {API_KEY_ENV} environment variable")

    def _post(self, body: dict[str, Any]) -> dict[str, Any]:
        import requests

        url = f"{self.base_url}/chat/completions"
        try:
            resp = requests.post(
                url,
                json=body,
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"transport failure calling {url}: {exc}", attempts=self.last_attempt_count) from exc
        if resp.status_code == 429:
            retry_after = resp.headers.get("Retry-After")
            hint = float(retry_after) if retry_after and retry_after.replace(".", "", 1).isdigit() else None
            raise RateLimitError("rate limited (HTTP 429)", backoff_hint=hint)
        if resp.status_code in (401, 403):
            raise AuthError(f"authentication rejected (HTTP {resp.status_code})")
        if resp.status_code >= 500:
            raise TransportError(f"server error (HTTP {resp.status_code})", attempts=self.last_attempt_count)
        if resp.status_code != 200:
            raise MalformedReplyError(f"unexpected status {resp.status_code}", body=resp.text)
        try:
            return resp.json()
        except ValueError as exc:
            raise MalformedReplyError(f"response body is not JSON: {exc}", body=resp.text) from exc

    def _body(self, request: ChatRequest) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": [m.to_dict() for m in request.messages],
            "temperature": request.sampling.temperature,
            "top_p": request.sampling.top_p,
            "max_tokens": request.sampling.max_tokens,
        }
        if request.sampling.seed is not None:
            body["seed"] = request.sampling.seed
        return body

    def _parse(self, payload: dict[str, Any]) -> ChatResponse:
        try:
            choice = payload["choices"][0]
            message = choice["message"]
            content = message.get("content") or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedReplyError(f"missing fields in reply: {exc}", body=canonical_json(payload)) from exc
        reasoning = message.get("reasoning") or message.get("reasoning_content")
        if reasoning is None:
            reasoning, content = split_think_spans(content)
        usage = payload.get("usage") or {}
        details = usage.get("completion_tokens_details") or {}
        reasoning_tokens = int(details.get("reasoning_tokens", 0))
        completion_tokens = int(usage.get("completion_tokens", 0))
        token_usage = TokenUsage(
            prompt=int(usage.get("prompt_tokens", 0)),
            reasoning=reasoning_tokens,
            completion=max(completion_tokens - reasoning_tokens, 0),
        )
        finish = FinishReason.LENGTH if choice.get("finish_reason") == "length" else FinishReason.STOP
        return ChatResponse(content=content, reasoning=reasoning, token_usage=token_usage, finish=finish)

    def _complete_once(self, request: ChatRequest) -> ChatResponse:
        return self._parse(self._post(self._body(request)))

    def _complete_prefixed_once(self, request: ChatRequest, prefix: str) -> ChatResponse:
        if not self.continuation:
            raise ContinuationUnsupportedError(
                "continuation unsupported: endpoint not configured for assistant-prefix continuation"
            )
        body = self._body(request)
        body["messages"] = body["messages"] + [{"role": "assistant", "content": f"<think>{prefix}"}]
        body["continue_final_message"] = True
        body["add_generation_prompt"] = False
        response = self._parse(self._post(body))
        reasoning = response.reasoning or ""
        if not reasoning.startswith(prefix):
            reasoning = prefix + reasoning
        return ChatResponse(
            content=response.content,
            reasoning=reasoning,
            token_usage=response.token_usage,
            finish=response.finish,
        )


def run_ordered(fn: Callable[[T], U], items: Sequence[T] | Iterable[T], max_workers: int = 1) -> list[U]:
    """Apply ``fn`` over items with bounded concurrency.

    Results always come back in input order regardless of completion order,
    so pipeline output is identical for any worker count.
    """
    items = list(items)
    if max_workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, items))
