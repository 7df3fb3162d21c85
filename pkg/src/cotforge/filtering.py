"""Heuristic quality filters and fuzzy deduplication.

Word-count and n-gram repetition filters gate individual instructions;
near-duplicates are removed with MinHash signatures bucketed by LSH banding
and clustered with union-find. Word segmentation is pluggable: the default
segmenter uses Unicode word runs split further into per-script runs for
Han/Hiragana/Katakana text, keeping the pipeline self-contained where a
morphological analyzer would otherwise be required.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Protocol, Sequence

import numpy as np

from .core import InstructionRecord

logger = logging.getLogger(__name__)

_MERSENNE_61 = np.uint64((1 << 61) - 1)


class NgramMetric(str, Enum):
    TOP_NGRAM_FRACTION = "top_ngram_fraction"
    DUPLICATE_NGRAM_FRACTION = "duplicate_ngram_fraction"


class ShingleUnit(str, Enum):
    WORD = "word"
    CHARACTER = "character"


@dataclass(frozen=True)
class NgramRule:
    n: int
    metric: NgramMetric
    threshold: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "metric", NgramMetric(self.metric))
        if self.n < 2:
            raise ValueError("ngram rule requires n >= 2")
        if not (0 < self.threshold <= 1):
            raise ValueError("threshold must be in (0, 1]")

    @property
    def name(self) -> str:
        return f"{self.metric.value}_{self.n}"

    def to_dict(self) -> dict[str, Any]:
        return {"n": self.n, "metric": self.metric.value, "threshold": self.threshold}


# Repetition-filter defaults sized for instruction-length text. The
# duplicate-coverage thresholds follow the standard web-cleaning settings;
# the top-n-gram thresholds sit above n/min_words so a single occurrence in
# a minimum-length text can never trip them, only actual repetition can.
# The upstream parameters are not published, so these are config defaults,
# not verified constants.
DEFAULT_NGRAM_RULES: tuple[NgramRule, ...] = (
    NgramRule(2, NgramMetric.TOP_NGRAM_FRACTION, 0.30),
    NgramRule(3, NgramMetric.TOP_NGRAM_FRACTION, 0.30),
    NgramRule(5, NgramMetric.DUPLICATE_NGRAM_FRACTION, 0.15),
    NgramRule(6, NgramMetric.DUPLICATE_NGRAM_FRACTION, 0.14),
    NgramRule(7, NgramMetric.DUPLICATE_NGRAM_FRACTION, 0.13),
    NgramRule(8, NgramMetric.DUPLICATE_NGRAM_FRACTION, 0.12),
    NgramRule(9, NgramMetric.DUPLICATE_NGRAM_FRACTION, 0.11),
    NgramRule(10, NgramMetric.DUPLICATE_NGRAM_FRACTION, 0.10),
)


@dataclass(frozen=True)
class ShingleConfig:
    unit: ShingleUnit = ShingleUnit.WORD
    width: int = 5

    def __post_init__(self) -> None:
        object.__setattr__(self, "unit", ShingleUnit(self.unit))
        if self.width < 1:
            raise ValueError("shingle width must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {"unit": self.unit.value, "width": self.width}


@dataclass(frozen=True)
class MinHashConfig:
    num_permutations: int = 128
    jaccard_threshold: float = 0.8
    bands: int = 16
    rows: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_permutations < 1:
            raise ValueError("num_permutations must be >= 1")
        if not (0 < self.jaccard_threshold < 1):
            raise ValueError("jaccard_threshold must be in (0, 1)")
        if self.bands * self.rows != self.num_permutations:
            raise ValueError("bands * rows must equal num_permutations")

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_permutations": self.num_permutations,
            "jaccard_threshold": self.jaccard_threshold,
            "bands": self.bands,
            "rows": self.rows,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class FilterConfig:
    min_words: int = 10
    ngram_rules: tuple[NgramRule, ...] = DEFAULT_NGRAM_RULES
    shingle: ShingleConfig = ShingleConfig()
    minhash: MinHashConfig = MinHashConfig()
    dedup_with_ingested: bool = True  # joint dedup over synthesized + ingested

    def __post_init__(self) -> None:
        object.__setattr__(self, "ngram_rules", tuple(self.ngram_rules))
        if self.min_words < 1:
            raise ValueError("min_words must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "min_words": self.min_words,
            "ngram_rules": [r.to_dict() for r in self.ngram_rules],
            "shingle": self.shingle.to_dict(),
            "minhash": self.minhash.to_dict(),
            "dedup_with_ingested": self.dedup_with_ingested,
        }


class Segmenter(Protocol):
    name: str

    def segment(self, text: str) -> list[str]: ...


def _script_class(ch: str) -> str:
    cp = ord(ch)
    if 0x3040 <= cp <= 0x309F:
        return "hiragana"
    if 0x30A0 <= cp <= 0x30FF or 0x31F0 <= cp <= 0x31FF:
        return "katakana"
    if 0x4E00 <= cp <= 0x9FFF or 0x3400 <= cp <= 0x4DBF or 0xF900 <= cp <= 0xFAFF:
        return "han"
    return "other"


class UnicodeSegmenter:
    """Unicode word runs, with Han/Hiragana/Katakana runs split per script.

    Scriptio continua text has no spaces to segment on; per-script runs are a
    coarse but dependency-free stand-in for morphological analysis.
    """

    name = "unicode"

    def segment(self, text: str) -> list[str]:
        import re

        words: list[str] = []
        for run in re.findall(r"\w+", text, flags=re.UNICODE):
            current = run[0]
            current_class = _script_class(run[0])
            for ch in run[1:]:
                cls = _script_class(ch)
                if cls == current_class:
                    current += ch
                else:
                    words.append(current)
                    current, current_class = ch, cls
            words.append(current)
        return words


DEFAULT_SEGMENTER = UnicodeSegmenter()


@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    rule: str | None = None
    metric_value: float | None = None
    threshold: float | None = None

    @property
    def reason(self) -> str | None:
        return None if self.keep else self.rule


def word_count_filter(
    record: InstructionRecord,
    config: FilterConfig,
    segmenter: Segmenter = DEFAULT_SEGMENTER,
) -> FilterDecision:
    """Drop iff the segmented word count falls below ``config.min_words``.

    The boundary is inclusive: exactly ``min_words`` words passes. Segmenter
    failures drop the record (fail closed) with reason ``segmentation_error``.
    """
    try:
        count = len(segmenter.segment(record.text))
    except Exception:
        logger.exception("segmenter failed on record %s", record.id)
        return FilterDecision(keep=False, rule="segmentation_error")
    if count < config.min_words:
        return FilterDecision(keep=False, rule="word_count", metric_value=float(count), threshold=float(config.min_words))
    return FilterDecision(keep=True)


def ngram_metric_value(tokens: Sequence[str], rule: NgramRule) -> float:
    """Compute one repetition metric over a token sequence.

    top_ngram_fraction: occurrences of the most frequent n-gram, times n,
    over total tokens. duplicate_ngram_fraction: fraction of token positions
    covered by any n-gram occurring at least twice. Sequences shorter than n
    score 0 (the rule passes vacuously).
    """
    total = len(tokens)
    if total < rule.n:
        return 0.0
    grams = [tuple(tokens[i : i + rule.n]) for i in range(total - rule.n + 1)]
    counts = Counter(grams)
    if rule.metric is NgramMetric.TOP_NGRAM_FRACTION:
        top = max(counts.values())
        return top * rule.n / total
    covered = [False] * total
    for i, gram in enumerate(grams):
        if counts[gram] >= 2:
            for j in range(i, i + rule.n):
                covered[j] = True
    return sum(covered) / total


def ngram_filter(
    record: InstructionRecord,
    config: FilterConfig,
    segmenter: Segmenter = DEFAULT_SEGMENTER,
) -> tuple[FilterDecision, dict[str, float]]:
    """Apply every configured n-gram rule; drop iff any metric exceeds its threshold.

    Returns the decision plus the per-rule metric values that were computed.
    """
    try:
        tokens = segmenter.segment(record.text)
    except Exception:
        logger.exception("segmenter failed on record %s", record.id)
        return FilterDecision(keep=False, rule="segmentation_error"), {}
    metrics: dict[str, float] = {}
    verdict: FilterDecision | None = None
    for rule in config.ngram_rules:
        value = ngram_metric_value(tokens, rule)
        metrics[rule.name] = value
        if verdict is None and value > rule.threshold:
            verdict = FilterDecision(keep=False, rule=rule.name, metric_value=value, threshold=rule.threshold)
    return (verdict or FilterDecision(keep=True)), metrics


def extract_shingles(text: str, shingle: ShingleConfig, segmenter: Segmenter = DEFAULT_SEGMENTER) -> set[str]:
    """Contiguous width-w windows over words (joined by spaces) or characters."""
    if shingle.unit is ShingleUnit.WORD:
        units: Sequence[str] = segmenter.segment(text)
        if len(units) < shingle.width:
            return set()
        return {" ".join(units[i : i + shingle.width]) for i in range(len(units) - shingle.width + 1)}
    if len(text) < shingle.width:
        return set()
    return {text[i : i + shingle.width] for i in range(len(text) - shingle.width + 1)}


def _shingle_hash(shingle: str) -> int:
    return int.from_bytes(hashlib.blake2b(shingle.encode("utf-8"), digest_size=8).digest(), "big")


def _permutation_params(config: MinHashConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    big = int(_MERSENNE_61)
    a = rng.integers(1, big, size=config.num_permutations, dtype=np.uint64)
    b = rng.integers(0, big, size=config.num_permutations, dtype=np.uint64)
    return a, b


@dataclass(frozen=True)
class MinHashSignature:
    """Per-permutation minima; position i is comparable across one run's signatures."""

    record_id: str
    values: tuple[int, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"record_id": self.record_id, "values": list(self.values)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MinHashSignature":
        return cls(record_id=d["record_id"], values=tuple(int(v) for v in d["values"]))


def minhash_signature(
    record_id: str,
    shingles: Iterable[str],
    config: MinHashConfig,
) -> MinHashSignature:
    """Signature over a non-empty shingle set; deterministic given the config seed.

    Records with no extractable shingles cannot be signed and must be routed
    to the exact-dedup path instead.
    """
    hashes = np.fromiter((_shingle_hash(s) for s in shingles), dtype=np.uint64)
    if hashes.size == 0:
        raise ValueError(f"record {record_id} has no shingles")
    a, b = _permutation_params(config)
    # uint64 multiply wraps mod 2^64 before the Mersenne reduction; the
    # composite map is still a well-mixed per-seed permutation family.
    permuted = (a[:, None] * hashes[None, :] + b[:, None]) % _MERSENNE_61
    return MinHashSignature(record_id=record_id, values=tuple(int(v) for v in permuted.min(axis=1)))


def estimated_jaccard(left: MinHashSignature, right: MinHashSignature) -> float:
    """Fraction of agreeing permutation positions."""
    if len(left.values) != len(right.values):
        raise ValueError("incompatible signatures: differing permutation counts")
    agree = sum(1 for x, y in zip(left.values, right.values) if x == y)
    return agree / len(left.values)


class UnionFind:
    """Disjoint sets over record ids, with path compression and union by size."""

    def __init__(self) -> None:
        self.parent: dict[str, str] = {}
        self.size: dict[str, int] = {}

    def find(self, x: str) -> str:
        if x not in self.parent:
            self.parent[x] = x
            self.size[x] = 1
            return x
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, x: str, y: str) -> None:
        rx, ry = self.find(x), self.find(y)
        if rx == ry:
            return
        if self.size[rx] < self.size[ry]:
            rx, ry = ry, rx
        self.parent[ry] = rx
        self.size[rx] += self.size[ry]


@dataclass
class DedupResult:
    survivors: set[str]
    # One report row per duplicate cluster: survivor plus all member ids.
    clusters: list[dict[str, Any]] = field(default_factory=list)

    @property
    def duplicates_removed(self) -> int:
        return sum(len(c["member_ids"]) - 1 for c in self.clusters)


def lsh_dedup(signatures: Iterable[MinHashSignature], config: MinHashConfig) -> DedupResult:
    """Cluster near-duplicates and keep one survivor per cluster.

    Signatures colliding in at least one band become candidate pairs;
    candidates whose estimated Jaccard reaches the threshold are clustered
    with union-find. The survivor is the lexicographically smallest id in
    each cluster, which makes the outcome deterministic.
    """
    sigs = list(signatures)
    for sig in sigs:
        if len(sig.values) != config.num_permutations:
            raise ValueError(
                f"incompatible signatures: {sig.record_id} has {len(sig.values)} values, "
                f"expected {config.num_permutations}"
            )
    by_id = {sig.record_id: sig for sig in sigs}
    buckets: dict[tuple[int, tuple[int, ...]], list[str]] = defaultdict(list)
    for sig in sigs:
        for band in range(config.bands):
            key = sig.values[band * config.rows : (band + 1) * config.rows]
            buckets[(band, key)].append(sig.record_id)

    candidates: set[tuple[str, str]] = set()
    for members in buckets.values():
        if len(members) < 2:
            continue
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                pair = (members[i], members[j]) if members[i] < members[j] else (members[j], members[i])
                candidates.add(pair)

    uf = UnionFind()
    for left_id, right_id in sorted(candidates):
        if estimated_jaccard(by_id[left_id], by_id[right_id]) >= config.jaccard_threshold:
            uf.union(left_id, right_id)

    clusters: dict[str, list[str]] = defaultdict(list)
    for sig in sigs:
        if sig.record_id in uf.parent:
            clusters[uf.find(sig.record_id)].append(sig.record_id)

    survivors = {sig.record_id for sig in sigs}
    cluster_rows: list[dict[str, Any]] = []
    for members in clusters.values():
        if len(members) < 2:
            continue
        members = sorted(members)
        survivor = members[0]
        survivors.difference_update(members[1:])
        cluster_rows.append({"survivor_id": survivor, "member_ids": members})
    cluster_rows.sort(key=lambda row: row["survivor_id"])
    return DedupResult(survivors=survivors, clusters=cluster_rows)


def exact_dedup(pairs: Iterable[tuple[str, str]]) -> DedupResult:
    """Exact-text dedup for records too short to shingle: (record_id, text) pairs."""
    by_text: dict[str, list[str]] = defaultdict(list)
    ids: list[str] = []
    for record_id, text in pairs:
        by_text[text].append(record_id)
        ids.append(record_id)
    survivors = set(ids)
    cluster_rows = []
    for members in by_text.values():
        if len(members) < 2:
            continue
        members = sorted(members)
        survivors.difference_update(members[1:])
        cluster_rows.append({"survivor_id": members[0], "member_ids": members})
    cluster_rows.sort(key=lambda row: row["survivor_id"])
    return DedupResult(survivors=survivors, clusters=cluster_rows)
