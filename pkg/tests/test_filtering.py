"""Filter and dedup tests, checked against brute-force oracles implemented here."""

import random
from collections import Counter

import pytest

from cotforge.filtering import (
    DEFAULT_SEGMENTER,
    FilterConfig,
    MinHashConfig,
    MinHashSignature,
    NgramMetric,
    NgramRule,
    ShingleConfig,
    ShingleUnit,
    UnionFind,
    estimated_jaccard,
    exact_dedup,
    extract_shingles,
    lsh_dedup,
    minhash_signature,
    ngram_filter,
    ngram_metric_value,
    word_count_filter,
)

from conftest import make_instruction


# ---- independent oracles ----

def oracle_top_ngram_fraction(tokens, n):
    if len(tokens) < n:
        return 0.0
    counts = Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
    return max(counts.values()) * n / len(tokens)


def oracle_duplicate_ngram_fraction(tokens, n):
    if len(tokens) < n:
        return 0.0
    grams = [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]
    counts = Counter(grams)
    covered = set()
    for i, gram in enumerate(grams):
        if counts[gram] >= 2:
            covered.update(range(i, i + n))
    return len(covered) / len(tokens)


def oracle_exact_jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def words(*names):
    return " ".join(names)


class TestWordCountFilter:
    def test_boundary_nine_drops_ten_keeps(self):
        config = FilterConfig()
        nine = make_instruction(" ".join(f"w{i}" for i in range(9)))
        ten = make_instruction(" ".join(f"w{i}" for i in range(10)))
        assert word_count_filter(nine, config).keep is False
        assert word_count_filter(nine, config).rule == "word_count"
        assert word_count_filter(ten, config).keep is True

    def test_effectively_empty_text_drops(self):
        config = FilterConfig()
        assert word_count_filter(make_instruction("."), config).keep is False

    def test_segmenter_failure_fails_closed(self):
        class Broken:
            name = "broken"

            def segment(self, text):
                raise RuntimeError("no dictionary")

        decision = word_count_filter(make_instruction("some text here"), FilterConfig(), Broken())
        assert decision.keep is False
        assert decision.rule == "segmentation_error"

    def test_appending_text_never_flips_keep_to_drop(self):
        # Property: word counts are monotone under appending.
        config = FilterConfig()
        rng = random.Random(99)
        pieces = ["alpha", "beta", "漢字試験", "ひらがな", "カタカナ", "12", "x"]
        for _ in range(200):
            base = " ".join(rng.choices(pieces, k=rng.randint(1, 15)))
            suffix = rng.choice(["", " ", "tail"]) + rng.choice(pieces)
            record = make_instruction(base) if base.strip() else None
            if record is None:
                continue
            if word_count_filter(record, config).keep:
                longer = make_instruction(base + suffix)
                assert word_count_filter(longer, config).keep


class TestSegmenter:
    def test_script_runs_split(self):
        assert DEFAULT_SEGMENTER.segment("漢字かなカナ word") == ["漢字", "かな", "カナ", "word"]

    def test_plain_words(self):
        assert DEFAULT_SEGMENTER.segment("Plain words, with punctuation!") == [
            "Plain",
            "words",
            "with",
            "punctuation",
        ]


class TestNgramFilter:
    def test_alternating_bigram_matches_oracle_and_drops(self):
        # Frozen from the oracle: tokens a b a b a b a b, most frequent
        # bigram "a b" occurs 4 times -> 4*2/8 = 1.0, over a 0.5 threshold.
        tokens = "a b a b a b a b".split()
        expected = oracle_top_ngram_fraction(tokens, 2)
        assert expected == 1.0
        rule = NgramRule(2, NgramMetric.TOP_NGRAM_FRACTION, 0.5)
        assert ngram_metric_value(tokens, rule) == expected
        config = FilterConfig(ngram_rules=(rule,))
        decision, metrics = ngram_filter(make_instruction(words(*tokens)), config)
        assert decision.keep is False
        assert decision.rule == "top_ngram_fraction_2"
        assert metrics["top_ngram_fraction_2"] == expected

    def test_distinct_tokens_all_duplicate_fractions_zero(self):
        tokens = [f"tok{i}" for i in range(30)]
        config = FilterConfig()
        decision, metrics = ngram_filter(make_instruction(words(*tokens)), config)
        assert decision.keep is True
        for rule in config.ngram_rules:
            if rule.metric is NgramMetric.DUPLICATE_NGRAM_FRACTION:
                assert metrics[rule.name] == 0.0

    def test_short_text_vacuously_passes(self):
        config = FilterConfig(ngram_rules=(NgramRule(2, NgramMetric.TOP_NGRAM_FRACTION, 0.2),))
        decision, metrics = ngram_filter(make_instruction("single"), config)
        assert decision.keep is True
        assert metrics["top_ngram_fraction_2"] == 0.0

    @pytest.mark.parametrize("metric", list(NgramMetric))
    @pytest.mark.parametrize("n", [2, 3, 5])
    def test_random_texts_match_oracle(self, metric, n):
        rng = random.Random(n * 1000 + len(metric.value))
        oracle = oracle_top_ngram_fraction if metric is NgramMetric.TOP_NGRAM_FRACTION else oracle_duplicate_ngram_fraction
        rule = NgramRule(n, metric, 1.0)
        for _ in range(100):
            tokens = [f"w{rng.randint(0, 6)}" for _ in range(rng.randint(0, 40))]
            assert ngram_metric_value(tokens, rule) == pytest.approx(oracle(tokens, n))


class TestShingles:
    def test_word_shingles(self):
        got = extract_shingles("a b c d e f", ShingleConfig(unit=ShingleUnit.WORD, width=5))
        assert got == {"a b c d e", "b c d e f"}

    def test_character_shingles(self):
        got = extract_shingles("abcd", ShingleConfig(unit=ShingleUnit.CHARACTER, width=3))
        assert got == {"abc", "bcd"}

    def test_too_short_yields_empty(self):
        assert extract_shingles("a b", ShingleConfig(width=5)) == set()


def random_text(rng, vocab, length):
    return [f"w{rng.randrange(vocab)}" for _ in range(length)]


def shingle_set(tokens, width=5):
    return extract_shingles(" ".join(tokens), ShingleConfig(width=width))


class TestMinHash:
    CONFIG = MinHashConfig(seed=7)

    def test_identical_texts_identical_signatures(self):
        shingles = sorted(shingle_set("a b c d e f g h i j".split()))
        sig_a = minhash_signature("a", shingles, self.CONFIG)
        sig_b = minhash_signature("b", shingles, self.CONFIG)
        assert sig_a.values == sig_b.values
        assert len(sig_a.values) == 128

    def test_no_shingles_rejected(self):
        with pytest.raises(ValueError):
            minhash_signature("x", [], self.CONFIG)

    def test_estimator_tracks_exact_jaccard(self):
        # 200 random pairs; mean |estimated - exact| <= 0.09 at 128 perms,
        # exact Jaccard from the brute-force shingle-set oracle.
        rng = random.Random(20240901)
        errors = []
        for i in range(200):
            base = random_text(rng, vocab=40, length=30)
            variant = list(base)
            for _ in range(i % 31):
                variant[rng.randrange(len(variant))] = f"w{rng.randrange(40)}"
            set_a, set_b = shingle_set(base), shingle_set(variant)
            exact = oracle_exact_jaccard(set_a, set_b)
            sig_a = minhash_signature("a", sorted(set_a), self.CONFIG)
            sig_b = minhash_signature("b", sorted(set_b), self.CONFIG)
            errors.append(abs(estimated_jaccard(sig_a, sig_b) - exact))
        assert sum(errors) / len(errors) <= 0.09

    def test_disjoint_sets_rarely_agree(self):
        # Disjoint shingle sets over 100 seeded trials: agreement <= 0.06.
        rng = random.Random(5)
        for seed in range(100):
            config = MinHashConfig(seed=seed)
            left = {f"left {i} {rng.randrange(1000)}" for i in range(20)}
            right = {f"right {i} {rng.randrange(1000)}" for i in range(20)}
            sig_a = minhash_signature("a", sorted(left), config)
            sig_b = minhash_signature("b", sorted(right), config)
            assert estimated_jaccard(sig_a, sig_b) <= 0.06


class TestUnionFind:
    def test_components(self):
        uf = UnionFind()
        uf.union("a", "b")
        uf.union("b", "c")
        uf.union("x", "y")
        assert uf.find("a") == uf.find("c")
        assert uf.find("x") != uf.find("a")


def build_corpus(seed, size):
    """Corpus of distinct texts plus 5 planted near-duplicate pairs.

    Returns (texts keyed by id, planted pair id tuples).
    """
    rng = random.Random(seed)
    texts = {}
    for i in range(size):
        texts[f"r{i:04d}"] = random_text(rng, vocab=5000, length=60)
    planted = []
    plant_ids = rng.sample(sorted(texts), 5)
    for i, base_id in enumerate(plant_ids):
        dup_id = f"d{i:04d}"
        texts[dup_id] = texts[base_id] + [f"extra{i}"]
        planted.append((base_id, dup_id))
    return texts, planted


class TestLshDedup:
    CONFIG = MinHashConfig(seed=3)

    def sign_all(self, texts, config=None):
        config = config or self.CONFIG
        return [minhash_signature(rid, sorted(shingle_set(tokens)), config) for rid, tokens in sorted(texts.items())]

    def test_identical_records_one_survivor(self):
        tokens = "p q r s t u v w x y".split()
        sigs = self.sign_all({"a": tokens, "b": tokens})
        result = lsh_dedup(sigs, self.CONFIG)
        assert result.survivors == {"a"}
        assert result.clusters == [{"survivor_id": "a", "member_ids": ["a", "b"]}]
        assert result.duplicates_removed == 1

    def test_planted_near_duplicates_match_pairwise_oracle(self):
        texts, planted = build_corpus(seed=11, size=50)
        shingles = {rid: shingle_set(tokens) for rid, tokens in texts.items()}
        sigs = self.sign_all(texts)
        result = lsh_dedup(sigs, self.CONFIG)
        cluster_of = {}
        for idx, cluster in enumerate(result.clusters):
            for member in cluster["member_ids"]:
                cluster_of[member] = idx
        ids = sorted(texts)
        for i, left in enumerate(ids):
            for right in ids[i + 1 :]:
                exact = oracle_exact_jaccard(shingles[left], shingles[right])
                together = left in cluster_of and cluster_of.get(left) == cluster_of.get(right)
                if exact >= 0.9:
                    assert together, f"{left}/{right} at J={exact:.3f} not clustered"
                if exact <= 0.5:
                    assert not together, f"{left}/{right} at J={exact:.3f} wrongly merged"
        for left, right in planted:
            assert oracle_exact_jaccard(shingles[left], shingles[right]) >= 0.9

    def test_all_distinct_corpus_all_survive(self):
        rng = random.Random(42)
        texts = {f"r{i}": random_text(rng, vocab=5000, length=40) for i in range(30)}
        shingles = {rid: shingle_set(tokens) for rid, tokens in texts.items()}
        ids = sorted(texts)
        for i, left in enumerate(ids):
            for right in ids[i + 1 :]:
                assert oracle_exact_jaccard(shingles[left], shingles[right]) < 0.2
        result = lsh_dedup(self.sign_all(texts), self.CONFIG)
        assert result.survivors == set(ids)
        assert result.clusters == []

    def test_deterministic_across_runs(self):
        texts, _ = build_corpus(seed=21, size=40)
        first = lsh_dedup(self.sign_all(texts), self.CONFIG)
        second = lsh_dedup(self.sign_all(texts), self.CONFIG)
        assert first.survivors == second.survivors
        assert first.clusters == second.clusters

    def test_incompatible_signatures_rejected(self):
        good = minhash_signature("a", ["s1 s2 s3 s4 s5"], self.CONFIG)
        bad = MinHashSignature(record_id="b", values=good.values[:64])
        with pytest.raises(ValueError, match="incompatible signatures"):
            lsh_dedup([good, bad], self.CONFIG)


def test_exact_dedup_groups_identical_texts():
    result = exact_dedup([("b", "same"), ("a", "same"), ("c", "other")])
    assert result.survivors == {"a", "c"}
    assert result.clusters == [{"survivor_id": "a", "member_ids": ["a", "b"]}]


def test_filter_config_validation():
    with pytest.raises(ValueError):
        MinHashConfig(num_permutations=100, bands=16, rows=8)
    with pytest.raises(ValueError):
        NgramRule(1, NgramMetric.TOP_NGRAM_FRACTION, 0.5)
    with pytest.raises(ValueError):
        FilterConfig(min_words=0)
