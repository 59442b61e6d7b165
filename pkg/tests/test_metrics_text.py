import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volmo.errors import (
    DimMismatch,
    EmptyCandidate,
    EmptyMatrix,
    EmptySequence,
    UnknownPolicy,
    ZeroVector,
)
from volmo.metrics_text import (
    SentenceEmbedding,
    TokenEmbeddingMatrix,
    bertscore,
    bleu,
    join_tokens,
    lcs_length,
    rouge_l,
    sbert_similarity,
    score_corpus,
    score_pair,
    tokenize,
)
from volmo.providers import OneHotProvider


def brute_force_lcs(x, y):
    """Oracle: enumerate every subsequence of x, keep those also in y."""
    def is_subsequence(sub, seq):
        it = iter(seq)
        return all(tok in it for tok in sub)

    best = 0
    for k in range(len(x), 0, -1):
        for idxs in itertools.combinations(range(len(x)), k):
            if is_subsequence([x[i] for i in idxs], y):
                return k
    return best


class TestTokenize:
    def test_default_policy(self):
        assert tokenize("The cat sat.").tokens == ("the", "cat", "sat", ".")

    def test_empty(self):
        assert tokenize("").tokens == ()

    def test_unknown_policy(self):
        with pytest.raises(UnknownPolicy):
            tokenize("x", policy="nope")

    def test_idempotence_on_random_ascii(self):
        rng = np.random.default_rng(7)
        chars = "abc XY.z,;()!-12 \t"
        for _ in range(1000):
            s = "".join(rng.choice(list(chars), size=rng.integers(0, 40)))
            once = tokenize(s)
            again = tokenize(join_tokens(once))
            assert once.tokens == again.tokens

    @given(st.text(max_size=60))
    def test_idempotence_property(self, s):
        once = tokenize(s)
        assert tokenize(join_tokens(once)).tokens == once.tokens


class TestBleu:
    def test_identity_six_tokens(self):
        seq = tokenize("a b c d e f", policy="whitespace")
        score, prof = bleu(seq, seq, order=4)
        assert score == 1.0
        assert prof.bp == 1.0
        assert all(p == 1.0 for p in prof.p_n)

    def test_brevity_penalty_hand_case(self):
        cand = tokenize("the cat sat")
        ref = tokenize("the cat sat on the mat")
        score, prof = bleu(cand, ref, order=1)
        assert prof.p_n == [1.0]
        assert prof.bp == pytest.approx(math.exp(1 - 6 / 3), abs=1e-12)
        assert score == pytest.approx(math.exp(-1), abs=1e-9)

    def test_disjoint_is_zero(self):
        score, _ = bleu(tokenize("a b c"), tokenize("x y z"), order=1)
        assert score == 0.0

    def test_short_candidate_zero_at_high_order(self):
        # candidate has no 4-grams -> p_4 undefined -> score 0, no smoothing
        score, prof = bleu(tokenize("a b"), tokenize("a b"), order=4)
        assert score == 0.0
        assert prof.p_n[3] == 0.0

    def test_empty_candidate(self):
        with pytest.raises(EmptyCandidate):
            bleu(tokenize(""), tokenize("a"), order=1)

    def test_clipping(self):
        # "the the the" vs one "the": clipped count 1 of 3
        score, prof = bleu(
            tokenize("the the the", policy="whitespace"),
            tokenize("the cat", policy="whitespace"),
            order=1,
        )
        assert prof.p_n == [pytest.approx(1 / 3)]

    @given(
        st.lists(st.sampled_from("abcde"), min_size=1, max_size=10),
        st.lists(st.sampled_from("abcde"), min_size=1, max_size=10),
        st.integers(min_value=1, max_value=4),
    )
    def test_bounds(self, xs, ys, order):
        cand = tokenize(" ".join(xs), policy="whitespace")
        ref = tokenize(" ".join(ys), policy="whitespace")
        score, prof = bleu(cand, ref, order)
        assert 0.0 <= score <= 1.0
        assert 0.0 < prof.bp <= 1.0
        assert all(0.0 <= p <= 1.0 for p in prof.p_n)
        assert sum(prof.w_n) == pytest.approx(1.0)


class TestRougeL:
    def test_identity(self):
        seq = tokenize("a b c", policy="whitespace")
        align, f = rouge_l(seq, seq)
        assert (align.r_lcs, align.p_lcs, f) == (1.0, 1.0, 1.0)

    def test_hand_case(self):
        x = tokenize("a b c d", policy="whitespace")
        y = tokenize("a c d e", policy="whitespace")
        assert brute_force_lcs(x.tokens, y.tokens) == 3
        align, f = rouge_l(x, y, beta=1.0)
        assert align.lcs_len == 3
        assert align.r_lcs == align.p_lcs == pytest.approx(0.75)
        assert f == pytest.approx(0.75)

    def test_disjoint(self):
        _, f = rouge_l(tokenize("a b"), tokenize("x y"))
        assert f == 0.0

    def test_empty_raises(self):
        with pytest.raises(EmptySequence):
            rouge_l(tokenize(""), tokenize("a"))

    def test_dp_equals_brute_force_exhaustive(self):
        # all length<=8 pairs over a 5-symbol vocabulary, sampled densely
        rng = np.random.default_rng(11)
        vocab = list("abcde")
        pairs = 0
        for _ in range(250):
            x = [vocab[i] for i in rng.integers(0, 5, size=rng.integers(0, 9))]
            y = [vocab[i] for i in rng.integers(0, 5, size=rng.integers(0, 9))]
            assert lcs_length(x, y) == brute_force_lcs(x, y)
            pairs += 1
        assert pairs >= 200

    def test_symmetry_at_beta_one(self):
        x = tokenize("a b c d e", policy="whitespace")
        y = tokenize("b c e f", policy="whitespace")
        a1, f1 = rouge_l(x, y, beta=1.0)
        a2, f2 = rouge_l(y, x, beta=1.0)
        assert f1 == pytest.approx(f2)
        assert a1.r_lcs == pytest.approx(a2.p_lcs)
        assert a1.p_lcs == pytest.approx(a2.r_lcs)


def one_hot(tokens, vocab):
    dim = len(vocab)
    vecs = np.zeros((len(tokens), dim))
    for i, t in enumerate(tokens):
        vecs[i, vocab.index(t)] = 1.0
    return TokenEmbeddingMatrix(vecs, normalized=True, tokens=tuple(tokens))


class TestBertscore:
    def test_identity(self):
        m = one_hot(["a", "b"], ["a", "b", "c"])
        s = bertscore(m, m)
        assert s == {"p": 1.0, "r": 1.0, "f": 1.0}

    def test_one_hot_reduction_hand_case(self):
        vocab = ["a", "b", "c"]
        s = bertscore(one_hot(["a", "b"], vocab), one_hot(["a", "c"], vocab))
        assert s["p"] == pytest.approx(0.5, abs=1e-12)
        assert s["r"] == pytest.approx(0.5, abs=1e-12)
        assert s["f"] == pytest.approx(0.5, abs=1e-12)

    def test_duplicate_reference(self):
        vocab = ["a"]
        s = bertscore(one_hot(["a"], vocab), one_hot(["a", "a", "a"], vocab))
        assert s["p"] == 1.0 and s["r"] == 1.0

    def test_one_hot_reduction_random(self):
        # oracle: membership fractions over 100 random pairs
        rng = np.random.default_rng(3)
        vocab = [f"t{i}" for i in range(12)]
        for _ in range(100):
            cand = [vocab[i] for i in rng.integers(0, 12, size=rng.integers(1, 9))]
            ref = [vocab[i] for i in rng.integers(0, 12, size=rng.integers(1, 9))]
            s = bertscore(one_hot(cand, vocab), one_hot(ref, vocab))
            p_expect = sum(t in set(ref) for t in cand) / len(cand)
            r_expect = sum(t in set(cand) for t in ref) / len(ref)
            assert s["p"] == pytest.approx(p_expect, abs=1e-12)
            assert s["r"] == pytest.approx(r_expect, abs=1e-12)

    def test_monotonic_in_reference_extension(self):
        # appending a reference token equal to an unmatched candidate token
        # never decreases P
        vocab = ["a", "b", "c"]
        base = bertscore(one_hot(["a", "b"], vocab), one_hot(["a"], vocab))
        extended = bertscore(one_hot(["a", "b"], vocab), one_hot(["a", "b"], vocab))
        assert extended["p"] >= base["p"]

    def test_harmonic_mean_identity(self):
        vocab = ["a", "b", "c", "d"]
        s = bertscore(one_hot(["a", "b", "c"], vocab), one_hot(["a", "d"], vocab))
        assert s["f"] * (s["p"] + s["r"]) == pytest.approx(2 * s["p"] * s["r"], abs=1e-12)

    def test_dim_mismatch(self):
        a = TokenEmbeddingMatrix(np.eye(2), normalized=True)
        b = TokenEmbeddingMatrix(np.eye(3), normalized=True)
        with pytest.raises(DimMismatch):
            bertscore(a, b)

    def test_empty_matrix(self):
        a = TokenEmbeddingMatrix(np.zeros((0, 3)), normalized=True)
        b = TokenEmbeddingMatrix(np.eye(3), normalized=True)
        with pytest.raises(EmptyMatrix):
            bertscore(a, b)

    def test_unnormalized_requires_flag(self):
        a = TokenEmbeddingMatrix(np.eye(2) * 2, normalized=False)
        with pytest.raises(ValueError):
            bertscore(a, a)
        # raw dot of 2*I has diagonal 4; means are floored/capped into [0, 1]
        assert bertscore(a, a, raw_dot=True)["p"] == 1.0


class TestSbert:
    def test_identical(self):
        u = SentenceEmbedding.from_vector([1.0, 0.0])
        assert sbert_similarity(u, u) == 1.0

    def test_orthogonal(self):
        u = SentenceEmbedding.from_vector([1.0, 0.0])
        v = SentenceEmbedding.from_vector([0.0, 1.0])
        assert sbert_similarity(u, v) == 0.0

    def test_hand_case(self):
        u = SentenceEmbedding.from_vector([3.0, 4.0])
        v = SentenceEmbedding.from_vector([4.0, 3.0])
        assert sbert_similarity(u, v) == pytest.approx(24 / 25, abs=1e-12)

    def test_zero_vector(self):
        u = SentenceEmbedding.from_vector([0.0, 0.0])
        v = SentenceEmbedding.from_vector([1.0, 0.0])
        with pytest.raises(ZeroVector):
            sbert_similarity(u, v)

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            sbert_similarity(
                SentenceEmbedding.from_vector([1.0]),
                SentenceEmbedding.from_vector([1.0, 0.0]),
            )

    @given(
        st.lists(st.floats(-5, 5), min_size=2, max_size=6),
        st.lists(st.floats(-5, 5), min_size=2, max_size=6),
    )
    def test_range(self, a, b):
        n = min(len(a), len(b))
        u = SentenceEmbedding.from_vector(a[:n])
        v = SentenceEmbedding.from_vector(b[:n])
        if np.linalg.norm(u.vector) == 0 or np.linalg.norm(v.vector) == 0:
            return
        assert -1.0 <= sbert_similarity(u, v) <= 1.0


class TestScorePair:
    def test_identity_stack(self):
        provider = OneHotProvider(dim=64)
        text = "color fundus photograph of the right eye"
        s = score_pair(text, text, provider)
        assert s.bleu[1] == pytest.approx(1.0, abs=1e-6)
        assert s.bleu[4] == pytest.approx(1.0, abs=1e-6)
        assert s.rouge_l["f"] == pytest.approx(1.0, abs=1e-6)
        assert s.bertscore["f"] == pytest.approx(1.0, abs=1e-6)
        assert s.sbert == pytest.approx(1.0, abs=1e-6)
        assert s.policy_id == "default"
        assert s.provider_model == provider.model_id

    def test_corpus_mean_matches_naive_recount(self):
        # oracle: independent unigram-precision implementation
        rng = np.random.default_rng(5)
        vocab = ["drusen", "macula", "hole", "edema", "left", "eye", "shows", "the"]
        pairs = []
        for i in range(40):
            cand = " ".join(rng.choice(vocab, size=rng.integers(3, 9)))
            ref = " ".join(rng.choice(vocab, size=rng.integers(3, 9)))
            pairs.append((f"p{i}", cand, ref))
        scored, errors = score_corpus(pairs, OneHotProvider(dim=64))
        assert not errors

        def naive_bleu1(c, r):
            ct, rt = c.split(), r.split()
            hits = 0
            pool = list(rt)
            for t in ct:
                if t in pool:
                    pool.remove(t)
                    hits += 1
            p1 = hits / len(ct)
            bp = 1.0 if len(ct) >= len(rt) else math.exp(1 - len(rt) / len(ct))
            return bp * p1

        mean_impl = sum(s.bleu[1] for _, s in scored) / len(scored)
        mean_naive = sum(naive_bleu1(c, r) for _, c, r in pairs) / len(pairs)
        assert mean_impl == pytest.approx(mean_naive, abs=1e-12)

    def test_error_ledger_isolates_failures(self):
        pairs = [("ok", "a b", "a b"), ("bad", "", "a b")]
        scored, errors = score_corpus(pairs, OneHotProvider(dim=16))
        assert len(scored) == 1 and scored[0][0] == "ok"
        assert len(errors) == 1 and errors[0]["pair_id"] == "bad"

    @settings(max_examples=60)
    @given(
        st.lists(st.sampled_from("abcde"), min_size=1, max_size=8),
        st.lists(st.sampled_from("abcde"), min_size=1, max_size=8),
    )
    def test_component_ranges(self, xs, ys):
        s = score_pair(" ".join(xs), " ".join(ys), OneHotProvider(dim=16))
        for v in s.bleu.values():
            assert 0.0 <= v <= 1.0
        for v in s.rouge_l.values():
            assert 0.0 <= v <= 1.0
        for v in s.bertscore.values():
            assert 0.0 <= v <= 1.0
        assert -1.0 <= s.sbert <= 1.0
