"""Text-generation metrics over token sequences and embeddings.

Implements the four metric families used for image-description and
assessment-generation scoring: n-gram precision with a brevity penalty
(BLEU-1..4), longest-common-subsequence recall/precision/F (ROUGE-L),
greedy token-embedding matching (BERTScore P/R/F), and sentence-level
cosine similarity (SBERT). All operations are pure; embeddings arrive
through a provider handle so the metric code never touches a model.
"""

from __future__ import annotations

import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DimMismatch,
    EmptyCandidate,
    EmptyMatrix,
    EmptySequence,
    UnknownPolicy,
    ZeroVector,
)

# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenSequence:
    """An ordered token list tagged with the policy that produced it.

    Scores are comparable only between sequences sharing a ``policy_id``.
    """

    tokens: tuple[str, ...]
    policy_id: str

    def __post_init__(self):
        if any(t == "" for t in self.tokens):
            raise ValueError("empty token in sequence")

    def __len__(self) -> int:
        return len(self.tokens)


def _default_policy(text: str) -> list[str]:
    # NFC, lowercase, whitespace split, punctuation detached as 1-char tokens
    out: list[str] = []
    for chunk in unicodedata.normalize("NFC", text).lower().split():
        run = ""
        for ch in chunk:
            if unicodedata.category(ch).startswith("P"):
                if run:
                    out.append(run)
                    run = ""
                out.append(ch)
            else:
                run += ch
        if run:
            out.append(run)
    return out


def _whitespace_policy(text: str) -> list[str]:
    return unicodedata.normalize("NFC", text).split()


#: policy_id -> (tokenizer, joiner). The joiner must make tokenization
#: idempotent: tokenize(join(tokens)) == tokens.
POLICIES: dict[str, tuple[Callable[[str], list[str]], str]] = {
    "default": (_default_policy, " "),
    "whitespace": (_whitespace_policy, " "),
}


def tokenize(text: str, policy: str = "default") -> TokenSequence:
    """Tokenize ``text`` under a registered policy.

    Raises ``UnknownPolicy`` for unregistered policy ids.
    """
    try:
        fn, _ = POLICIES[policy]
    except KeyError:
        raise UnknownPolicy(f"tokenization policy {policy!r} is not registered") from None
    return TokenSequence(tuple(fn(text)), policy)


def join_tokens(seq: TokenSequence) -> str:
    """Inverse-ish of :func:`tokenize`: joining then re-tokenizing is stable."""
    _, joiner = POLICIES[seq.policy_id]
    return joiner.join(seq.tokens)


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


@dataclass
class NGramPrecisionProfile:
    """Per-order modified precisions plus the brevity-penalty inputs.

    ``p_n[i]`` is the clipped n-gram match fraction at order ``i+1``,
    ``w_n`` the (uniform) order weights, ``bp`` the brevity penalty,
    ``c`` and ``r`` the candidate and reference lengths.
    """

    p_n: list[float]
    w_n: list[float]
    bp: float
    c: int
    r: int


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    candidate: TokenSequence, reference: TokenSequence, order: int = 4
) -> tuple[float, NGramPrecisionProfile]:
    """Score = BP * exp(sum_n w_n * log p_n) with uniform w_n = 1/order.

    No smoothing: any zero p_n (including orders the candidate is too
    short to populate) makes the score exactly 0. BP = 1 when the
    candidate is at least as long as the reference, else exp(1 - r/c).
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    cand, ref = candidate.tokens, reference.tokens
    c, r = len(cand), len(ref)
    if c == 0:
        raise EmptyCandidate("candidate has no tokens")

    p_n: list[float] = []
    for n in range(1, order + 1):
        cand_counts = _ngram_counts(cand, n)
        total = sum(cand_counts.values())
        if total == 0:
            p_n.append(0.0)
            continue
        ref_counts = _ngram_counts(ref, n)
        clipped = sum(min(k, ref_counts.get(g, 0)) for g, k in cand_counts.items())
        p_n.append(clipped / total)

    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    w_n = [1.0 / order] * order
    if any(p == 0.0 for p in p_n):
        score = 0.0
    else:
        score = bp * math.exp(sum(w * math.log(p) for w, p in zip(w_n, p_n)))
    return score, NGramPrecisionProfile(p_n, w_n, bp, c, r)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


@dataclass
class LcsAlignment:
    lcs_len: int
    len_x: int
    len_y: int
    r_lcs: float
    p_lcs: float
    beta: float


def lcs_length(x: Sequence, y: Sequence) -> int:
    """Longest-common-subsequence length by dynamic programming (rolling row)."""
    if not x or not y:
        return 0
    prev = [0] * (len(y) + 1)
    for xi in x:
        cur = [0]
        for j, yj in enumerate(y, 1):
            if xi == yj:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(
    candidate: TokenSequence, reference: TokenSequence, beta: float = 1.0
) -> tuple[LcsAlignment, float]:
    """F = (1 + beta^2) * R * P / (R + beta^2 * P) over the LCS length.

    The candidate is X (precision denominator) and the reference is Y
    (recall denominator). F is defined as 0 when the LCS is empty.
    """
    if beta <= 0:
        raise ValueError("beta must be > 0")
    x, y = candidate.tokens, reference.tokens
    if not x or not y:
        raise EmptySequence("rouge_l requires non-empty candidate and reference")
    l = lcs_length(x, y)
    p = l / len(x)
    r = l / len(y)
    f = 0.0 if l == 0 else (1 + beta**2) * r * p / (r + beta**2 * p)
    return LcsAlignment(l, len(x), len(y), r, p, beta), f


# ---------------------------------------------------------------------------
# Embedding-based metrics
# ---------------------------------------------------------------------------


@dataclass
class TokenEmbeddingMatrix:
    """One vector per token; rows unit-normalized unless built raw."""

    vectors: np.ndarray
    normalized: bool
    tokens: tuple[str, ...] | None = None

    @classmethod
    def from_vectors(
        cls, vectors, tokens: Sequence[str] | None = None, normalize: bool = True
    ) -> "TokenEmbeddingMatrix":
        arr = np.asarray(vectors, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("expected a 2-D array of token vectors")
        if normalize and arr.shape[0]:
            norms = np.linalg.norm(arr, axis=1, keepdims=True)
            if np.any(norms == 0):
                raise ZeroVector("cannot normalize a zero token vector")
            arr = arr / norms
        return cls(arr, normalize, tuple(tokens) if tokens is not None else None)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return int(self.vectors.shape[0])


@dataclass
class SentenceEmbedding:
    vector: np.ndarray

    @classmethod
    def from_vector(cls, vector) -> "SentenceEmbedding":
        return cls(np.asarray(vector, dtype=np.float64).reshape(-1))

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


def bertscore(
    cand: TokenEmbeddingMatrix, ref: TokenEmbeddingMatrix, raw_dot: bool = False
) -> dict[str, float]:
    """Greedy token matching: P averages each candidate token's best match
    against the reference, R the symmetric direction, F their harmonic mean.

    Requires unit-normalized rows (so the dot product is cosine) unless
    ``raw_dot`` is set. No IDF weighting, no baseline rescaling. Means are
    floored at 0 so components stay in [0, 1] for any embedding family.
    """
    if len(cand) == 0 or len(ref) == 0:
        raise EmptyMatrix("both token matrices must be non-empty")
    if cand.dim != ref.dim:
        raise DimMismatch(f"dim {cand.dim} vs {ref.dim}")
    if not raw_dot and not (cand.normalized and ref.normalized):
        raise ValueError("unnormalized matrices require raw_dot=True")

    sim = cand.vectors @ ref.vectors.T
    if not raw_dot:
        sim = np.clip(sim, -1.0, 1.0)
    p = float(min(max(sim.max(axis=1).mean(), 0.0), 1.0))
    r = float(min(max(sim.max(axis=0).mean(), 0.0), 1.0))
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return {"p": p, "r": r, "f": f}


def sbert_similarity(u: SentenceEmbedding, v: SentenceEmbedding) -> float:
    """Exact cosine u.v / (|u| |v|), clamped to [-1, 1] against float drift."""
    a, b = u.vector, v.vector
    if a.shape != b.shape:
        raise DimMismatch(f"dim {a.shape[0]} vs {b.shape[0]}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("sentence embeddings must be non-zero")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Pair scoring
# ---------------------------------------------------------------------------


@dataclass
class ScoreConfig:
    policy: str = "default"
    bleu_order: int = 4
    rouge_beta: float = 1.0


@dataclass
class TextScoreSet:
    """Per-pair scores across all four metric families."""

    bleu: dict[int, float]
    rouge_l: dict[str, float]
    bertscore: dict[str, float]
    sbert: float
    policy_id: str
    provider_model: str
    bleu_profile: NGramPrecisionProfile | None = field(repr=False, default=None)

    def to_json_dict(self) -> dict:
        return {
            "bleu": {str(n): v for n, v in sorted(self.bleu.items())},
            "rouge_l": self.rouge_l,
            "bertscore": self.bertscore,
            "sbert": self.sbert,
            "policy_id": self.policy_id,
            "provider_model": self.provider_model,
        }


def score_pair(candidate: str, reference: str, provider, config: ScoreConfig | None = None) -> TextScoreSet:
    """Score one candidate/reference pair under a single tokenization policy.

    ``provider`` supplies ``token_embeddings(text, text_id=None)`` and
    ``sentence_embedding(text, text_id=None)`` plus a ``model_id``; the
    result records both the model id and the policy id so downstream
    aggregation can refuse to mix incomparable scores.
    """
    cfg = config or ScoreConfig()
    cand = tokenize(candidate, cfg.policy)
    ref = tokenize(reference, cfg.policy)

    bleu_scores: dict[int, float] = {}
    profile = None
    for n in range(1, cfg.bleu_order + 1):
        score, prof = bleu(cand, ref, order=n)
        bleu_scores[n] = score
        profile = prof

    align, rouge_f = rouge_l(cand, ref, beta=cfg.rouge_beta)

    bert = bertscore(provider.token_embeddings(candidate), provider.token_embeddings(reference))
    sbert = sbert_similarity(
        provider.sentence_embedding(candidate), provider.sentence_embedding(reference)
    )

    return TextScoreSet(
        bleu=bleu_scores,
        rouge_l={"r": align.r_lcs, "p": align.p_lcs, "f": rouge_f},
        bertscore=bert,
        sbert=sbert,
        policy_id=cfg.policy,
        provider_model=provider.model_id,
        bleu_profile=profile,
    )


def score_corpus(
    pairs: Sequence[tuple[str, str, str]], provider, config: ScoreConfig | None = None
) -> tuple[list[tuple[str, TextScoreSet]], list[dict]]:
    """Score (pair_id, candidate, reference) triples, isolating failures.

    Returns (scored, error_ledger); a failing pair lands in the ledger
    with its id and error message instead of aborting the run.
    """
    scored: list[tuple[str, TextScoreSet]] = []
    errors: list[dict] = []
    for pair_id, cand, ref in pairs:
        try:
            scored.append((pair_id, score_pair(cand, ref, provider, config)))
        except Exception as exc:  # noqa: BLE001 - ledger isolates per-pair faults
            errors.append({"pair_id": pair_id, "error": type(exc).__name__, "message": str(exc)})
    return scored, errors
