"""Embedding provider handles consumed by the text metrics.

Three interchangeable sources: a deterministic one-hot stub (tests and
offline runs), precomputed-embedding JSONL files, and the HTTP embedding
service. All expose ``model_id``, ``token_embeddings(text, text_id=None)``
and ``sentence_embedding(text, text_id=None)``.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from pathlib import Path

import numpy as np
import requests

from .errors import EmptyMatrix, InputError, ProviderUnreachable
from .metrics_text import SentenceEmbedding, TokenEmbeddingMatrix, tokenize

EMBED_URL_ENV = "VOLMO_EMBED_URL"


def default_text_id(text: str) -> str:
    """Stable id for a text when the caller supplies none.

    The batch embedding writer uses the same rule, so precomputed files
    and lookups agree without explicit ids.
    """
    return "sha256:" + hashlib.sha256(text.encode("utf-8")).hexdigest()


class OneHotProvider:
    """Deterministic stub: orthonormal one-hot token embeddings.

    Each distinct token type gets its own axis, assigned in first-seen
    order inside a fixed dimension so vectors from separate calls stay
    comparable. The dot product of two token vectors is therefore 1 iff
    the types match, which reduces greedy matching to set membership.
    Sentence embeddings are the normalized bag-of-types vector.
    """

    def __init__(self, dim: int = 4096, policy: str = "default"):
        self.model_id = f"stub-one-hot-{dim}"
        self.dim = dim
        self._policy = policy
        self._axis: dict[str, int] = {}
        self._lock = threading.Lock()

    def _index(self, token: str) -> int:
        with self._lock:
            idx = self._axis.get(token)
            if idx is None:
                idx = len(self._axis)
                if idx >= self.dim:
                    raise InputError(
                        f"one-hot vocabulary exceeded dim={self.dim}; raise dim"
                    )
                self._axis[token] = idx
            return idx

    def token_embeddings(self, text: str, text_id: str | None = None) -> TokenEmbeddingMatrix:
        tokens = tokenize(text, self._policy).tokens
        vectors = np.zeros((len(tokens), self.dim))
        for row, tok in enumerate(tokens):
            vectors[row, self._index(tok)] = 1.0
        return TokenEmbeddingMatrix(vectors, normalized=True, tokens=tokens)

    def sentence_embedding(self, text: str, text_id: str | None = None) -> SentenceEmbedding:
        matrix = self.token_embeddings(text)
        if len(matrix) == 0:
            raise EmptyMatrix("cannot embed an empty text")
        v = matrix.vectors.sum(axis=0)
        return SentenceEmbedding.from_vector(v / np.linalg.norm(v))


class PrecomputedProvider:
    """Reads the provider-independent precomputed-embedding JSONL format.

    One object per text id:
    ``{"id": str, "kind": "tokens"|"sentence", "model": str, "dim": int,
    "tokens": [str]?, "vectors": [[float]]}``. Lookups fall back to
    :func:`default_text_id` when no explicit id is given.
    """

    def __init__(self, paths: str | Path | list):
        if isinstance(paths, (str, Path)):
            paths = [paths]
        self._tokens: dict[str, dict] = {}
        self._sentences: dict[str, dict] = {}
        models = set()
        for path in paths:
            with open(path, encoding="utf-8") as fh:
                for line_no, line in enumerate(fh, 1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError as exc:
                        raise InputError(f"{path}:{line_no}: bad JSON ({exc})") from exc
                    kind = rec.get("kind")
                    if kind == "tokens":
                        self._tokens[rec["id"]] = rec
                    elif kind == "sentence":
                        self._sentences[rec["id"]] = rec
                    else:
                        raise InputError(f"{path}:{line_no}: unknown kind {kind!r}")
                    models.add(rec.get("model", "unknown"))
        self.model_id = models.pop() if len(models) == 1 else "+".join(sorted(models)) or "empty"

    def _lookup(self, table: dict, text: str, text_id: str | None, kind: str) -> dict:
        key = text_id or default_text_id(text)
        try:
            return table[key]
        except KeyError:
            raise InputError(f"no precomputed {kind} embedding for id {key!r}") from None

    def token_embeddings(self, text: str, text_id: str | None = None) -> TokenEmbeddingMatrix:
        rec = self._lookup(self._tokens, text, text_id, "tokens")
        return TokenEmbeddingMatrix.from_vectors(rec["vectors"], tokens=rec.get("tokens"))

    def sentence_embedding(self, text: str, text_id: str | None = None) -> SentenceEmbedding:
        rec = self._lookup(self._sentences, text, text_id, "sentence")
        return SentenceEmbedding.from_vector(rec["vectors"][0])


class HttpProvider:
    """Client for the embedding microservice protocol.

    POSTs ``{"model", "texts", "kind", "normalize"}`` to
    ``/v1/embed/tokens`` and ``/v1/embed/sentence``; the returned token
    list is taken as authoritative (the service owns subword alignment).
    """

    def __init__(
        self,
        base_url: str | None = None,
        model: str = "default",
        timeout: float = 60.0,
        api_key: str | None = None,
        session: requests.Session | None = None,
    ):
        base_url = base_url or os.environ.get(EMBED_URL_ENV)
        if not base_url:
            raise InputError(f"no embedding endpoint; pass base_url or set {EMBED_URL_ENV}")
        self._base = base_url.rstrip("/")
        self._model = model
        self._timeout = timeout
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._session = session or requests.Session()
        self.model_id = model

    def _post(self, route: str, texts: list[str]) -> dict:
        payload = {"model": self._model, "texts": texts, "kind": route.rsplit("/", 1)[-1],
                   "normalize": True}
        try:
            resp = self._session.post(
                f"{self._base}{route}", json=payload, timeout=self._timeout,
                headers=self._headers,
            )
        except requests.RequestException as exc:
            raise ProviderUnreachable(f"embedding service unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise ProviderUnreachable(
                f"embedding service returned {resp.status_code}: {resp.text[:200]}"
            )
        return resp.json()

    def token_embeddings(self, text: str, text_id: str | None = None) -> TokenEmbeddingMatrix:
        body = self._post("/v1/embed/tokens", [text])
        item = body["items"][0]
        return TokenEmbeddingMatrix.from_vectors(item["vectors"], tokens=item.get("tokens"))

    def sentence_embedding(self, text: str, text_id: str | None = None) -> SentenceEmbedding:
        body = self._post("/v1/embed/sentence", [text])
        return SentenceEmbedding.from_vector(body["items"][0]["vectors"][0])
