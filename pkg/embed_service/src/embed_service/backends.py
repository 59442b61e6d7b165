"""Embedding backends behind the service's model registry.

Two families: ``hash:<dim>`` is a fully deterministic, dependency-free
backend (vectors derived from SHA-256 of each token, expanded by counter)
meant for tests, CI, and offline pipelines; ``hf:<model>`` wraps a
HuggingFace transformer when the optional extra is installed. The service
owns subword tokenization: callers consume the returned token list as-is.
"""

from __future__ import annotations

import hashlib
import re
import struct

import numpy as np

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

HASH_SCHEME = "embed-hash-v1"


class ModelNotLoaded(Exception):
    pass


def simple_tokenize(text: str) -> list[str]:
    """Lowercased word/punctuation tokens; any non-blank text yields >= 1."""
    return _TOKEN_RE.findall(text.lower())


class HashBackend:
    """Deterministic dense embeddings from SHA-256 token digests.

    Each float is carved from ``SHA-256(scheme || dim || token || counter)``
    and mapped into [-1, 1), so identical tokens always get identical
    vectors on every platform with no RNG in the loop.
    """

    def __init__(self, dim: int = 256):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim

    def _token_vector(self, token: str) -> np.ndarray:
        prefix = f"{HASH_SCHEME}:{self.dim}:".encode() + token.encode("utf-8")
        values = np.empty(self.dim, dtype=np.float64)
        filled = 0
        counter = 0
        while filled < self.dim:
            digest = hashlib.sha256(prefix + struct.pack("<Q", counter)).digest()
            for off in range(0, 32, 8):
                if filled >= self.dim:
                    break
                word = int.from_bytes(digest[off : off + 8], "big")
                values[filled] = word / 2**63 - 1.0
                filled += 1
            counter += 1
        return values

    def embed_tokens(self, text: str, normalize: bool) -> tuple[list[str], np.ndarray]:
        tokens = simple_tokenize(text)
        vectors = np.stack([self._token_vector(t) for t in tokens])
        if normalize:
            vectors = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
        return tokens, vectors

    def embed_sentence(self, text: str, normalize: bool) -> np.ndarray:
        _, vectors = self.embed_tokens(text, normalize=False)
        pooled = vectors.mean(axis=0)
        if normalize:
            pooled = pooled / np.linalg.norm(pooled)
        return pooled


class TransformerBackend:
    """HuggingFace transformer embeddings (optional extra).

    Token vectors are the final hidden states of non-special positions;
    the sentence vector is their mean pool. Inference runs in eval mode
    under ``no_grad`` so identical input gives identical output.
    """

    def __init__(self, model_name: str):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise ModelNotLoaded(
                f"transformers backend requires the 'transformers' extra: {exc}"
            ) from exc
        self._torch = torch
        self._tokenizer = AutoTokenizer.from_pretrained(model_name)
        self._model = AutoModel.from_pretrained(model_name)
        self._model.eval()
        self.dim = int(self._model.config.hidden_size)

    def _hidden_states(self, text: str):
        torch = self._torch
        encoded = self._tokenizer(text, return_tensors="pt", truncation=True)
        with torch.no_grad():
            hidden = self._model(**encoded).last_hidden_state.squeeze(0)
        ids = encoded["input_ids"].squeeze(0).tolist()
        special = set(self._tokenizer.all_special_ids)
        keep = [i for i, tok_id in enumerate(ids) if tok_id not in special]
        tokens = self._tokenizer.convert_ids_to_tokens([ids[i] for i in keep])
        return tokens, hidden[keep].numpy().astype(np.float64)

    def embed_tokens(self, text: str, normalize: bool) -> tuple[list[str], np.ndarray]:
        tokens, vectors = self._hidden_states(text)
        if normalize:
            vectors = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
        return tokens, vectors

    def embed_sentence(self, text: str, normalize: bool) -> np.ndarray:
        _, vectors = self._hidden_states(text)
        pooled = vectors.mean(axis=0)
        if normalize:
            pooled = pooled / np.linalg.norm(pooled)
        return pooled


def build_backend(spec: str):
    """Instantiate a backend from a spec string (``hash:256`` or ``hf:NAME``)."""
    if spec.startswith("hash"):
        _, _, dim = spec.partition(":")
        return HashBackend(int(dim) if dim else 256)
    if spec.startswith("hf:"):
        return TransformerBackend(spec[3:])
    raise ValueError(f"unknown backend spec {spec!r}; expected hash[:DIM] or hf:MODEL")


def parse_model_args(specs: list[str]) -> dict:
    """Parse repeated ``--model name=spec`` arguments into a registry."""
    registry = {}
    for item in specs:
        name, sep, backend_spec = item.partition("=")
        if not sep or not name:
            raise ValueError(f"--model expects NAME=SPEC, got {item!r}")
        registry[name] = build_backend(backend_spec)
    return registry
