"""Batch precompute mode.

Reads ``{"id"?: str, "text": str, "kind"?: "tokens"|"sentence"}`` records
from a JSONL file and writes the provider-independent precomputed
embedding format consumed by downstream scorers: one object per (id,
kind) with ``{"id", "kind", "model", "dim", "tokens"?, "vectors"}``.
Records without an id get ``sha256:<hexdigest of the text>``, matching
the convention scorers use to look texts up without explicit ids.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

KINDS = ("tokens", "sentence")


def default_text_id(text: str) -> str:
    return "sha256:" + hashlib.sha256(text.encode("utf-8")).hexdigest()


def run_batch(
    in_path: str | Path,
    out_path: str | Path,
    registry: dict,
    model: str,
    kinds: tuple[str, ...] = KINDS,
    normalize: bool = True,
) -> dict:
    """Embed every input record with one model; returns run counters."""
    backend = registry.get(model)
    if backend is None:
        raise ValueError(f"model {model!r} is not loaded")
    stats = {"records": 0, "written": 0, "skipped": 0}
    with open(in_path, encoding="utf-8") as src, open(out_path, "w", encoding="utf-8") as dst:
        for line_no, line in enumerate(src, 1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            text = record.get("text", "")
            if not isinstance(text, str) or not text.strip():
                stats["skipped"] += 1
                continue
            stats["records"] += 1
            text_id = record.get("id") or default_text_id(text)
            wanted = (record["kind"],) if record.get("kind") in KINDS else kinds
            for kind in wanted:
                if kind == "tokens":
                    tokens, vectors = backend.embed_tokens(text, normalize)
                    out = {
                        "id": text_id,
                        "kind": "tokens",
                        "model": model,
                        "dim": int(vectors.shape[1]),
                        "tokens": tokens,
                        "vectors": vectors.tolist(),
                    }
                else:
                    vector = backend.embed_sentence(text, normalize)
                    out = {
                        "id": text_id,
                        "kind": "sentence",
                        "model": model,
                        "dim": int(vector.shape[0]),
                        "vectors": [vector.tolist()],
                    }
                dst.write(json.dumps(out, ensure_ascii=False) + "\n")
                stats["written"] += 1
    return stats
