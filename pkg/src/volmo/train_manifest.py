"""Canonical three-stage training configuration documents.

One hyperparameter table backs all three stages (frozen vision backbone,
trainable LLM and MLP projector); per-stage overrides are possible but
default to identical values. Emission is canonical: fixed key order,
stable JSON serialization, byte-identical across runs. Validation diffs a
document field by field against the canonical values.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import InputError, UnparseableDocument

STAGES = (1, 2, 3)

#: canonical hyperparameters; the freeze flags encode the frozen-encoder
#: strategy (backbone frozen, LLM and MLP projector trainable)
TABLE_VALUES = {
    "num_gpus": 4,
    "per_device_batch": 1,
    "grad_accum": 1,
    "precision": "bfloat16",
    "zero_stage": 1,
    "learning_rate": 4e-5,
    "scheduler": "cosine",
    "weight_decay": 0.01,
    "warmup_ratio": 0.03,
    "image_resolution": 448,
    "max_dynamic_patches": 6,
    "downsample_ratio": 0.5,
    "drop_path_rate": 0.1,
    "vision_select_layer": -1,
    "freeze_backbone": True,
    "freeze_llm": False,
    "freeze_mlp": False,
    "max_seq_len": 9000,
    "gradient_checkpointing": True,
    "group_by_length": True,
}

CANONICAL_KEY_ORDER = ("stage", *TABLE_VALUES)

MISSING = "<missing>"
UNEXPECTED = "<unexpected>"


def emit_training_config(stage: int, overrides: dict | None = None) -> dict:
    """The canonical config document for one stage, in canonical key order."""
    if stage not in STAGES:
        raise InputError(f"stage must be one of {STAGES}, got {stage!r}")
    values = dict(TABLE_VALUES)
    if overrides:
        unknown = set(overrides) - set(TABLE_VALUES)
        if unknown:
            raise InputError(f"unknown hyperparameters: {sorted(unknown)}")
        values.update(overrides)
    doc = {"stage": stage}
    doc.update({key: values[key] for key in TABLE_VALUES})
    return doc


def serialize_training_config(document: dict) -> str:
    """Canonical serialization: fixed key order, 2-space indent, newline-terminated."""
    ordered = {key: document[key] for key in CANONICAL_KEY_ORDER if key in document}
    ordered.update({k: v for k, v in document.items() if k not in ordered})
    return json.dumps(ordered, ensure_ascii=False, indent=2) + "\n"


def validate_training_config(document) -> tuple[bool, list[tuple[str, object, object]]]:
    """Diff a document against the canonical values.

    Accepts a dict or JSON text. Returns ``(ok, diffs)`` where each diff
    is ``(field, expected, actual)``; missing and unexpected fields count
    as deviations. ``ok`` is true iff there are no diffs.
    """
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise UnparseableDocument(str(exc)) from exc
    if not isinstance(document, dict):
        raise UnparseableDocument(f"expected a JSON object, got {type(document).__name__}")

    diffs: list[tuple[str, object, object]] = []
    stage = document.get("stage")
    if stage not in STAGES:
        diffs.append(("stage", f"one of {STAGES}", stage if "stage" in document else MISSING))
    for field_name, expected in TABLE_VALUES.items():
        if field_name not in document:
            diffs.append((field_name, expected, MISSING))
        elif document[field_name] != expected:
            diffs.append((field_name, expected, document[field_name]))
    for field_name in document:
        if field_name != "stage" and field_name not in TABLE_VALUES:
            diffs.append((field_name, UNEXPECTED, document[field_name]))
    return not diffs, diffs


def write_training_config(stage: int, out_dir: str | Path) -> Path:
    """Write ``train.stageN.json`` in canonical form."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"train.stage{stage}.json"
    path.write_text(serialize_training_config(emit_training_config(stage)), encoding="utf-8")
    return path
