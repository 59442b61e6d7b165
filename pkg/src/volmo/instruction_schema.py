"""Conversion of heterogeneous benchmark label tables into the unified
instruction-response schema.

Screening datasets become binary TRUE/FALSE question-answer instances over
a closed vocabulary of 12 conditions and signs; grading datasets become
severity-rating instances (DR stages 0-4, macular hole stages 2-4). Prompts
come from fixture templates and are constant per (condition, modality) or
disease. Conversion is a bijection from conversion units to instances:
nothing is deduplicated or silently dropped, and records that fail
validation are routed to a rejects stream with a reason.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

from .errors import InputError, UnknownCondition, UnsupportedDisease

MODALITIES = ("CFP", "OCT", "visual_field", "other")
LABEL_SCHEMAS = ("binary_condition", "stage_0_4", "stage_2_4")
SPLITS = ("train", "test")

SPLIT_SCHEME = "volmo-split-v1"

CANONICAL_CONDITIONS = (
    "glaucoma",
    "AMD",
    "DR",
    "drusen",
    "hemorrhage",
    "hypertensive retinopathy",
    "increased cup-to-disc ratio",
    "macular edema",
    "myopic fundus",
    "nevus",
    "scar",
    "vascular occlusion",
)

#: prompt wording per condition; abbreviations expand to their long form
DISPLAY_NAMES = {
    "AMD": "age-related macular degeneration",
    "DR": "diabetic retinopathy",
}

_EXTRA_ALIASES = {
    "age-related macular degeneration": "AMD",
    "age related macular degeneration": "AMD",
    "diabetic retinopathy": "DR",
    "increased cup to disc ratio": "increased cup-to-disc ratio",
    "increased cup-disc": "increased cup-to-disc ratio",
    "hypertensive-retinopathy": "hypertensive retinopathy",
    "macular oedema": "macular edema",
    "myopia fundus": "myopic fundus",
}

_ALIAS_TABLE = {c.lower(): c for c in CANONICAL_CONDITIONS}
_ALIAS_TABLE.update({alias.lower(): canon for alias, canon in _EXTRA_ALIASES.items()})
_ALIAS_TABLE.update({long.lower(): short for short, long in DISPLAY_NAMES.items()})

STAGE_SETS = {"stage_0_4": frozenset(range(5)), "stage_2_4": frozenset((2, 3, 4))}
STAGING_DISEASES = {"DR": "stage_0_4", "macular_hole": "stage_2_4"}

#: the DR grading prompt is reproduced from its source; the macular-hole
#: prompt reuses the same skeleton and is flagged as extrapolated
STAGING_PROMPT_PROVENANCE = {"DR": "paper", "macular_hole": "extrapolated"}

_TRUTHY = {"true", "1", "yes", "t", "positive", "present"}
_FALSY = {"false", "0", "no", "f", "negative", "absent"}


def _read_template(name: str) -> str:
    text = resources.files("volmo").joinpath(f"templates/{name}").read_text("utf-8")
    return text.removesuffix("\n")


_SCREENING_TEMPLATE = _read_template("screening.txt")
_MODALITY_SENTENCES = json.loads(
    resources.files("volmo").joinpath("templates/screening_modalities.json").read_text("utf-8")
)["sentences"]
_STAGING_TEMPLATES = {
    "DR": _read_template("staging_dr.txt"),
    "macular_hole": _read_template("staging_macular_hole.txt"),
}


def canonical_condition(name: str) -> str:
    """Resolve a condition name or alias into the canonical vocabulary."""
    canon = _ALIAS_TABLE.get((name or "").strip().lower())
    if canon is None:
        raise UnknownCondition(f"{name!r} is not one of the 12 canonical conditions")
    return canon


def condition_display_name(condition: str) -> str:
    canon = canonical_condition(condition)
    return DISPLAY_NAMES.get(canon, canon)


def build_screening_prompt(condition: str, modality: str, variant: str = "appendix") -> str:
    """The binary screening question for one condition and imaging modality.

    ``variant="appendix"`` uses the "Answer in format:" wording;
    ``variant="body"`` the "Answer in the format:" one. Both appear in the
    source material, the appendix version is canonical here.
    """
    display = condition_display_name(condition)
    if modality not in MODALITIES:
        raise InputError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    prompt = _SCREENING_TEMPLATE.replace(
        "{modality_sentence}", _MODALITY_SENTENCES[modality]
    ).replace("{condition}", display)
    if variant == "body":
        prompt = prompt.replace("Answer in format:", "Answer in the format:")
    elif variant != "appendix":
        raise InputError(f"unknown template variant {variant!r}")
    return prompt


def build_staging_prompt(disease: str) -> str:
    """The severity-rating prompt for a supported disease."""
    try:
        return _STAGING_TEMPLATES[disease]
    except KeyError:
        raise UnsupportedDisease(
            f"no staging template for {disease!r}; supported: {sorted(_STAGING_TEMPLATES)}"
        ) from None


# ---------------------------------------------------------------------------
# Instances and manifests
# ---------------------------------------------------------------------------


@dataclass
class ScreeningInstance:
    image_ref: str
    condition: str
    modality: str
    prompt: str
    gold: str  # TRUE | FALSE
    split: str

    def to_json_dict(self) -> dict:
        return {
            "image_ref": self.image_ref,
            "condition": self.condition,
            "modality": self.modality,
            "prompt": self.prompt,
            "gold": self.gold,
            "split": self.split,
        }


@dataclass
class StagingInstance:
    image_ref: str
    disease: str
    prompt: str
    gold: int
    split: str
    prompt_provenance: str

    def to_json_dict(self) -> dict:
        return {
            "image_ref": self.image_ref,
            "disease": self.disease,
            "prompt": self.prompt,
            "gold": self.gold,
            "split": self.split,
            "prompt_provenance": self.prompt_provenance,
        }


@dataclass
class BenchmarkManifest:
    dataset_name: str
    modality: str
    population: str
    license: str
    image_count: int
    label_schema: str
    split_source: str = "source"  # "source" | "seeded_80_20"
    split_seed: int | None = None
    split_counts: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "dataset_name": self.dataset_name,
            "modality": self.modality,
            "population": self.population,
            "license": self.license,
            "image_count": self.image_count,
            "label_schema": self.label_schema,
            "split_source": self.split_source,
            "split_seed": self.split_seed,
            "split_counts": self.split_counts,
        }


@dataclass
class ConversionSpec:
    """Column mapping and dataset metadata for one benchmark table."""

    dataset_name: str
    modality: str
    label_schema: str
    population: str = ""
    license: str = ""
    image_ref_column: str = "image_ref"
    condition: str | None = None          # single-condition binary datasets
    label_column: str | None = None
    condition_columns: dict | None = None  # multi-condition fan-out
    disease: str | None = None             # staging datasets
    split_column: str | None = None
    split_seed: int = 0
    prompt_variant: str = "appendix"

    def __post_init__(self):
        if self.label_schema not in LABEL_SCHEMAS:
            raise InputError(f"unknown label_schema {self.label_schema!r}")
        if self.modality not in MODALITIES:
            raise InputError(f"unknown modality {self.modality!r}")
        if self.label_schema == "binary_condition":
            if not (self.condition_columns or (self.condition and self.label_column)):
                raise InputError(
                    "binary datasets need condition+label_column or condition_columns"
                )
        else:
            if not self.disease or STAGING_DISEASES.get(self.disease) != self.label_schema:
                raise InputError(
                    f"label_schema {self.label_schema!r} requires the matching disease"
                )
            if not self.label_column:
                raise InputError("staging datasets need a label_column")

    @classmethod
    def from_dict(cls, data: dict) -> "ConversionSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown conversion config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ConversionResult:
    screening: list[ScreeningInstance]
    staging: list[StagingInstance]
    rejects: list[dict]
    manifest: BenchmarkManifest

    @property
    def instances(self) -> list:
        return list(self.screening) + list(self.staging)


def seeded_split(seed: int, image_ref: str, train_fraction: float = 0.8) -> str:
    """Deterministic, order-independent 80/20 assignment per image ref."""
    msg = SPLIT_SCHEME.encode() + struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF)
    msg += image_ref.encode("utf-8")
    value = int.from_bytes(hashlib.sha256(msg).digest()[:8], "big")
    return "train" if value / 2**64 < train_fraction else "test"


def _parse_binary_gold(value) -> str | None:
    if isinstance(value, bool):
        return "TRUE" if value else "FALSE"
    text = str(value).strip().lower()
    if text in _TRUTHY:
        return "TRUE"
    if text in _FALSY:
        return "FALSE"
    return None


def _parse_stage_gold(value, stages) -> int | None:
    try:
        stage = int(str(value).strip())
    except (TypeError, ValueError):
        return None
    return stage if stage in stages else None


def convert_benchmark(records: Iterable[dict], spec: ConversionSpec) -> ConversionResult:
    """Convert one benchmark's label records into instruction instances.

    Every conversion unit (a record, or a record-condition pair when the
    dataset maps several condition columns) yields exactly one instance or
    one reject, so cardinality is preserved and gold-label histograms
    match the source. The manifest's ``image_count`` equals the emitted
    instance count; a generated split records its seed.
    """
    screening: list[ScreeningInstance] = []
    staging: list[StagingInstance] = []
    rejects: list[dict] = []
    split_counts = {"train": 0, "test": 0}
    used_seeded_split = False

    if spec.label_schema == "binary_condition":
        if spec.condition_columns:
            condition_map = {
                canonical_condition(cond): column
                for cond, column in spec.condition_columns.items()
            }
        else:
            condition_map = {canonical_condition(spec.condition): spec.label_column}
        prompts = {
            cond: build_screening_prompt(cond, spec.modality, spec.prompt_variant)
            for cond in condition_map
        }
    else:
        stages = STAGE_SETS[spec.label_schema]
        staging_prompt = build_staging_prompt(spec.disease)
        provenance = STAGING_PROMPT_PROVENANCE[spec.disease]

    def reject(record, reason, detail, condition=None):
        entry = {"reason": reason, "detail": detail, "record": record}
        if condition:
            entry["condition"] = condition
        rejects.append(entry)

    def resolve_split(record, image_ref) -> str | None:
        nonlocal used_seeded_split
        if spec.split_column:
            raw = str(record.get(spec.split_column, "")).strip().lower()
            if raw in SPLITS:
                return raw
            return None
        used_seeded_split = True
        return seeded_split(spec.split_seed, image_ref)

    for record in records:
        image_ref = str(record.get(spec.image_ref_column) or "").strip()
        if not image_ref:
            if spec.label_schema == "binary_condition":
                for cond in condition_map:
                    reject(record, "MissingImageRef", "empty image reference", cond)
            else:
                reject(record, "MissingImageRef", "empty image reference")
            continue

        split = resolve_split(record, image_ref)
        if split is None:
            detail = f"split column {spec.split_column!r} is not train/test"
            if spec.label_schema == "binary_condition":
                for cond in condition_map:
                    reject(record, "InvalidSplit", detail, cond)
            else:
                reject(record, "InvalidSplit", detail)
            continue

        if spec.label_schema == "binary_condition":
            for cond, column in condition_map.items():
                gold = _parse_binary_gold(record.get(column))
                if gold is None:
                    reject(record, "LabelOutOfRange",
                           f"column {column!r}={record.get(column)!r} is not binary", cond)
                    continue
                screening.append(
                    ScreeningInstance(image_ref, cond, spec.modality, prompts[cond], gold, split)
                )
                split_counts[split] += 1
        else:
            gold = _parse_stage_gold(record.get(spec.label_column), stages)
            if gold is None:
                reject(record, "LabelOutOfRange",
                       f"column {spec.label_column!r}={record.get(spec.label_column)!r} "
                       f"outside stages {sorted(stages)}")
                continue
            staging.append(
                StagingInstance(image_ref, spec.disease, staging_prompt, gold, split, provenance)
            )
            split_counts[split] += 1

    manifest = BenchmarkManifest(
        dataset_name=spec.dataset_name,
        modality=spec.modality,
        population=spec.population,
        license=spec.license,
        image_count=len(screening) + len(staging),
        label_schema=spec.label_schema,
        split_source="seeded_80_20" if used_seeded_split else "source",
        split_seed=spec.split_seed if used_seeded_split else None,
        split_counts=split_counts,
    )
    return ConversionResult(screening, staging, rejects, manifest)


def merge_manifests(manifests: Iterable[BenchmarkManifest]) -> dict:
    """Corpus-level totals; per-dataset counts are associative to merge."""
    manifests = list(manifests)
    return {
        "datasets": [m.to_json_dict() for m in manifests],
        "total_instances": sum(m.image_count for m in manifests),
    }


# ---------------------------------------------------------------------------
# Table IO
# ---------------------------------------------------------------------------


def read_label_table(path: str | Path) -> Iterator[dict]:
    """Load CSV (with header) or JSONL label records."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, newline="", encoding="utf-8") as fh:
            yield from csv.DictReader(fh)
    else:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield json.loads(line)


def write_conversion(result: ConversionResult, out_dir: str | Path) -> dict[str, Path]:
    """Write instances, rejects, and the manifest into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "screening": out_dir / "instances.screening.jsonl",
        "staging": out_dir / "instances.staging.jsonl",
        "manifest": out_dir / "manifest.json",
        "rejects": out_dir / "rejects.jsonl",
    }
    with open(paths["screening"], "w", encoding="utf-8") as fh:
        for inst in result.screening:
            fh.write(json.dumps(inst.to_json_dict(), ensure_ascii=False) + "\n")
    with open(paths["staging"], "w", encoding="utf-8") as fh:
        for inst in result.staging:
            fh.write(json.dumps(inst.to_json_dict(), ensure_ascii=False) + "\n")
    with open(paths["rejects"], "w", encoding="utf-8") as fh:
        for row in result.rejects:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    with open(paths["manifest"], "w", encoding="utf-8") as fh:
        json.dump(result.manifest.to_json_dict(), fh, ensure_ascii=False, indent=2)
        fh.write("\n")
    return paths
