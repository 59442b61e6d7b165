"""Structured clinical case profiles and their five-task dialogue rendering.

A :class:`ClinicalProfile` carries the clinician-identified case-report
elements (histories, symptom characterization, examination and imaging
findings, differential and primary diagnosis, treatment planning,
follow-up). Profiles render into bracketed-section text blocks; the
renderer and :func:`parse_profile_text` are inverses for profiles whose
free text contains no bracketed headers. :func:`build_dialogue` wraps a
profile into the fixed five-turn task sequence, and
:func:`parse_structured_answer` recovers key-value entries from model
output without ever raising.

Free clinical text is full of semicolons, so line parsing never splits
blindly on "; ": values are scanned for known ``Key:`` tokens first and
split only there.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import InvalidProfile

TASKS = ("differential", "most_likely", "assessment_plan", "treatments", "follow_up")

#: canonical entry keys per dialogue task, in render order
TASK_KEYS = {
    "differential": ("Diagnosis", "Severity"),
    "most_likely": ("Diagnosis", "Severity", "Justification"),
    "assessment_plan": ("Assessment", "Plan"),
    "treatments": ("Treatment", "Immediate outcome", "Long-term outcome", "Justification"),
    "follow_up": ("Follow-up care", "Justification", "Prognosis", "Unexpected outcomes"),
}

_KEY_TO_FIELD = {
    "Diagnosis": "diagnosis",
    "Severity": "severity",
    "Justification": "justification",
    "Assessment": "assessment",
    "Plan": "plan",
    "Treatment": "treatment",
    "Immediate outcome": "immediate_outcome",
    "Long-term outcome": "long_term_outcome",
    "Follow-up care": "care",
    "Prognosis": "prognosis",
    "Unexpected outcomes": "unexpected_outcomes",
    "Medical History": "text",
    "Ocular History": "text",
    "Family History": "text",
    "Symptom": "description",
    "Duration": "duration",
    "Progression": "progression",
    "Examination Type": "exam_type",
    "Finding": "finding",
    "Note": "note",
    "Imaging Type": "imaging_type",
    "Key Results": "key_results",
    "Clinical Image": "uri",
}

_NUMBERED = re.compile(r"^\s*\d+[.)]\s*(.*)$")
_SECTION = re.compile(r"^\[([A-Z][A-Z \-]*)\]$")
_UNKNOWN_KEY = re.compile(r";\s*([A-Z][A-Za-z][A-Za-z \-]{0,38})\s*:")

NO_FAMILY_HISTORY = "No family history reported"


# ---------------------------------------------------------------------------
# Profile schema
# ---------------------------------------------------------------------------


@dataclass
class Symptom:
    description: str
    duration: str | None = None
    progression: str | None = None


@dataclass
class ExaminationFinding:
    exam_type: str
    finding: str
    note: str | None = None


@dataclass
class ImagingFinding:
    imaging_type: str
    finding: str
    key_results: str | None = None


@dataclass
class DifferentialDiagnosis:
    diagnosis: str
    severity: str


@dataclass
class PrimaryDiagnosis:
    diagnosis: str
    severity: str
    justification: str


@dataclass
class Treatment:
    treatment: str
    immediate_outcome: str | None = None
    long_term_outcome: str | None = None
    justification: str | None = None


@dataclass
class FollowUp:
    care: str
    justification: str | None = None
    prognosis: str | None = None
    unexpected_outcomes: str | None = None


@dataclass
class ClinicalProfile:
    case_id: str
    medical_history: list[str] = field(default_factory=list)
    ocular_history: list[str] = field(default_factory=list)
    family_history: list[str] = field(default_factory=list)
    symptoms: list[Symptom] = field(default_factory=list)
    examination_findings: list[ExaminationFinding] = field(default_factory=list)
    diagnostic_imaging: list[ImagingFinding] = field(default_factory=list)
    differential_diagnoses: list[DifferentialDiagnosis] = field(default_factory=list)
    primary_diagnosis: PrimaryDiagnosis | None = None
    treatments: list[Treatment] = field(default_factory=list)
    follow_up: list[FollowUp] = field(default_factory=list)
    image_refs: list[str] = field(default_factory=list)


def validate_profile(profile: ClinicalProfile) -> None:
    """Raise ``InvalidProfile`` when a schema invariant is violated."""
    if not profile.case_id.strip():
        raise InvalidProfile("case_id must be non-empty")
    checks = [
        (profile.medical_history, lambda e: e, "medical_history entry"),
        (profile.ocular_history, lambda e: e, "ocular_history entry"),
        (profile.family_history, lambda e: e, "family_history entry"),
        (profile.symptoms, lambda e: e.description, "symptom description"),
        (profile.examination_findings, lambda e: e.finding, "examination finding"),
        (profile.diagnostic_imaging, lambda e: e.finding, "imaging finding"),
        (profile.differential_diagnoses, lambda e: e.diagnosis, "differential diagnosis"),
        (profile.treatments, lambda e: e.treatment, "treatment"),
        (profile.follow_up, lambda e: e.care, "follow-up care"),
    ]
    for entries, mandatory, label in checks:
        for entry in entries:
            if not (mandatory(entry) or "").strip():
                raise InvalidProfile(f"{label} must be non-empty in case {profile.case_id!r}")
    if profile.primary_diagnosis and not profile.primary_diagnosis.diagnosis.strip():
        raise InvalidProfile(f"primary diagnosis must be non-empty in case {profile.case_id!r}")


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _pairs(*items: tuple[str, str | None]) -> str:
    return "; ".join(f"{key}: {value}" for key, value in items if value is not None)


def _numbered(lines: list[str]) -> str:
    return "\n".join(f"{i}. {line}" for i, line in enumerate(lines, 1))


def render_profile(profile: ClinicalProfile, include_gold: bool = False) -> str:
    """Render a profile into its bracketed-section text block.

    Sections appear in fixed order with entries numbered from 1; empty
    family history renders its mandated placeholder, other empty sections
    are omitted. With ``include_gold`` the diagnosis/treatment/follow-up
    sections render too (full-record form); without it the block is the
    dialogue input, which must not leak the answers.
    """
    validate_profile(profile)
    sections: list[str] = ["[PATIENT CLINICAL PROFILE]"]

    if profile.medical_history:
        sections.append(
            "[MEDICAL HISTORY]\n"
            + _numbered([_pairs(("Medical History", e)) for e in profile.medical_history])
        )
    if profile.ocular_history:
        sections.append(
            "[OCULAR HISTORY]\n"
            + _numbered([_pairs(("Ocular History", e)) for e in profile.ocular_history])
        )
    if profile.family_history:
        sections.append(
            "[FAMILY HISTORY]\n"
            + _numbered([_pairs(("Family History", e)) for e in profile.family_history])
        )
    else:
        sections.append(f"[FAMILY HISTORY]\n{NO_FAMILY_HISTORY}")
    if profile.symptoms:
        sections.append(
            "[SYMPTOMS]\n"
            + _numbered(
                [
                    _pairs(("Symptom", s.description), ("Duration", s.duration),
                           ("Progression", s.progression))
                    for s in profile.symptoms
                ]
            )
        )
    if profile.examination_findings:
        sections.append(
            "[EXAMINATION FINDINGS]\n"
            + _numbered(
                [
                    _pairs(("Examination Type", e.exam_type), ("Finding", e.finding),
                           ("Note", e.note))
                    for e in profile.examination_findings
                ]
            )
        )
    if profile.diagnostic_imaging:
        sections.append(
            "[DIAGNOSTIC IMAGING]\n"
            + _numbered(
                [
                    _pairs(("Imaging Type", m.imaging_type), ("Finding", m.finding),
                           ("Key Results", m.key_results))
                    for m in profile.diagnostic_imaging
                ]
            )
        )
    if profile.image_refs:
        sections.append(
            "[CLINICAL IMAGES]\n"
            + _numbered([_pairs(("Clinical Image", uri)) for uri in profile.image_refs])
        )

    if include_gold:
        if profile.differential_diagnoses:
            sections.append(
                "[DIFFERENTIAL DIAGNOSIS]\n" + differential_gold_text(profile)
            )
        if profile.primary_diagnosis:
            sections.append("[PRIMARY DIAGNOSIS]\n" + most_likely_gold_text(profile))
        if profile.treatments:
            sections.append("[TREATMENTS]\n" + treatments_gold_text(profile))
        if profile.follow_up:
            sections.append("[FOLLOW-UP CARE]\n" + follow_up_gold_text(profile))

    return "\n\n".join(sections)


def differential_gold_text(profile: ClinicalProfile) -> str:
    return _numbered(
        [_pairs(("Diagnosis", d.diagnosis), ("Severity", d.severity))
         for d in profile.differential_diagnoses]
    )


def most_likely_gold_text(profile: ClinicalProfile) -> str:
    p = profile.primary_diagnosis
    return _pairs(("Diagnosis", p.diagnosis), ("Severity", p.severity),
                  ("Justification", p.justification))


def assessment_plan_gold(profile: ClinicalProfile) -> list[dict]:
    # assessment-and-plan gold pairs each treatment's rationale with the
    # planned intervention; treatments without a rationale contribute none
    return [
        {"assessment": t.justification, "plan": t.treatment}
        for t in profile.treatments
        if t.justification
    ]


def assessment_plan_gold_text(profile: ClinicalProfile) -> str:
    return _numbered(
        [_pairs(("Assessment", g["assessment"]), ("Plan", g["plan"]))
         for g in assessment_plan_gold(profile)]
    )


def treatments_gold_text(profile: ClinicalProfile) -> str:
    return _numbered(
        [
            _pairs(("Treatment", t.treatment), ("Immediate outcome", t.immediate_outcome),
                   ("Long-term outcome", t.long_term_outcome), ("Justification", t.justification))
            for t in profile.treatments
        ]
    )


def follow_up_gold_text(profile: ClinicalProfile) -> str:
    return _numbered(
        [
            _pairs(("Follow-up care", f.care), ("Justification", f.justification),
                   ("Prognosis", f.prognosis), ("Unexpected outcomes", f.unexpected_outcomes))
            for f in profile.follow_up
        ]
    )


# ---------------------------------------------------------------------------
# Dialogue construction
# ---------------------------------------------------------------------------


def _load_task_template(name: str) -> str:
    text = resources.files("volmo").joinpath(f"templates/dialogue/{name}").read_text("utf-8")
    return text.removesuffix("\n")


_TASK_TEMPLATES = {
    "differential": _load_task_template("task1_differential.txt"),
    "most_likely": _load_task_template("task2_most_likely.txt"),
    "assessment_plan": _load_task_template("task3_assessment_plan.txt"),
    "treatments": _load_task_template("task4_treatments.txt"),
    "follow_up": _load_task_template("task5_follow_up.txt"),
}


def _expected_format(template: str) -> str:
    marker = "### Expected Output Format ###\n"
    section = template[template.index(marker) + len(marker):]
    return section.rsplit("\n#####", 1)[0]


_EXPECTED_FORMATS = {task: _expected_format(t) for task, t in _TASK_TEMPLATES.items()}


@dataclass
class DialogueTurn:
    task: str
    prompt: str
    expected_output_format: str
    gold: object | None
    gold_text: str | None
    prompt_only: bool

    def to_json_dict(self) -> dict:
        return {
            "task": self.task,
            "prompt": self.prompt,
            "expected_output_format": self.expected_output_format,
            "gold": self.gold,
            "gold_text": self.gold_text,
            "prompt_only": self.prompt_only,
        }


@dataclass
class DialogueScript:
    case_id: str
    turns: list[DialogueTurn]

    def to_json_dict(self) -> dict:
        return {"case_id": self.case_id, "turns": [t.to_json_dict() for t in self.turns]}


def task_prompt(task: str, profile: ClinicalProfile | None = None) -> str:
    """The task text block; turn 1 embeds the rendered profile."""
    template = _TASK_TEMPLATES[task]
    if task == "differential":
        if profile is None:
            raise InvalidProfile("the differential task needs a profile to embed")
        return template.replace("{profile}", render_profile(profile, include_gold=False))
    return template


def build_dialogue(profile: ClinicalProfile) -> DialogueScript:
    """Wrap a profile into the fixed five-turn dialogue.

    Tasks whose gold cannot be derived from the profile are emitted
    prompt-only and flagged rather than dropped, so scripts always have
    exactly five turns in task order.
    """
    validate_profile(profile)

    gold_builders = {
        "differential": lambda: (
            [{"diagnosis": d.diagnosis, "severity": d.severity}
             for d in profile.differential_diagnoses] or None,
            differential_gold_text(profile) if profile.differential_diagnoses else None,
        ),
        "most_likely": lambda: (
            {
                "diagnosis": profile.primary_diagnosis.diagnosis,
                "severity": profile.primary_diagnosis.severity,
                "justification": profile.primary_diagnosis.justification,
            } if profile.primary_diagnosis else None,
            most_likely_gold_text(profile) if profile.primary_diagnosis else None,
        ),
        "assessment_plan": lambda: (
            assessment_plan_gold(profile) or None,
            assessment_plan_gold_text(profile) if assessment_plan_gold(profile) else None,
        ),
        "treatments": lambda: (
            [
                {
                    "treatment": t.treatment,
                    "immediate_outcome": t.immediate_outcome,
                    "long_term_outcome": t.long_term_outcome,
                    "justification": t.justification,
                }
                for t in profile.treatments
            ] or None,
            treatments_gold_text(profile) if profile.treatments else None,
        ),
        "follow_up": lambda: (
            [
                {
                    "care": f.care,
                    "justification": f.justification,
                    "prognosis": f.prognosis,
                    "unexpected_outcomes": f.unexpected_outcomes,
                }
                for f in profile.follow_up
            ] or None,
            follow_up_gold_text(profile) if profile.follow_up else None,
        ),
    }

    turns = []
    for task in TASKS:
        gold, gold_text = gold_builders[task]()
        turns.append(
            DialogueTurn(
                task=task,
                prompt=task_prompt(task, profile if task == "differential" else None),
                expected_output_format=_EXPECTED_FORMATS[task],
                gold=gold,
                gold_text=gold_text,
                prompt_only=gold is None,
            )
        )
    return DialogueScript(profile.case_id, turns)


# ---------------------------------------------------------------------------
# Answer parsing
# ---------------------------------------------------------------------------


@dataclass
class ParseReport:
    numbered_lines: int = 0
    well_formed: int = 0
    malformed: int = 0
    malformed_lines: list[str] = field(default_factory=list)
    unnumbered_entries: int = 0
    duplicates: int = 0


def _split_on_known_keys(content: str, keys: tuple[str, ...]) -> list[tuple[str, str]] | None:
    """Split before ``KnownKey:`` tokens only; None when no key leads."""
    canonical = {k.lower(): k for k in keys}
    alternation = "|".join(re.escape(k) for k in sorted(keys, key=len, reverse=True))
    pattern = re.compile(rf"(?:^|;)\s*({alternation})\s*:", re.IGNORECASE)
    matches = list(pattern.finditer(content))
    if not matches or content[: matches[0].start()].strip():
        return None
    pairs: list[tuple[str, str]] = []
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(content)
        value = content[m.end():end].strip().rstrip(";").strip()
        pairs.append((canonical[m.group(1).lower()], value))
    return pairs


def _extract_unknown_keys(value: str) -> tuple[str, dict]:
    """Peel trailing "; SomeKey: ..." runs off a value into an extras map."""
    extras: dict[str, str] = {}
    m = _UNKNOWN_KEY.search(value)
    if not m:
        return value, extras
    head = value[: m.start()].strip().rstrip(";").strip()
    rest = value[m.start():]
    matches = list(_UNKNOWN_KEY.finditer(rest))
    for i, km in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(rest)
        extras[km.group(1).strip()] = rest[km.end():end].strip().rstrip(";").strip()
    return head, extras


def _parse_entry(content: str, keys: tuple[str, ...]) -> dict | None:
    pairs = _split_on_known_keys(content, keys)
    if pairs is None:
        return None
    entry: dict = {}
    extras: dict = {}
    for key, value in pairs:
        value, found = _extract_unknown_keys(value)
        extras.update(found)
        entry[_KEY_TO_FIELD[key]] = value
    if extras:
        entry["extras"] = extras
    return entry


def parse_structured_answer(task: str, raw: str) -> tuple[list[dict], ParseReport]:
    """Recover key-value entries from model output for one task.

    Numbered lines are the parse units: each becomes a well-formed entry
    or is retained verbatim as malformed. Unnumbered lines that open with
    a known key (the most-likely-diagnosis format) are captured too and
    counted separately. Repeated lines all parse (baseline models love
    repeating themselves); the report carries the duplicate count. Never
    raises.
    """
    keys = TASK_KEYS[task]
    report = ParseReport()
    entries: list[dict] = []
    for line in (raw or "").split("\n"):
        stripped = line.strip()
        if not stripped:
            continue
        numbered = _NUMBERED.match(stripped)
        if numbered:
            report.numbered_lines += 1
            entry = _parse_entry(numbered.group(1), keys)
            if entry is None:
                report.malformed += 1
                report.malformed_lines.append(stripped)
            else:
                report.well_formed += 1
                entries.append(entry)
            continue
        if _SECTION.match(stripped):
            continue  # section banner, e.g. [DIFFERENTIAL DIAGNOSIS]
        entry = _parse_entry(stripped, keys)
        if entry is not None:
            report.unnumbered_entries += 1
            entries.append(entry)
    seen = {json.dumps(e, sort_keys=True) for e in entries}
    report.duplicates = len(entries) - len(seen)
    return entries, report


# ---------------------------------------------------------------------------
# Profile text parsing (inverse of render_profile)
# ---------------------------------------------------------------------------

_SECTION_KEYS = {
    "MEDICAL HISTORY": ("Medical History",),
    "OCULAR HISTORY": ("Ocular History",),
    "FAMILY HISTORY": ("Family History",),
    "SYMPTOMS": ("Symptom", "Duration", "Progression"),
    "EXAMINATION FINDINGS": ("Examination Type", "Finding", "Note"),
    "DIAGNOSTIC IMAGING": ("Imaging Type", "Finding", "Key Results"),
    "CLINICAL IMAGES": ("Clinical Image",),
    "DIFFERENTIAL DIAGNOSIS": TASK_KEYS["differential"],
    "PRIMARY DIAGNOSIS": TASK_KEYS["most_likely"],
    "TREATMENTS": TASK_KEYS["treatments"],
    "FOLLOW-UP CARE": TASK_KEYS["follow_up"],
}


def parse_profile_text(text: str, case_id: str = "") -> ClinicalProfile:
    """Parse a rendered profile block back into a :class:`ClinicalProfile`.

    The case id is not part of the rendered form, so the caller supplies
    it (defaults to empty).
    """
    sections: dict[str, list[str]] = {}
    current: str | None = None
    for line in text.split("\n"):
        stripped = line.strip()
        m = _SECTION.match(stripped)
        if m:
            current = m.group(1)
            sections.setdefault(current, [])
            continue
        if current and stripped:
            sections[current].append(stripped)

    def entries_for(name: str) -> list[dict]:
        keys = _SECTION_KEYS[name]
        out = []
        for line in sections.get(name, []):
            body = _NUMBERED.match(line)
            content = body.group(1) if body else line
            entry = _parse_entry(content, keys)
            if entry is not None:
                entry.pop("extras", None)
                out.append(entry)
        return out

    family: list[str] = []
    for line in sections.get("FAMILY HISTORY", []):
        if line == NO_FAMILY_HISTORY:
            continue
        entry = _parse_entry(_NUMBERED.match(line).group(1) if _NUMBERED.match(line) else line,
                             ("Family History",))
        if entry:
            family.append(entry["text"])

    primary = None
    primary_entries = entries_for("PRIMARY DIAGNOSIS")
    if primary_entries:
        e = primary_entries[0]
        primary = PrimaryDiagnosis(
            e.get("diagnosis", ""), e.get("severity", ""), e.get("justification", "")
        )

    return ClinicalProfile(
        case_id=case_id,
        medical_history=[e["text"] for e in entries_for("MEDICAL HISTORY")],
        ocular_history=[e["text"] for e in entries_for("OCULAR HISTORY")],
        family_history=family,
        symptoms=[Symptom(**e) for e in entries_for("SYMPTOMS")],
        examination_findings=[ExaminationFinding(**e) for e in entries_for("EXAMINATION FINDINGS")],
        diagnostic_imaging=[ImagingFinding(**e) for e in entries_for("DIAGNOSTIC IMAGING")],
        differential_diagnoses=[
            DifferentialDiagnosis(**e) for e in entries_for("DIFFERENTIAL DIAGNOSIS")
        ],
        primary_diagnosis=primary,
        treatments=[Treatment(**e) for e in entries_for("TREATMENTS")],
        follow_up=[FollowUp(**e) for e in entries_for("FOLLOW-UP CARE")],
        image_refs=[e["uri"] for e in entries_for("CLINICAL IMAGES")],
    )


# ---------------------------------------------------------------------------
# JSONL IO
# ---------------------------------------------------------------------------


def profile_to_json_dict(profile: ClinicalProfile) -> dict:
    return {
        "case_id": profile.case_id,
        "medical_history": profile.medical_history,
        "ocular_history": profile.ocular_history,
        "family_history": profile.family_history,
        "symptoms": [vars(s) for s in profile.symptoms],
        "examination_findings": [vars(e) for e in profile.examination_findings],
        "diagnostic_imaging": [vars(m) for m in profile.diagnostic_imaging],
        "differential_diagnoses": [vars(d) for d in profile.differential_diagnoses],
        "primary_diagnosis": vars(profile.primary_diagnosis) if profile.primary_diagnosis else None,
        "treatments": [vars(t) for t in profile.treatments],
        "follow_up": [vars(f) for f in profile.follow_up],
        "image_refs": profile.image_refs,
    }


def profile_from_json_dict(data: dict) -> ClinicalProfile:
    return ClinicalProfile(
        case_id=data["case_id"],
        medical_history=list(data.get("medical_history", [])),
        ocular_history=list(data.get("ocular_history", [])),
        family_history=list(data.get("family_history", [])),
        symptoms=[Symptom(**s) for s in data.get("symptoms", [])],
        examination_findings=[
            ExaminationFinding(**e) for e in data.get("examination_findings", [])
        ],
        diagnostic_imaging=[ImagingFinding(**m) for m in data.get("diagnostic_imaging", [])],
        differential_diagnoses=[
            DifferentialDiagnosis(**d) for d in data.get("differential_diagnoses", [])
        ],
        primary_diagnosis=(
            PrimaryDiagnosis(**data["primary_diagnosis"]) if data.get("primary_diagnosis") else None
        ),
        treatments=[Treatment(**t) for t in data.get("treatments", [])],
        follow_up=[FollowUp(**f) for f in data.get("follow_up", [])],
        image_refs=list(data.get("image_refs", [])),
    )


def build_dialogues_file(cases_in: str | Path, dialogues_out: str | Path) -> dict:
    """Render ``cases.jsonl`` into ``dialogues.jsonl``; isolate bad cases."""
    stats = {"dialogues": 0, "errors": []}
    with open(cases_in, encoding="utf-8") as src, open(
        dialogues_out, "w", encoding="utf-8"
    ) as dst:
        for line_no, line in enumerate(src, 1):
            line = line.strip()
            if not line:
                continue
            try:
                profile = profile_from_json_dict(json.loads(line))
                script = build_dialogue(profile)
            except Exception as exc:  # noqa: BLE001 - per-case isolation
                stats["errors"].append(
                    {"line": line_no, "error": type(exc).__name__, "message": str(exc)}
                )
                continue
            dst.write(json.dumps(script.to_json_dict(), ensure_ascii=False) + "\n")
            stats["dialogues"] += 1
    return stats
