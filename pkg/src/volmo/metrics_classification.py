"""Label parsing and classification scoring for screening and staging runs.

Free-text model outputs are parsed into TRUE/FALSE or stage labels; scores
follow the standard confusion-count definitions (precision, recall aka
sensitivity, specificity, F1), with one-vs-rest scoring per stage and
unweighted macro means across conditions. Unparseable outputs are never
rewarded: they are counted against the model and reported separately as an
invalid rate.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import EmptyInput, InputError, LengthMismatch

TRUE = "TRUE"
FALSE = "FALSE"
INVALID = "INVALID"

_BINARY_TOKEN = re.compile(r"\b(true|false|yes|no)\b", re.IGNORECASE)
_INT_TOKEN = re.compile(r"(?<![\d.])(\d+)(?!\d)")


@dataclass(frozen=True)
class ParsedLabel:
    raw: str
    value: object  # TRUE/FALSE, an int stage, or INVALID
    rule_fired: str


def parse_binary_label(raw: str) -> ParsedLabel:
    """First standalone TRUE/FALSE token wins; YES/NO map to TRUE/FALSE."""
    m = _BINARY_TOKEN.search(raw or "")
    if m is None:
        return ParsedLabel(raw, INVALID, "no_match")
    token = m.group(1).lower()
    if token in ("true", "false"):
        return ParsedLabel(raw, token.upper(), "true_false_token")
    return ParsedLabel(raw, TRUE if token == "yes" else FALSE, "yes_no_alias")


def parse_stage_label(raw: str, valid_stages: Iterable[int]) -> ParsedLabel:
    """First standalone integer that lies inside ``valid_stages`` wins."""
    stages = set(valid_stages)
    if not stages:
        raise InputError("valid_stages must be non-empty")
    for m in _INT_TOKEN.finditer(raw or ""):
        value = int(m.group(1))
        if value in stages:
            return ParsedLabel(raw, value, "digit_token")
    return ParsedLabel(raw, INVALID, "no_match")


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class ClassificationScores:
    precision: float
    recall: float  # sensitivity
    specificity: float
    f1: float
    positive_class_f1: float
    class_macro_f1: float


def _safe_div(num: float, den: float) -> float:
    # documented convention: 0 when the denominator is 0
    return num / den if den else 0.0


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = _safe_div(tp, tp + fp)
    r = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * p * r, p + r)
    return p, r, f1


def scores_from_counts(counts: ConfusionCounts) -> ClassificationScores:
    p, r, f1 = _prf(counts.tp, counts.fp, counts.fn)
    specificity = _safe_div(counts.tn, counts.tn + counts.fp)
    # negative class viewed as positive: tp<->tn, fp<->fn
    _, _, f1_neg = _prf(counts.tn, counts.fn, counts.fp)
    return ClassificationScores(
        precision=p,
        recall=r,
        specificity=specificity,
        f1=f1,
        positive_class_f1=f1,
        class_macro_f1=(f1 + f1_neg) / 2,
    )


def score_binary(
    golds: Sequence[str], preds: Sequence[ParsedLabel]
) -> tuple[ConfusionCounts, ClassificationScores, float]:
    """Score TRUE/FALSE golds against parsed predictions.

    INVALID predictions are replaced by the label opposite the gold
    before counting, so unparseable output is maximally penalized; the
    fraction of such predictions is returned as ``invalid_rate``.
    """
    if len(golds) != len(preds):
        raise LengthMismatch(f"{len(golds)} golds vs {len(preds)} predictions")
    if not golds:
        raise EmptyInput("nothing to score")
    for g in golds:
        if g not in (TRUE, FALSE):
            raise InputError(f"gold label must be TRUE or FALSE, got {g!r}")

    tp = fp = fn = tn = invalid = 0
    for gold, pred in zip(golds, preds):
        value = pred.value
        if value == INVALID:
            invalid += 1
            value = FALSE if gold == TRUE else TRUE
        if gold == TRUE:
            if value == TRUE:
                tp += 1
            else:
                fn += 1
        else:
            if value == TRUE:
                fp += 1
            else:
                tn += 1
    counts = ConfusionCounts(tp, fp, fn, tn)
    return counts, scores_from_counts(counts), invalid / len(golds)


@dataclass
class StageScores:
    per_stage: dict[int, ClassificationScores]
    overall: ClassificationScores
    invalid_rate: float


def score_stages(
    golds: Sequence[int], preds: Sequence[ParsedLabel], valid_stages: Iterable[int]
) -> StageScores:
    """One-vs-rest scores per stage plus their macro mean.

    INVALID predictions act as a reserved non-stage that matches no gold,
    counting as a miss for the gold stage and a (true) negative elsewhere.
    Only stages with at least one gold instance appear in ``per_stage``
    and contribute to the overall mean.
    """
    stages = set(valid_stages)
    if len(golds) != len(preds):
        raise LengthMismatch(f"{len(golds)} golds vs {len(preds)} predictions")
    if not golds:
        raise EmptyInput("nothing to score")
    bad = sorted({g for g in golds if g not in stages})
    if bad:
        raise InputError(f"gold stages outside valid set: {bad}")

    resolved: list[object] = []
    invalid = 0
    for pred in preds:
        if pred.value == INVALID or pred.value not in stages:
            invalid += pred.value == INVALID
            resolved.append(None)  # reserved non-stage
        else:
            resolved.append(pred.value)

    per_stage: dict[int, ClassificationScores] = {}
    for stage in sorted({g for g in golds}):
        tp = fp = fn = tn = 0
        for gold, value in zip(golds, resolved):
            if gold == stage:
                if value == stage:
                    tp += 1
                else:
                    fn += 1
            else:
                if value == stage:
                    fp += 1
                else:
                    tn += 1
        per_stage[stage] = scores_from_counts(ConfusionCounts(tp, fp, fn, tn))

    n = len(per_stage)
    overall = ClassificationScores(
        precision=sum(s.precision for s in per_stage.values()) / n,
        recall=sum(s.recall for s in per_stage.values()) / n,
        specificity=sum(s.specificity for s in per_stage.values()) / n,
        f1=sum(s.f1 for s in per_stage.values()) / n,
        positive_class_f1=sum(s.positive_class_f1 for s in per_stage.values()) / n,
        class_macro_f1=sum(s.class_macro_f1 for s in per_stage.values()) / n,
    )
    return StageScores(per_stage, overall, invalid / len(golds))


def macro_over_conditions(
    per_condition: Mapping[str, ClassificationScores], field: str = "f1"
) -> float:
    """Unweighted arithmetic mean of one F1 field across conditions."""
    if not per_condition:
        raise EmptyInput("no condition scores supplied")
    values = [getattr(scores, field) for scores in per_condition.values()]
    return sum(values) / len(values)


# ---------------------------------------------------------------------------
# Manual-rating aggregation
# ---------------------------------------------------------------------------

DIMENSIONS = ("conciseness", "accuracy", "readability")


@dataclass(frozen=True)
class RaterScore:
    sample_id: str
    rater_id: str
    model_id: str
    conciseness: int
    accuracy: int
    readability: int

    def __post_init__(self):
        for dim in DIMENSIONS:
            v = getattr(self, dim)
            if v not in (1, 2, 3, 4, 5):
                raise InputError(f"{dim} must be an integer 1..5, got {v!r}")


def aggregate_manual(scores: Sequence[RaterScore]) -> dict[str, dict[str, float]]:
    """Per-model, per-dimension means over all raters and samples.

    Means are reported to 2 decimals, matching how the rating tables are
    published. With equal sample counts per rater this equals the mean
    of per-rater means.
    """
    if not scores:
        raise EmptyInput("no rater scores supplied")
    sums: dict[str, dict[str, list[float]]] = {}
    for s in scores:
        per_model = sums.setdefault(s.model_id, {d: [] for d in DIMENSIONS})
        for dim in DIMENSIONS:
            per_model[dim].append(getattr(s, dim))
    return {
        model: {dim: round(sum(vals) / len(vals), 2) for dim, vals in dims.items()}
        for model, dims in sums.items()
    }
