"""Yes/no factuality metrics over prediction logs.

"yes" is the positive class. Unparseable answers count as wrong for accuracy
but stay out of the precision/recall cells.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .errors import EmptyInput, ValidationError
from .preference import UNKNOWN, YES, PredictionRecord, normalize_answer

BASE = "base"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    unknown_predictions: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn + self.unknown_predictions

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.tn + other.tn,
            self.fn + other.fn,
            self.unknown_predictions + other.unknown_predictions,
        )


@dataclass(frozen=True)
class MetricsReport:
    """Metrics held as exact fractions; :meth:`to_dict` converts to floats."""

    accuracy: Fraction
    precision: Fraction
    recall: Fraction
    f1: Fraction
    factuality_risk: Fraction
    precision_undefined: bool = False
    recall_undefined: bool = False
    f1_undefined: bool = False

    def to_dict(self) -> dict:
        return {
            "accuracy": float(self.accuracy),
            "precision": float(self.precision),
            "recall": float(self.recall),
            "f1": float(self.f1),
            "factuality_risk": float(self.factuality_risk),
            "precision_undefined": self.precision_undefined,
            "recall_undefined": self.recall_undefined,
            "f1_undefined": self.f1_undefined,
        }


def confusion_counts(records: Sequence[PredictionRecord], condition=BASE) -> ConfusionCounts:
    """Tally predictions for the no-retrieval answer (``"base"``) or depth ``k``."""
    if len(records) == 0:
        raise EmptyInput("no records to score")
    if condition != BASE and (isinstance(condition, bool) or not isinstance(condition, int)):
        raise ValidationError(f"condition must be 'base' or an integer k, got {condition!r}")
    tp = fp = tn = fn = unknown = 0
    for rec in records:
        answer = rec.base_answer if condition == BASE else rec.rag_answer(condition)
        pred = normalize_answer(answer)
        if pred == UNKNOWN:
            unknown += 1
        elif pred == YES:
            if rec.ground_truth == YES:
                tp += 1
            else:
                fp += 1
        elif rec.ground_truth == YES:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, tn, fn, unknown)


def _ratio(num: int, den: int) -> tuple[Fraction, bool]:
    if den == 0:
        return Fraction(0), True
    return Fraction(num, den), False


def classification_report(counts: ConfusionCounts) -> MetricsReport:
    total = counts.total
    if total == 0:
        raise EmptyInput("confusion counts are all zero")
    accuracy = Fraction(counts.tp + counts.tn, total)
    precision, p_undef = _ratio(counts.tp, counts.tp + counts.fp)
    recall, r_undef = _ratio(counts.tp, counts.tp + counts.fn)
    f1_undef = p_undef or r_undef or precision + recall == 0
    f1 = Fraction(0) if f1_undef else 2 * precision * recall / (precision + recall)
    return MetricsReport(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        factuality_risk=1 - accuracy,
        precision_undefined=p_undef,
        recall_undefined=r_undef,
        f1_undefined=f1_undef,
    )


def format_table(rows: dict[str, MetricsReport]) -> str:
    """Plain-text table in percent with two decimals, one row per condition."""
    header = ("condition", "Acc", "Pre", "Rec", "F1", "FR")
    body = [
        (name, *(f"{100 * float(v):.2f}" for v in
                 (r.accuracy, r.precision, r.recall, r.f1, r.factuality_risk)))
        for name, r in rows.items()
    ]
    widths = [max(len(str(line[i])) for line in [header, *body]) for i in range(len(header))]
    lines = []
    for line in [header, *body]:
        cells = [line[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(line[1:], widths[1:])]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"
