"""Prediction records, yes/no answer parsing and over-reliance preference mining."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import MissingAnswer, NoErrors, ValidationError

YES, NO, UNKNOWN = "yes", "no", "unknown"

_LEADING = re.compile(r"\W*([^\W_]+)")
_YES_NO = re.compile(r"\b(yes|no)\b")


@dataclass(frozen=True)
class PredictionRecord:
    """One QA sample: gold label, the answer without retrieval and one answer per depth k."""

    id: str
    question: str
    ground_truth: str
    base_answer: str
    rag_answers: Mapping[int, str]
    context: tuple[str, ...] = ()

    def __post_init__(self):
        if self.ground_truth not in (YES, NO):
            raise ValidationError(f"ground_truth must be yes|no, got {self.ground_truth!r}")
        answers = {}
        for k, text in self.rag_answers.items():
            if isinstance(k, bool) or not isinstance(k, int) or k < 1:
                raise ValidationError(f"rag_answers keys must be positive integers, got {k!r}")
            answers[k] = text
        object.__setattr__(self, "rag_answers", dict(sorted(answers.items())))
        object.__setattr__(self, "context", tuple(self.context))

    def rag_answer(self, k: int) -> str:
        try:
            return self.rag_answers[k]
        except KeyError:
            raise MissingAnswer(self.id, k) from None


@dataclass(frozen=True)
class PreferencePair:
    id: str
    question: str
    context: tuple[str, ...]
    preferred: str
    dispreferred: str

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "context": list(self.context),
            "preferred": self.preferred,
            "dispreferred": self.dispreferred,
        }


@dataclass(frozen=True)
class OverReliance:
    numerator: int
    denominator: int
    ratio: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "ratio", self.numerator / self.denominator)


def normalize_answer(raw: str) -> str:
    """Map free text to ``"yes"``, ``"no"`` or ``"unknown"``.

    The leading word decides when it is yes/no. Otherwise the answer is the
    single one of yes/no that appears as a whole word; text containing both
    or neither is unknown.
    """
    text = raw.lower()
    lead = _LEADING.match(text)
    if lead and lead.group(1) in (YES, NO):
        return lead.group(1)
    found = set(_YES_NO.findall(text))
    if len(found) == 1:
        return found.pop()
    return UNKNOWN


def is_correct(answer: str, ground_truth: str) -> bool:
    return normalize_answer(answer) == ground_truth


def mine_preferences(records: Iterable[PredictionRecord], k: int) -> list[PreferencePair]:
    """Pairs from records the model got right alone but wrong with k retrieved contexts.

    Preferred is the gold label, dispreferred the raw retrieval-augmented answer.
    The attached context is the first ``k`` retrieved reports when present.
    """
    pairs = []
    for rec in records:
        rag = rec.rag_answer(k)
        if is_correct(rec.base_answer, rec.ground_truth) and not is_correct(rag, rec.ground_truth):
            pairs.append(PreferencePair(rec.id, rec.question, rec.context[:k], rec.ground_truth, rag))
    return pairs


def over_reliance_ratio(records: Sequence[PredictionRecord], k: int) -> OverReliance:
    """Share of retrieval-augmented errors whose base answer was correct.

    Raises :class:`NoErrors` when no answer at ``k`` is wrong.
    """
    numerator = denominator = 0
    for rec in records:
        if is_correct(rec.rag_answer(k), rec.ground_truth):
            continue
        denominator += 1
        if is_correct(rec.base_answer, rec.ground_truth):
            numerator += 1
    if denominator == 0:
        raise NoErrors(f"no incorrect retrieval-augmented answers at k={k}")
    return OverReliance(numerator, denominator)
