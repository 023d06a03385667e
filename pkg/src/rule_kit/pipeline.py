"""End-to-end report: calibrate k, score at the chosen depth, mine preference pairs."""

from __future__ import annotations

import json
import os
import random
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Sequence

from . import io
from .errors import EmptyLambdaHat, NoErrors, ValidationError
from .metrics import BASE, classification_report, confusion_counts, format_table
from .preference import PredictionRecord, mine_preferences, over_reliance_ratio
from .risk import CalibrationInput, Procedure, calibrate

SEED_ENV = "RULE_KIT_SEED"


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


@dataclass
class PipelineConfig:
    predictions: str | None = None
    out: str = "rule-kit-out"
    corpus: str | None = None
    embeddings: str | None = None
    alpha_risk: float = 0.1
    delta: float = 0.05
    k_min: int = 1
    k_max: int = 5
    procedure: str = "bonferroni"
    beta_dpo: float = 0.1
    seed: int | None = None
    mine: bool = True

    def __post_init__(self):
        if self.seed is None:
            self.seed = default_seed()
        self.procedure = Procedure.parse(self.procedure).value
        for name in ("alpha_risk", "delta"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1), got {value}")
        if not 1 <= self.k_min <= self.k_max:
            raise ValidationError(f"need 1 <= k_min <= k_max, got {self.k_min}..{self.k_max}")
        if not self.beta_dpo > 0:
            raise ValidationError("beta_dpo must be > 0")

    @property
    def candidates(self) -> list[int]:
        return list(range(self.k_min, self.k_max + 1))

    @classmethod
    def from_file(cls, path, **overrides) -> "PipelineConfig":
        """Flat JSON object of config keys; non-None ``overrides`` win."""
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValidationError(f"{path}: unknown config key(s): {', '.join(unknown)}")
        for key, value in doc.items():
            if isinstance(value, (dict, list)):
                raise ValidationError(f"{path}: config key {key!r} must be a scalar")
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**doc)


def run_report(config: PipelineConfig) -> dict:
    """Calibrate, then write certificate, metrics and preference pairs under ``config.out``.

    Raises :class:`EmptyLambdaHat` (after writing the certificate) when no
    depth is certified; metrics and pairs are not produced in that case.
    """
    if config.predictions is None:
        raise ValidationError("config.predictions is required")
    records = io.parse_predictions(config.predictions)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)

    cert = calibrate(CalibrationInput(
        records, config.candidates, config.alpha_risk, config.delta, config.procedure
    ))
    io.dump_json(cert.to_dict(), out / "certificate.json")
    if cert.chosen_k is None:
        raise EmptyLambdaHat(cert)
    k = cert.chosen_k

    base = classification_report(confusion_counts(records, BASE))
    rag = classification_report(confusion_counts(records, k))
    try:
        ratio = over_reliance_ratio(records, k)
        reliance = {"numerator": ratio.numerator, "denominator": ratio.denominator,
                    "ratio": ratio.ratio, "defined": True}
    except NoErrors:
        reliance = {"numerator": 0, "denominator": 0, "ratio": None, "defined": False}
    metrics_doc = {
        "k": k,
        "n": len(records),
        "base": base.to_dict(),
        "rag": rag.to_dict(),
        "over_reliance": reliance,
    }
    io.dump_json(metrics_doc, out / "metrics.json")
    (out / "metrics.txt").write_text(
        format_table({"base": base, f"rag@k={k}": rag}), encoding="utf-8"
    )

    summary = {
        "chosen_k": k,
        "lambda_hat": list(cert.lambda_hat),
        "n": len(records),
        "seed": config.seed,
        "certificate": "certificate.json",
        "metrics": "metrics.json",
    }
    if config.mine:
        pairs = mine_preferences(records, k)
        io.write_preferences(pairs, out / "preferences.jsonl")
        summary["preferences"] = "preferences.jsonl"
        summary["pairs"] = len(pairs)
    io.dump_json(summary, out / "summary.json")
    return summary


# ---------------------------------------------------------------------------
# synthetic prediction logs

_YES_TEXT = ("Yes.", "yes", "Yes, the finding is present.", "YES - visible on the image.")
_NO_TEXT = ("No.", "no", "No, nothing abnormal is seen.", "There is no such finding.")
_UNSURE_TEXT = ("The image is unclear.", "Cannot determine from this view.")


def _say(rng: random.Random, label: str) -> str:
    return rng.choice(_YES_TEXT if label == "yes" else _NO_TEXT)


def _flip(label: str) -> str:
    return "no" if label == "yes" else "yes"


def make_synthetic_predictions(
    n: int,
    rag_error_counts: dict[int, int],
    base_correct: int,
    seed: int = 0,
    unknown_share: float = 0.1,
) -> list[PredictionRecord]:
    """Prediction logs with exactly ``rag_error_counts[k]`` wrong answers at each k.

    ``base_correct`` records get a correct no-retrieval answer. Wrong answers
    are mostly the flipped label, occasionally unparseable text.
    """
    if not 0 <= base_correct <= n or any(not 0 <= c <= n for c in rag_error_counts.values()):
        raise ValidationError("counts must lie in [0, n]")
    rng = random.Random(seed)
    truths = [rng.choice(("yes", "no")) for _ in range(n)]
    base_ok = set(rng.sample(range(n), base_correct))
    wrong_at = {k: set(rng.sample(range(n), c)) for k, c in sorted(rag_error_counts.items())}

    def wrong(label: str) -> str:
        if rng.random() < unknown_share:
            return rng.choice(_UNSURE_TEXT)
        return _say(rng, _flip(label))

    records = []
    for i, truth in enumerate(truths):
        base = _say(rng, truth) if i in base_ok else wrong(truth)
        answers = {k: (wrong(truth) if i in wrong_at[k] else _say(rng, truth)) for k in wrong_at}
        kmax = max(wrong_at, default=0)
        context = tuple(f"Report {i}-{r}: synthetic findings." for r in range(1, kmax + 1))
        records.append(PredictionRecord(
            id=f"q{i:04d}",
            question=f"Is finding {i % 7} present in image {i}?",
            ground_truth=truth,
            base_answer=base,
            rag_answers=answers,
            context=context,
        ))
    return records


# n=200; only k=3 stays under alpha=0.1 (4/200 wrong), every other depth is at or above 0.12
SYNTHETIC_N = 200
SYNTHETIC_ERRORS = {1: 40, 2: 30, 3: 4, 4: 24, 5: 50}
SYNTHETIC_BASE_CORRECT = 150
SYNTHETIC_SEED = 7
SYNTHETIC_CHOSEN_K = 3


def designed_fixture() -> list[PredictionRecord]:
    return make_synthetic_predictions(
        SYNTHETIC_N, SYNTHETIC_ERRORS, SYNTHETIC_BASE_CORRECT, SYNTHETIC_SEED
    )


def bundled_fixture_path() -> Path:
    return Path(str(resources.files("rule_kit") / "data" / "synthetic_predictions.jsonl"))


def write_fixture(records: Sequence[PredictionRecord], path) -> None:
    io.write_predictions(records, path)
