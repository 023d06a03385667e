"""Distribution-free calibration of the retrieval depth k.

For each candidate depth the empirical factuality risk is turned into a
p-value for the null "true risk exceeds alpha": the smaller of a
Bernoulli-KL (Hoeffding-type) bound and e times a binomial lower tail. A
family-wise error rate procedure over the candidates then yields the set of
certified depths.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from functools import lru_cache
from numbers import Rational
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, ValidationError
from .preference import PredictionRecord, is_correct

log = logging.getLogger(__name__)

_TINY = sys.float_info.min


class Procedure(str, enum.Enum):
    BONFERRONI = "bonferroni"
    FIXED_SEQUENCE = "fixed_sequence"

    @classmethod
    def parse(cls, value) -> "Procedure":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).replace("-", "_").lower())
        except ValueError:
            raise ValidationError(f"unknown procedure {value!r}") from None


# ---------------------------------------------------------------------------
# binomial lower tail (Loader's saddle-point pmf, summed termwise)

# stirlerr(n) = log(n!) - log(sqrt(2 pi n) (n/e)^n) for n = 0..15
_STIRLERR_SMALL = np.array([
    0.0,
    0.0810614667953272582196702,
    0.0413406959554092940938221,
    0.02767792568499833914878929,
    0.02079067210376509311152277,
    0.01664469118982119216319487,
    0.01387612882307074799874573,
    0.01189670994589177009505572,
    0.010411265261972096497478567,
    0.009255462182712732917728637,
    0.008330563433362871256469318,
    0.007573675487951840794972024,
    0.006942840107209529865664152,
    0.006408994188004207068439631,
    0.005951370112758847735624416,
    0.005554733551962801371038690,
])

_S0, _S1, _S2, _S3, _S4 = 1 / 12, 1 / 360, 1 / 1260, 1 / 1680, 1 / 1188


def _stirlerr(n: np.ndarray) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    out = np.empty_like(n)
    small = n <= 15
    out[small] = _STIRLERR_SMALL[n[small].astype(np.int64)]
    big = ~small
    if np.any(big):
        x = n[big]
        nn = x * x
        r = np.where(
            x > 500, (_S0 - _S1 / nn) / x,
            np.where(
                x > 80, (_S0 - (_S1 - _S2 / nn) / nn) / x,
                np.where(
                    x > 35, (_S0 - (_S1 - (_S2 - _S3 / nn) / nn) / nn) / x,
                    (_S0 - (_S1 - (_S2 - (_S3 - _S4 / nn) / nn) / nn) / nn) / x,
                ),
            ),
        )
        out[big] = r
    return out


def _bd0(x: np.ndarray, mu: float) -> np.ndarray:
    """x log(x/mu) + mu - x without cancellation when x is close to mu."""
    x = np.asarray(x, dtype=np.float64)
    out = x * np.log(x / mu) + mu - x
    near = np.abs(x - mu) < 0.1 * (x + mu)
    if np.any(near):
        xn = x[near]
        v = (xn - mu) / (xn + mu)
        s = (xn - mu) * v
        ej = 2 * xn * v
        v2 = v * v
        for j in range(1, 1000):
            ej = ej * v2
            s_next = s + ej / (2 * j + 1)
            if np.array_equal(s_next, s):
                break
            s = s_next
        out[near] = s
    return out


def _binom_log_pmf_interior(x: np.ndarray, n: int, p: float, q: float) -> np.ndarray:
    """log P(Bin(n, p) = x) for 0 < x < n."""
    lc = (
        _stirlerr(np.array([n]))[0] - _stirlerr(x) - _stirlerr(n - x)
        - _bd0(x, n * p) - _bd0(n - x, n * q)
    )
    lf = math.log(2 * math.pi) + np.log(x) + np.log1p(-x / n)
    return lc - 0.5 * lf


def _binom_log_pmf_edge_zero(n: int, p: float) -> float:
    """log P(Bin(n, p) = 0)."""
    return n * math.log1p(-p)


def binomial_pmf(x, n: int, q: float) -> np.ndarray:
    """P(Bin(n, q) = x) for integer array ``x`` in [0, n]."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    p, pc = float(q), 1.0 - float(q)
    out = np.empty_like(x)
    zero, full = x == 0, x == n
    inner = ~(zero | full)
    if np.any(inner):
        out[inner] = np.exp(_binom_log_pmf_interior(x[inner], n, p, pc))
    if np.any(zero):
        out[zero] = math.exp(_binom_log_pmf_edge_zero(n, p))
    if np.any(full):
        out[full] = math.exp(n * math.log(p))
    return out


@lru_cache(maxsize=256)
def _binomial_pmf_table(n: int, q: float) -> np.ndarray:
    table = binomial_pmf(np.arange(n + 1), n, q)
    table.setflags(write=False)
    return table


@lru_cache(maxsize=65536)
def _binomial_cdf_cached(m: int, n: int, q: float) -> float:
    if m >= n:
        return 1.0
    return min(math.fsum(_binomial_pmf_table(n, q)[: m + 1]), 1.0)


def binomial_tail_cdf(m: int, n: int, q: float) -> float:
    """P(Bin(n, q) <= m).

    Each pmf term is evaluated with a saddle-point expansion in log space,
    so the sum keeps roughly 14 significant digits well beyond n = 10^5.
    """
    if isinstance(m, bool) or int(m) != m or int(n) != n:
        raise DomainError("m and n must be integers")
    m, n = int(m), int(n)
    if n < 0 or not 0 <= m <= n:
        raise DomainError(f"need 0 <= m <= n, got m={m}, n={n}")
    if not 0.0 < q < 1.0:
        raise DomainError(f"q must lie in (0, 1), got {q}")
    return _binomial_cdf_cached(m, n, float(q))


# ---------------------------------------------------------------------------
# p-values


def kl_bernoulli(a: float, b: float) -> float:
    """KL divergence between Bernoulli(a) and Bernoulli(b), in nats."""
    if not 0.0 <= a <= 1.0:
        raise DomainError(f"a must lie in [0, 1], got {a}")
    if not 0.0 < b < 1.0:
        raise DomainError(f"b must lie in (0, 1), got {b}")
    a = float(a)
    head = 0.0 if a == 0.0 else a * math.log(a / b)
    tail = 0.0 if a == 1.0 else (1.0 - a) * math.log((1.0 - a) / (1.0 - b))
    return max(head + tail, 0.0)


def _check_pvalue_args(fr, n, alpha_risk):
    if not 0 <= fr <= 1:
        raise DomainError(f"risk must lie in [0, 1], got {fr}")
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise DomainError(f"n must be a positive integer, got {n}")
    if not 0.0 < alpha_risk < 1.0:
        raise DomainError(f"alpha_risk must lie in (0, 1), got {alpha_risk}")


def p_value_hb(fr, n: int, alpha_risk: float) -> float:
    """exp(-n * KL(min(fr, alpha) || alpha)); equals 1 whenever fr >= alpha."""
    _check_pvalue_args(fr, n, alpha_risk)
    a = min(float(fr), alpha_risk)
    return min(max(math.exp(-int(n) * kl_bernoulli(a, alpha_risk)), _TINY), 1.0)


def loss_count(fr, n: int) -> int:
    """ceil(n * fr), robust to the rounding of fractions like 0.3 * 10."""
    if isinstance(fr, Rational):
        return math.ceil(Fraction(fr) * n)
    x = float(fr) * n
    nearest = round(x)
    if abs(x - nearest) <= 1e-9 * max(1.0, abs(x)):
        return int(nearest)
    return math.ceil(x)


def p_value_binomial(fr, n: int, alpha_risk: float) -> float:
    """e * P(Bin(n, alpha) <= ceil(n * fr)), capped at 1."""
    _check_pvalue_args(fr, n, alpha_risk)
    n = int(n)
    m = min(loss_count(fr, n), n)
    return min(max(math.e * binomial_tail_cdf(m, n, alpha_risk), _TINY), 1.0)


# ---------------------------------------------------------------------------
# FWER procedures


def _check_delta(p_values: Sequence[float], delta: float) -> None:
    if len(p_values) == 0:
        raise ValidationError("need at least one p-value")
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")


def accept_bonferroni(p_values: Sequence[float], delta: float) -> list[bool]:
    _check_delta(p_values, delta)
    threshold = delta / len(p_values)
    return [p <= threshold for p in p_values]


def accept_fixed_sequence(p_values: Sequence[float], delta: float) -> list[bool]:
    """Test in the given order at level delta, stopping at the first failure."""
    _check_delta(p_values, delta)
    accepted = []
    still_open = True
    for p in p_values:
        still_open = still_open and p <= delta
        accepted.append(still_open)
    return accepted


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class CandidateReport:
    k: int
    fr: float
    p1: float
    p2: float
    p: float
    accepted: bool
    incorrect: int | None = None


@dataclass(frozen=True)
class CalibrationCertificate:
    alpha_risk: float
    delta: float
    n: int
    procedure: Procedure
    candidates: tuple[CandidateReport, ...]
    lambda_hat: tuple[int, ...]
    chosen_k: int | None

    @property
    def status(self) -> str:
        return "ok" if self.lambda_hat else "no_safe_k"

    def to_dict(self) -> dict:
        return {
            "format": "rule-kit/certificate",
            "version": 1,
            "status": self.status,
            "alpha_risk": self.alpha_risk,
            "delta": self.delta,
            "n": self.n,
            "procedure": self.procedure.value,
            "candidates": [asdict(c) for c in self.candidates],
            "lambda_hat": list(self.lambda_hat),
            "chosen_k": self.chosen_k,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping) -> "CalibrationCertificate":
        try:
            return cls(
                alpha_risk=float(doc["alpha_risk"]),
                delta=float(doc["delta"]),
                n=int(doc["n"]),
                procedure=Procedure.parse(doc["procedure"]),
                candidates=tuple(CandidateReport(**c) for c in doc["candidates"]),
                lambda_hat=tuple(int(k) for k in doc["lambda_hat"]),
                chosen_k=None if doc["chosen_k"] is None else int(doc["chosen_k"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed certificate: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "CalibrationCertificate":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"certificate is not valid JSON: {exc.msg}") from None
        return cls.from_dict(doc)


@dataclass
class CalibrationInput:
    records: Sequence[PredictionRecord]
    candidates: Sequence[int]
    alpha_risk: float
    delta: float
    procedure: Procedure = Procedure.BONFERRONI

    def __post_init__(self):
        self.procedure = Procedure.parse(self.procedure)
        _check_candidates(self.candidates)
        _check_levels(self.alpha_risk, self.delta)
        if len(self.records) < 1:
            raise ValidationError("calibration needs at least one record")


def _check_candidates(candidates: Sequence[int]) -> None:
    ks = list(candidates)
    if not ks:
        raise ValidationError("candidate set is empty")
    if any(isinstance(k, bool) or int(k) != k or k < 1 for k in ks):
        raise ValidationError("candidates must be positive integers")
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValidationError("candidates must be sorted and distinct")


def _check_levels(alpha_risk: float, delta: float) -> None:
    if not 0.0 < alpha_risk < 1.0:
        raise DomainError(f"alpha_risk must lie in (0, 1), got {alpha_risk}")
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")


def incorrect_count(records: Sequence[PredictionRecord], k: int) -> int:
    return sum(not is_correct(r.rag_answer(k), r.ground_truth) for r in records)


def empirical_risk(records: Sequence[PredictionRecord], k: int) -> float:
    """Fraction of records whose answer with k retrieved contexts is wrong."""
    if len(records) == 0:
        raise ValidationError("no records")
    return incorrect_count(records, k) / len(records)


@lru_cache(maxsize=65536)
def _p_values(fr, n: int, alpha_risk: float) -> tuple[float, float]:
    return p_value_hb(fr, n, alpha_risk), p_value_binomial(fr, n, alpha_risk)


def certify(
    risks: Mapping[int, float],
    n: int,
    alpha_risk: float,
    delta: float,
    procedure=Procedure.BONFERRONI,
) -> CalibrationCertificate:
    """Run the tests on given per-k empirical risks.

    ``risks`` maps each candidate depth to its risk over ``n`` samples; exact
    :class:`~fractions.Fraction` values avoid any rounding in ceil(n * risk).
    Fixed-sequence testing walks the candidates in ascending k.
    """
    procedure = Procedure.parse(procedure)
    ks = sorted(risks)
    _check_candidates(ks)
    _check_levels(alpha_risk, delta)

    rows = []
    for k in ks:
        fr = risks[k]
        p1, p2 = _p_values(fr, int(n), float(alpha_risk))
        incorrect = int(fr * n) if isinstance(fr, Rational) and (fr * n).denominator == 1 else None
        rows.append((k, fr, p1, p2, min(p1, p2, 1.0), incorrect))

    pvals = [r[4] for r in rows]
    if procedure is Procedure.BONFERRONI:
        accepted = accept_bonferroni(pvals, delta)
    else:
        accepted = accept_fixed_sequence(pvals, delta)

    reports = tuple(
        CandidateReport(k, float(fr), p1, p2, p, ok, incorrect)
        for (k, fr, p1, p2, p, incorrect), ok in zip(rows, accepted)
    )
    lambda_hat = tuple(r.k for r in reports if r.accepted)
    chosen = None
    if lambda_hat:
        chosen = min(lambda_hat, key=lambda k: (risks[k], k))
    return CalibrationCertificate(
        float(alpha_risk), float(delta), int(n), procedure, reports, lambda_hat, chosen
    )


def calibrate(inp: CalibrationInput) -> CalibrationCertificate:
    """Certify retrieval depths from a calibration split of prediction logs.

    The records must be exchangeable with future queries for the guarantee
    to hold; do not reuse the split that tuned the retriever.
    """
    n = len(inp.records)
    risks = {k: Fraction(incorrect_count(inp.records, k), n) for k in inp.candidates}
    cert = certify(risks, n, inp.alpha_risk, inp.delta, inp.procedure)
    if not cert.lambda_hat:
        log.warning("no candidate depth certified at alpha=%g, delta=%g", inp.alpha_risk, inp.delta)
    return cert


# ---------------------------------------------------------------------------
# Monte-Carlo check of the coverage guarantee


@dataclass(frozen=True)
class CoverageReport:
    trials: int
    violations: int
    fwer_estimate: float
    seed: int
    inclusion_rate: dict = field(default_factory=dict)
    empty_rate: float = 0.0

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "violations": self.violations,
            "fwer_estimate": self.fwer_estimate,
            "seed": self.seed,
            "inclusion_rate": {str(k): v for k, v in self.inclusion_rate.items()},
            "empty_rate": self.empty_rate,
        }


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(trial)]))


def simulate_coverage(
    risk_curve: Sequence[float],
    n: int,
    alpha_risk: float,
    delta: float,
    procedure=Procedure.BONFERRONI,
    trials: int = 2000,
    seed: int = 0,
    candidates: Sequence[int] | None = None,
) -> CoverageReport:
    """Estimate P(some certified depth has true risk > alpha) by simulation.

    Each trial draws n independent Bernoulli losses per depth (independent
    across depths) from a generator keyed on ``(seed, trial)``, then runs
    :func:`certify`. Depths default to 1..len(risk_curve).
    """
    risks = np.asarray(risk_curve, dtype=np.float64)
    if risks.ndim != 1 or risks.size == 0:
        raise DomainError("risk_curve must be a non-empty 1-D sequence")
    if np.any((risks < 0) | (risks > 1)):
        raise DomainError("true risks must lie in [0, 1]")
    if trials < 1:
        raise DomainError("trials must be >= 1")
    if n < 1:
        raise DomainError("n must be >= 1")
    ks = list(candidates) if candidates is not None else list(range(1, risks.size + 1))
    if len(ks) != risks.size:
        raise DomainError("one true risk per candidate is required")
    _check_candidates(ks)
    procedure = Procedure.parse(procedure)

    unsafe = {k for k, r in zip(ks, risks) if r > alpha_risk}
    included = dict.fromkeys(ks, 0)
    violations = empty = 0
    for t in range(trials):
        rng = trial_rng(seed, t)
        losses = rng.random((risks.size, n)) < risks[:, None]
        counts = losses.sum(axis=1)
        cert = certify(
            {k: Fraction(int(c), n) for k, c in zip(ks, counts)},
            n, alpha_risk, delta, procedure,
        )
        for k in cert.lambda_hat:
            included[k] += 1
        if not cert.lambda_hat:
            empty += 1
        if unsafe.intersection(cert.lambda_hat):
            violations += 1
    return CoverageReport(
        trials=trials,
        violations=violations,
        fwer_estimate=violations / trials,
        seed=int(seed),
        inclusion_rate={k: c / trials for k, c in included.items()},
        empty_rate=empty / trials,
    )
