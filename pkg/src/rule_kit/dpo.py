"""Reference evaluation of the DPO preference loss on supplied log-probabilities.

The same loss serves plain DPO and knowledge-balanced preference tuning: the
latter only changes which model supplies the reference log-probabilities.
Log-probabilities are opaque sequence-level sums and may be any finite real.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import EmptyBatch, NonFinite, ValidationError


@dataclass(frozen=True)
class DpoBatchItem:
    logp_policy_preferred: float
    logp_ref_preferred: float
    logp_policy_dispreferred: float
    logp_ref_dispreferred: float
    id: str = ""

    def __post_init__(self):
        for name in ("logp_policy_preferred", "logp_ref_preferred",
                     "logp_policy_dispreferred", "logp_ref_dispreferred"):
            if not math.isfinite(getattr(self, name)):
                raise NonFinite(f"{name} is not finite for item {self.id!r}")

    @property
    def margin(self) -> float:
        """Preferred log-ratio minus dispreferred log-ratio."""
        return (
            (self.logp_policy_preferred - self.logp_ref_preferred)
            - (self.logp_policy_dispreferred - self.logp_ref_dispreferred)
        )


@dataclass(frozen=True)
class DpoConfig:
    # written as alpha in most DPO write-ups; renamed to keep alpha for the risk bound
    beta_dpo: float = 0.1

    def __post_init__(self):
        if not (math.isfinite(self.beta_dpo) and self.beta_dpo > 0):
            raise ValidationError(f"beta_dpo must be a positive finite number, got {self.beta_dpo}")


def _softplus(x: float) -> float:
    """log(1 + e^x) without overflow."""
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def preference_probability(reward_preferred: float, reward_dispreferred: float) -> float:
    """Bradley-Terry probability that the preferred response wins."""
    diff = reward_preferred - reward_dispreferred
    if not math.isfinite(diff):
        raise NonFinite("rewards must be finite")
    return sigmoid(diff)


def margin_loss(margin: float, beta: float) -> float:
    """-log sigmoid(beta * margin)."""
    z = beta * margin
    if not math.isfinite(z):
        raise NonFinite(f"scaled margin {z} is not finite")
    return _softplus(-z)


def dpo_loss(batch: Sequence[DpoBatchItem], config: DpoConfig) -> tuple[float, list[float]]:
    """Mean and per-item DPO losses.

    The mean is an exactly rounded sum (``math.fsum``) divided by the batch
    size, so it does not depend on item order.
    """
    if len(batch) == 0:
        raise EmptyBatch("batch is empty")
    losses = [margin_loss(item.margin, config.beta_dpo) for item in batch]
    return math.fsum(losses) / len(losses), losses
