"""Risk-calibrated retrieval toolkit for retrieval-augmented QA prediction logs."""

from .dpo import DpoBatchItem, DpoConfig, dpo_loss, margin_loss, preference_probability
from .errors import RuleKitError
from .metrics import ConfusionCounts, MetricsReport, classification_report, confusion_counts
from .preference import (
    PredictionRecord,
    PreferencePair,
    mine_preferences,
    normalize_answer,
    over_reliance_ratio,
)
from .retrieval import (
    Corpus,
    EmbeddingMatrix,
    ProjectionHeads,
    RetrievalHit,
    assemble_prompt,
    contrastive_loss,
    contrastive_loss_grad,
    normalize_rows,
    similarity_matrix,
    top_k_retrieve,
    train_projections,
)
from .risk import (
    CalibrationCertificate,
    CalibrationInput,
    CandidateReport,
    CoverageReport,
    Procedure,
    accept_bonferroni,
    accept_fixed_sequence,
    binomial_tail_cdf,
    calibrate,
    certify,
    empirical_risk,
    kl_bernoulli,
    p_value_binomial,
    p_value_hb,
    simulate_coverage,
)

__version__ = "0.1.0"
