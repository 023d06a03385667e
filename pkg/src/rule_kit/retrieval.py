"""Cross-modal embedding retrieval and the symmetric contrastive objective.

Embeddings are supplied by the caller (no encoders live here). Scores are
cosine similarities; ties in top-k selection go to the smaller corpus index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DimMismatch,
    EmptyQuestion,
    KTooLarge,
    NonFinite,
    NonSquare,
    ValidationError,
    ZeroRow,
)

ZERO_NORM = 1e-12

PROMPT_TEMPLATE = (
    "You are provided with a medical image, a image-related question and a "
    "reference report. Please answer the question based on the image and "
    "report. [Question] {question} [Reference Report] {reports} [Image]"
)


@dataclass(frozen=True)
class EmbeddingMatrix:
    """N x P embeddings, one example per row."""

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        data = np.array(self.data)
        if data.ndim != 2:
            raise ValidationError(f"embedding matrix must be 2-D, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError(f"embedding matrix needs N >= 1 and P >= 1, got {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFinite("embedding matrix contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class RetrievalHit:
    corpus_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class Corpus:
    """Embeddings plus one identifier per row."""

    embeddings: EmbeddingMatrix
    ids: tuple[str, ...]

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != self.embeddings.rows:
            raise DimMismatch(f"{len(ids)} ids for {self.embeddings.rows} embedding rows")
        object.__setattr__(self, "ids", ids)
        if not self.embeddings.normalized:
            object.__setattr__(self, "embeddings", normalize_rows(self.embeddings))


@dataclass
class ProjectionHeads:
    w_img: np.ndarray
    w_txt: np.ndarray

    @property
    def out_dim(self) -> int:
        return self.w_img.shape[1]

    def project_img(self, m: EmbeddingMatrix) -> EmbeddingMatrix:
        return normalize_rows(EmbeddingMatrix(np.asarray(m.data, np.float64) @ self.w_img))

    def project_txt(self, m: EmbeddingMatrix) -> EmbeddingMatrix:
        return normalize_rows(EmbeddingMatrix(np.asarray(m.data, np.float64) @ self.w_txt))


@dataclass
class TrainResult:
    heads: ProjectionHeads
    initial_loss: float
    trace: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.trace[-1]


def _as_matrix(m) -> EmbeddingMatrix:
    return m if isinstance(m, EmbeddingMatrix) else EmbeddingMatrix(np.asarray(m, dtype=np.float64))


def normalize_rows(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale every row to unit L2 norm; zero rows raise :class:`ZeroRow`."""
    m = _as_matrix(m)
    data = np.asarray(m.data, dtype=np.float64)
    norms = np.linalg.norm(data, axis=1)
    bad = np.flatnonzero(norms <= ZERO_NORM)
    if bad.size:
        raise ZeroRow(int(bad[0]))
    return EmbeddingMatrix(data / norms[:, None], normalized=True)


def similarity_matrix(v_img: EmbeddingMatrix, v_txt: EmbeddingMatrix) -> np.ndarray:
    """Cosine similarity of every image row against every text row."""
    v_img, v_txt = _as_matrix(v_img), _as_matrix(v_txt)
    if v_img.dim != v_txt.dim:
        raise DimMismatch(f"image dim {v_img.dim} != text dim {v_txt.dim}")
    if not v_img.normalized:
        v_img = normalize_rows(v_img)
    if not v_txt.normalized:
        v_txt = normalize_rows(v_txt)
    return np.asarray(v_img.data, np.float64) @ np.asarray(v_txt.data, np.float64).T


def cosine_scores(query: Sequence[float], corpus: Corpus) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != corpus.embeddings.dim:
        raise DimMismatch(f"query has shape {q.shape}, corpus dim is {corpus.embeddings.dim}")
    norm = np.linalg.norm(q)
    if norm <= ZERO_NORM:
        raise ZeroRow(0)
    return np.asarray(corpus.embeddings.data, np.float64) @ (q / norm)


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, descending, ties to the lower index."""
    n = scores.shape[0]
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if k > n:
        raise KTooLarge(f"k={k} exceeds corpus size {n}")
    if k < n:
        # kth largest value; everything strictly above it is in, ties fill by index
        kth = np.partition(scores, n - k)[n - k]
        above = np.flatnonzero(scores > kth)
        tied = np.flatnonzero(scores == kth)[: k - above.size]
        chosen = np.concatenate([above, tied])
    else:
        chosen = np.arange(n)
    order = np.lexsort((chosen, -scores[chosen]))
    return chosen[order]


def top_k_retrieve(query: Sequence[float], corpus: Corpus, k: int) -> list[RetrievalHit]:
    scores = cosine_scores(query, corpus)
    idx = top_k_indices(scores, k)
    return [
        RetrievalHit(corpus.ids[i], float(scores[i]), rank)
        for rank, i in enumerate(idx, start=1)
    ]


def _check_square(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 1:
        raise NonSquare(f"similarity matrix must be square and non-empty, got {s.shape}")
    return s


def _log_softmax(s: np.ndarray, axis: int) -> np.ndarray:
    shifted = s - s.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def contrastive_loss(s) -> tuple[float, float, float]:
    """Symmetric cross-entropy over a paired similarity matrix.

    Returns ``(total, image_to_text, text_to_image)`` in nats; ``total`` is
    the mean of the two directional terms.
    """
    s = _check_square(s)
    n = s.shape[0]
    loss_img = -float(np.trace(_log_softmax(s, axis=1))) / n
    loss_txt = -float(np.trace(_log_softmax(s, axis=0))) / n
    # log-softmax of the diagonal is <= 0 mathematically; clip rounding noise
    loss_img, loss_txt = max(loss_img, 0.0), max(loss_txt, 0.0)
    return (loss_img + loss_txt) / 2, loss_img, loss_txt


def contrastive_loss_grad(s) -> np.ndarray:
    """Gradient of the total contrastive loss with respect to every S[i, j]."""
    s = _check_square(s)
    n = s.shape[0]
    eye = np.eye(n)
    g_img = (np.exp(_log_softmax(s, axis=1)) - eye) / n
    g_txt = (np.exp(_log_softmax(s, axis=0)) - eye) / n
    return (g_img + g_txt) / 2


def _normalize_backward(u: np.ndarray, norms: np.ndarray, grad_u: np.ndarray) -> np.ndarray:
    # d(z/|z|)/dz applied to grad_u: drop the radial part, scale by 1/|z|
    radial = np.sum(grad_u * u, axis=1, keepdims=True)
    return (grad_u - u * radial) / norms[:, None]


def projection_loss_and_grads(x_img: np.ndarray, x_txt: np.ndarray, w_img: np.ndarray, w_txt: np.ndarray):
    """Contrastive loss of projected embeddings and its gradients w.r.t. both heads."""
    z_img, z_txt = x_img @ w_img, x_txt @ w_txt
    n_img = np.linalg.norm(z_img, axis=1)
    n_txt = np.linalg.norm(z_txt, axis=1)
    if np.any(n_img <= ZERO_NORM) or np.any(n_txt <= ZERO_NORM):
        raise NonFinite("projection collapsed a row to zero")
    u_img, u_txt = z_img / n_img[:, None], z_txt / n_txt[:, None]
    s = u_img @ u_txt.T
    loss = contrastive_loss(s)[0]
    g_s = contrastive_loss_grad(s)
    g_z_img = _normalize_backward(u_img, n_img, g_s @ u_txt)
    g_z_txt = _normalize_backward(u_txt, n_txt, g_s.T @ u_img)
    return loss, x_img.T @ g_z_img, x_txt.T @ g_z_txt


def train_projections(
    v_img: EmbeddingMatrix,
    v_txt: EmbeddingMatrix,
    out_dim: int,
    epochs: int,
    learning_rate: float,
    seed: int = 0,
) -> TrainResult:
    """Fit two linear heads on frozen paired embeddings by full-batch gradient descent.

    Heads start from a seeded uniform(-0.01, 0.01) draw. ``trace[i]`` is the
    loss after epoch ``i + 1``; a non-finite loss aborts with
    :class:`NonFinite` carrying the trace so far.
    """
    v_img, v_txt = _as_matrix(v_img), _as_matrix(v_txt)
    if v_img.rows != v_txt.rows:
        raise DimMismatch(f"{v_img.rows} image rows vs {v_txt.rows} text rows")
    if epochs < 1:
        raise ValidationError("epochs must be >= 1")
    if not learning_rate > 0:
        raise ValidationError("learning_rate must be > 0")
    if out_dim < 1:
        raise ValidationError("out_dim must be >= 1")

    rng = np.random.default_rng(seed)
    w_img = rng.uniform(-0.01, 0.01, size=(v_img.dim, out_dim))
    w_txt = rng.uniform(-0.01, 0.01, size=(v_txt.dim, out_dim))
    x_img = np.asarray(v_img.data, np.float64)
    x_txt = np.asarray(v_txt.data, np.float64)

    loss, g_img, g_txt = projection_loss_and_grads(x_img, x_txt, w_img, w_txt)
    initial = loss
    trace: list[float] = []
    for _ in range(epochs):
        with np.errstate(over="ignore", invalid="ignore"):
            w_img = w_img - learning_rate * g_img
            w_txt = w_txt - learning_rate * g_txt
            if not (np.all(np.isfinite(w_img)) and np.all(np.isfinite(w_txt))):
                raise NonFinite("training diverged", trace)
            try:
                loss, g_img, g_txt = projection_loss_and_grads(x_img, x_txt, w_img, w_txt)
            except NonFinite as exc:
                raise NonFinite(str(exc), trace) from exc
        if not np.isfinite(loss):
            raise NonFinite("training diverged", trace)
        trace.append(float(loss))
    return TrainResult(ProjectionHeads(w_img, w_txt), float(initial), trace)


def assemble_prompt(question: str, reports: Sequence[str]) -> str:
    if not question or not question.strip():
        raise EmptyQuestion("question must be non-empty")
    return PROMPT_TEMPLATE.format(question=question, reports="\n".join(reports))
