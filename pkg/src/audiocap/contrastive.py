"""Cosine-similarity grid and the symmetric contrastive objective.

For a batch of b matched audio/text embedding pairs, the grid holds every
pairwise cosine similarity; the matched pairs sit on the diagonal and the
remaining b^2 - b entries act as in-batch negatives.  The loss is a
temperature-scaled cross entropy over rows (audio to text) and columns
(text to audio), blended by a weight in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EmbeddingBatch
from .tensor import Tensor


class ContrastiveError(ValueError):
    """Degenerate inputs to the contrastive objective."""


@dataclass
class ContrastiveConfig:
    temperature: float = 0.07
    weight: float = 0.5              # blends audio->text vs text->audio terms
    learnable_temperature: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContrastiveError("temperature must be positive")
        if not 0.0 <= self.weight <= 1.0:
            raise ContrastiveError("direction weight must lie in [0, 1]")


@dataclass
class SimilarityMatrix:
    matrix: Tensor      # (b, b), entry [i, k] = cos(audio_i, text_k)

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ContrastiveError("similarity matrix must be square")

    @property
    def batch_size(self) -> int:
        return self.matrix.shape[0]


def _normalize_rows(rows: Tensor) -> Tensor:
    sq = T.tensor_sum(rows * rows, axis=1, keepdims=True)
    if np.any(sq.data < 1e-24):
        raise ContrastiveError("zero-norm embedding row (norm < 1e-12)")
    return rows / T.broadcast_to(T.sqrt(sq), rows.shape)


def cosine_similarity_matrix(audio: EmbeddingBatch, text: EmbeddingBatch) -> SimilarityMatrix:
    """All-pairs cosine similarities, differentiable through both inputs."""
    if audio.rows.shape != text.rows.shape:
        raise ContrastiveError(
            f"embedding batches disagree: {audio.rows.shape} vs {text.rows.shape}")
    a = _normalize_rows(audio.rows)
    t = _normalize_rows(text.rows)
    return SimilarityMatrix(T.matmul(a, T.transpose(t, (1, 0))))


def contrastive_loss(sim: SimilarityMatrix, cfg: ContrastiveConfig,
                     log_temperature: Tensor | None = None) -> Tensor:
    """Blend of row-wise and column-wise cross entropies on the diagonal.

    Row i scores audio_i against every text; column i scores text_i against
    every audio.  With a learnable temperature, pass its log as a scalar
    graph tensor and leave cfg.temperature unused.
    """
    b = sim.batch_size
    diag = np.arange(b)
    if log_temperature is not None:
        temp = T.exp(log_temperature)
        logits = sim.matrix / T.broadcast_to(T.reshape(temp, (1, 1)), sim.matrix.shape)
    else:
        logits = sim.matrix * (1.0 / cfg.temperature)
    audio_to_text = -T.take_along_last(T.log_softmax(logits, axis=1), diag)
    text_to_audio = -T.take_along_last(T.log_softmax(logits, axis=0), diag)
    per_pair = cfg.weight * audio_to_text + (1.0 - cfg.weight) * text_to_audio
    return T.mean(per_pair)


def diagonal_dominance(sim: SimilarityMatrix, temperature: float) -> float:
    """Mean row-softmax probability mass landing on the matched pair."""
    s = sim.matrix.data / temperature
    e = np.exp(s - s.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    return float(np.mean(np.diag(probs)))


def row_softmax(sim: SimilarityMatrix, temperature: float) -> np.ndarray:
    """The row-softmaxed grid itself (what the similarity image shows)."""
    s = sim.matrix.data / temperature
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
