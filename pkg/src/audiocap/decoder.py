"""Transformer decoder over audio embeddings, caption losses, beam search.

Each block applies causally masked self-attention, cross-attention that
reads the per-sample audio embedding as a one-element memory sequence, and
a feed-forward layer.  Training uses label-smoothed cross entropy averaged
over non-pad positions; the combined objective blends it with the
contrastive loss through a single trade-off coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .data import END_ID, START_ID
from .layers import (Dropout, Embedding, FeedForward, LayerNorm, Linear,
                     Module, MultiHeadAttention, causal_mask,
                     sinusoidal_positions)
from .tensor import Tensor


class DecoderError(ValueError):
    """Invalid decoder configuration or inputs."""


@dataclass
class DecoderConfig:
    vocab_size: int
    model_dim: int = 32
    n_heads: int = 4
    n_blocks: int = 2
    max_len: int = 24
    dropout: float = 0.2
    label_smoothing: float = 0.1
    memory_len: int = 64          # length of the audio embedding it attends to

    def __post_init__(self):
        if self.n_blocks < 1:
            raise DecoderError("need at least one decoder block")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise DecoderError("label smoothing must lie in [0, 1)")
        if self.model_dim % self.n_heads != 0:
            raise DecoderError("model_dim must be divisible by n_heads")


@dataclass
class CaptionHypothesis:
    tokens: list[int]
    log_prob: float
    finished: bool = False

    def __post_init__(self):
        if self.log_prob > 0.0:
            raise DecoderError("cumulative log probability cannot be positive")


@dataclass
class LossWeights:
    alpha: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise DecoderError("alpha must lie in [0, 1]")


class DecoderBlock(Module):
    def __init__(self, dim: int, n_heads: int, memory_len: int, rng):
        self.ln_self = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, n_heads, rng)
        self.ln_cross = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, n_heads, rng, kv_dim=memory_len)
        self.ln_ff = LayerNorm(dim)
        self.ff = FeedForward(dim, 4 * dim, rng)

    def __call__(self, x, memory, mask, drop, rng, training):
        h = self.ln_self(x)
        x = x + drop(self.self_attn(h, h, mask), rng, training)
        x = x + drop(self.cross_attn(self.ln_cross(x), memory), rng, training)
        x = x + drop(self.ff(self.ln_ff(x)), rng, training)
        return x


class TransformerDecoder(Module):
    def __init__(self, config: DecoderConfig, rng: np.random.Generator):
        self.config = config
        self.embed = Embedding(config.vocab_size, config.model_dim, rng)
        self.blocks = [DecoderBlock(config.model_dim, config.n_heads,
                                    config.memory_len, rng)
                       for _ in range(config.n_blocks)]
        self.final_ln = LayerNorm(config.model_dim)
        self.out = Linear(config.model_dim, config.vocab_size, rng)
        self.drop = Dropout(config.dropout)
        self._positions = sinusoidal_positions(config.max_len, config.model_dim)

    def __call__(self, token_ids: np.ndarray, audio_rows: Tensor,
                 training: bool = False,
                 dropout_rng: np.random.Generator | None = None) -> Tensor:
        """Teacher-forced logits (b, m, vocab); position j sees tokens 0..j and audio."""
        ids = np.asarray(token_ids)
        if ids.ndim != 2:
            raise DecoderError("token batch must be (b, m)")
        b, m = ids.shape
        if m > self.config.max_len:
            raise DecoderError(f"sequence length {m} exceeds max_len {self.config.max_len}")
        if ids.max(initial=0) >= self.config.vocab_size or ids.min(initial=0) < 0:
            raise DecoderError("token id out of vocabulary range")
        if not (ids[:, 0] == START_ID).all():
            raise DecoderError("decoder rows must begin with the start symbol")
        if audio_rows.shape != (b, self.config.memory_len):
            raise DecoderError(
                f"audio memory must be (b, {self.config.memory_len}), got {audio_rows.shape}")
        x = self.embed(ids) + Tensor(
            np.broadcast_to(self._positions[None, :m], (b, m, self.config.model_dim)))
        memory = T.reshape(audio_rows, (b, 1, self.config.memory_len))
        mask = causal_mask(m)
        for block in self.blocks:
            x = block(x, memory, mask, self.drop, dropout_rng, training)
        return self.out(self.final_ln(x))


# -- losses -------------------------------------------------------------------


def caption_ce_loss(logits: Tensor, targets: np.ndarray, pad_mask: np.ndarray,
                    label_smoothing: float = 0.1) -> Tensor:
    """Mean over non-pad positions of label-smoothed cross entropy.

    Per position: (1-eps) * (-log p[target]) + eps * mean_v(-log p[v]).
    ``pad_mask`` holds 1.0 at real positions, 0.0 at padding.
    """
    targets = np.asarray(targets)
    pad_mask = np.asarray(pad_mask, dtype=np.float64)
    if logits.shape[:-1] != targets.shape or targets.shape != pad_mask.shape:
        raise DecoderError(
            f"shape mismatch: logits {logits.shape}, targets {targets.shape}, "
            f"mask {pad_mask.shape}")
    count = pad_mask.sum()
    if count == 0:
        raise DecoderError("all positions are padded")
    log_probs = T.log_softmax(logits, axis=-1)
    nll_target = -T.take_along_last(log_probs, targets)
    per_pos = (1.0 - label_smoothing) * nll_target
    if label_smoothing > 0.0:
        per_pos = per_pos + label_smoothing * -T.mean(log_probs, axis=-1)
    masked = per_pos * Tensor(pad_mask)
    return T.tensor_sum(masked) / Tensor(float(count))


def total_loss(contrastive: Tensor, caption: Tensor, weights: LossWeights) -> Tensor:
    """alpha-blend of the two objectives; exact affine combination."""
    return weights.alpha * contrastive + (1.0 - weights.alpha) * caption


# -- decoding ---------------------------------------------------------------------


def beam_search(step_fn: Callable[[np.ndarray], np.ndarray], beam_size: int = 3,
                max_len: int = 24) -> list[int]:
    """Length-synchronous beam search over token log-probabilities.

    ``step_fn`` maps an (n, m) matrix of hypothesis prefixes (each starting
    with the start symbol) to (n, vocab) log-probabilities for the next
    token.  Hypotheses finish on the end symbol or at max_len tokens; ties
    in total log-probability break toward the lexicographically smaller
    token sequence.  Returns the winner without start/end symbols.
    """
    if beam_size < 1:
        raise DecoderError("beam size must be at least 1")
    live = [CaptionHypothesis([START_ID], 0.0)]
    finished: list[CaptionHypothesis] = []
    while live:
        prefix = np.array([h.tokens for h in live])
        log_probs = step_fn(prefix)
        candidates: list[CaptionHypothesis] = []
        for hyp, row in zip(live, log_probs):
            for token in range(row.shape[0]):
                score = hyp.log_prob + float(row[token])
                tokens = hyp.tokens + [token]
                done = token == END_ID or len(tokens) >= max_len
                candidates.append(CaptionHypothesis(tokens, score, done))
        candidates.sort(key=lambda h: (-h.log_prob, h.tokens))
        live = []
        for cand in candidates:
            if len(live) >= beam_size:
                break  # candidates below the beam cut are abandoned
            if cand.finished:
                finished.append(cand)
            else:
                live.append(cand)
        finished.sort(key=lambda h: (-h.log_prob, h.tokens))
        finished = finished[:beam_size]
        if finished and live and finished[0].log_prob > live[0].log_prob:
            break  # scores only decrease; no live branch can beat it
    best = finished[0] if finished else max(live, key=lambda h: (h.log_prob, h.tokens))
    tokens = best.tokens[1:]
    if tokens and tokens[-1] == END_ID:
        tokens = tokens[:-1]
    return tokens


def greedy_decode(step_fn: Callable[[np.ndarray], np.ndarray],
                  max_len: int = 24) -> list[int]:
    """Argmax chain; the beam_size=1 reference behavior."""
    tokens = [START_ID]
    while len(tokens) < max_len:
        row = step_fn(np.array([tokens]))[0]
        token = int(row.argmax())
        tokens.append(token)
        if token == END_ID:
            break
    out = tokens[1:]
    if out and out[-1] == END_ID:
        out = out[:-1]
    return out
