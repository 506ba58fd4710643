"""Dual-head encoder: spectrogram and caption inputs to length-L embeddings.

The audio head is a 7x7 conv stem plus a stack of dual-path blocks whose
two convolutional paths are multiplied elementwise, followed by a masked
average pool and a linear map to the embedding length.  The text head is a
small pre-norm transformer with a trailing normalization layer, masked mean
pooling, and the matching linear map.  Both heads count their forward calls
so inference paths can prove the text head stays cold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import PAD_ID
from .layers import (BatchNorm2d, Conv2d, Dropout, Embedding, FeedForward,
                     LayerNorm, Linear, Module, MultiHeadAttention,
                     pad_key_mask, sinusoidal_positions)
from .signal import Spectrogram
from .tensor import Tensor


class EncoderError(ValueError):
    """Invalid encoder configuration or batch."""


@dataclass
class AudioHeadConfig:
    conv_channels: tuple[int, ...] = (8, 16, 32)   # stem, then one per block
    n_dual_path_blocks: int = 2
    embed_len: int = 64
    dropout: float = 0.2

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        if self.embed_len < 8:
            raise EncoderError("embed_len must be at least 8")
        if self.n_dual_path_blocks < 1:
            raise EncoderError("need at least one dual-path block")
        if len(self.conv_channels) != self.n_dual_path_blocks + 1:
            raise EncoderError("conv_channels must list the stem plus one entry per block")


@dataclass
class TextHeadConfig:
    vocab_size: int
    model_dim: int = 32
    n_layers: int = 2
    n_heads: int = 4
    embed_len: int = 64
    dropout: float = 0.2
    max_len: int = 48

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise EncoderError("model_dim must be divisible by n_heads")
        if self.n_layers < 1:
            raise EncoderError("need at least one attention layer")


@dataclass
class EmbeddingBatch:
    rows: Tensor          # (b, L)
    modality: str         # "audio" | "text"

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise EncoderError("embedding batch must be a non-empty (b, L) matrix")


class BottleneckPath(Module):
    """1x1 reduce, 3x3 stride-2, 1x1 expand, each with batch norm."""

    def __init__(self, in_c: int, out_c: int, rng):
        mid = max(out_c // 2, 1)
        self.reduce = Conv2d(in_c, mid, 1, 1, 0, rng)
        self.bn1 = BatchNorm2d(mid)
        self.conv = Conv2d(mid, mid, 3, 2, 1, rng)
        self.bn2 = BatchNorm2d(mid)
        self.expand = Conv2d(mid, out_c, 1, 1, 0, rng)
        self.bn3 = BatchNorm2d(out_c)

    def __call__(self, x, training):
        h = T.relu(self.bn1(self.reduce(x), training))
        h = T.relu(self.bn2(self.conv(h), training))
        return self.bn3(self.expand(h), training)


class PoolConvPath(Module):
    """Max pool, 3x3 conv, 1x1 conv, batch norm."""

    def __init__(self, in_c: int, out_c: int, rng):
        self.conv3 = Conv2d(in_c, out_c, 3, 1, 1, rng)
        self.conv1 = Conv2d(out_c, out_c, 1, 1, 0, rng)
        self.bn = BatchNorm2d(out_c)

    def __call__(self, x, training):
        h = T.max_pool2d(x, 3, 2, 1)
        return self.bn(self.conv1(self.conv3(h)), training)


class DualPathBlock(Module):
    """Two stride-2 paths over the same input, multiplied elementwise."""

    def __init__(self, in_c: int, out_c: int, rng):
        self.path1 = BottleneckPath(in_c, out_c, rng)
        self.path2 = PoolConvPath(in_c, out_c, rng)

    def __call__(self, x, training):
        return self.path1(x, training) * self.path2(x, training)


class AudioHead(Module):
    def __init__(self, config: AudioHeadConfig, rng: np.random.Generator):
        self.config = config
        channels = config.conv_channels
        self.stem = Conv2d(1, channels[0], 7, 2, 3, rng)
        self.stem_bn = BatchNorm2d(channels[0])
        self.blocks = [DualPathBlock(channels[i], channels[i + 1], rng)
                       for i in range(config.n_dual_path_blocks)]
        self.drop = Dropout(config.dropout)
        self.proj = Linear(channels[-1], config.embed_len, rng)
        self.forward_calls = 0

    def __call__(self, specs: list[Spectrogram], training: bool = False,
                 dropout_rng: np.random.Generator | None = None) -> EmbeddingBatch:
        self.forward_calls += 1
        if not specs:
            raise EncoderError("audio head needs a non-empty batch")
        if any(s.n_frames == 0 for s in specs):
            raise EncoderError("zero-frame spectrogram in batch")
        n_bins = specs[0].n_bins
        if any(s.n_bins != n_bins for s in specs):
            raise EncoderError("spectrograms in a batch must share the bin count")
        lengths = np.array([s.n_frames for s in specs])
        max_t = int(lengths.max())
        batch = np.zeros((len(specs), 1, max_t, n_bins))
        for i, s in enumerate(specs):
            batch[i, 0, :s.n_frames] = s.frames
        x = self.stem_bn(self.stem(Tensor(batch)), training)
        x = T.relu(x)
        valid = (lengths + 1) // 2                    # stem stride 2
        for block in self.blocks:
            x = block(x, training)
            valid = (valid + 1) // 2
        b, c, t_out, f_out = x.shape
        mask = np.zeros((b, 1, t_out, f_out))
        for i, v in enumerate(valid):
            mask[i, :, :max(int(v), 1)] = 1.0
        counts = mask.sum(axis=(1, 2, 3), keepdims=False).reshape(b, 1)
        pooled = T.tensor_sum(x * Tensor(np.broadcast_to(mask, x.shape)),
                              axis=(2, 3))
        pooled = pooled / Tensor(np.broadcast_to(counts, (b, c)))
        pooled = self.drop(pooled, dropout_rng, training)
        return EmbeddingBatch(self.proj(pooled), "audio")


class TextBlock(Module):
    """Pre-norm self-attention block with feed-forward."""

    def __init__(self, dim: int, n_heads: int, rng):
        self.ln_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, rng)
        self.ln_ff = LayerNorm(dim)
        self.ff = FeedForward(dim, 4 * dim, rng)

    def __call__(self, x, key_mask, drop, rng, training):
        h = self.ln_attn(x)
        x = x + drop(self.attn(h, h, key_mask), rng, training)
        x = x + drop(self.ff(self.ln_ff(x)), rng, training)
        return x


class TextHead(Module):
    def __init__(self, config: TextHeadConfig, rng: np.random.Generator):
        self.config = config
        self.embed = Embedding(config.vocab_size, config.model_dim, rng)
        self.blocks = [TextBlock(config.model_dim, config.n_heads, rng)
                       for _ in range(config.n_layers)]
        self.final_ln = LayerNorm(config.model_dim)
        self.drop = Dropout(config.dropout)
        self.proj = Linear(config.model_dim, config.embed_len, rng)
        self._positions = sinusoidal_positions(config.max_len, config.model_dim)
        self.forward_calls = 0

    def __call__(self, token_ids: np.ndarray, training: bool = False,
                 dropout_rng: np.random.Generator | None = None) -> EmbeddingBatch:
        self.forward_calls += 1
        ids = np.asarray(token_ids)
        if ids.ndim != 2:
            raise EncoderError("token batch must be (b, m)")
        if ids.max(initial=0) >= self.config.vocab_size or ids.min(initial=0) < 0:
            raise EncoderError("token id out of vocabulary range")
        if (ids == PAD_ID).all(axis=1).any():
            raise EncoderError("all-pad caption row")
        b, m = ids.shape
        if m > self._positions.shape[0]:
            raise EncoderError(f"caption length {m} exceeds position table")
        x = self.embed(ids) + Tensor(
            np.broadcast_to(self._positions[None, :m], (b, m, self.config.model_dim)))
        key_mask = pad_key_mask(ids, PAD_ID)
        for block in self.blocks:
            x = block(x, key_mask, self.drop, dropout_rng, training)
        x = self.final_ln(x)
        keep = (ids != PAD_ID).astype(np.float64)
        counts = keep.sum(axis=1).reshape(b, 1)
        weights = keep[:, :, None]
        pooled = T.tensor_sum(x * Tensor(np.broadcast_to(weights, x.shape)), axis=1)
        pooled = pooled / Tensor(np.broadcast_to(counts, pooled.shape))
        pooled = self.drop(pooled, dropout_rng, training)
        return EmbeddingBatch(self.proj(pooled), "text")


class DualHeadEncoder(Module):
    """Audio and text heads sharing the embedding length, with a freeze switch."""

    def __init__(self, audio_cfg: AudioHeadConfig, text_cfg: TextHeadConfig,
                 rng: np.random.Generator):
        if audio_cfg.embed_len != text_cfg.embed_len:
            raise EncoderError("audio and text heads must share embed_len")
        self.audio_head = AudioHead(audio_cfg, rng)
        self.text_head = TextHead(text_cfg, rng)
        self._frozen = False

    def set_frozen(self, flag: bool) -> None:
        """Exclude encoder parameters from optimizer updates; grads still flow."""
        self._frozen = bool(flag)

    @property
    def frozen(self) -> bool:
        return self._frozen
