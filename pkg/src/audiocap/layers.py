"""Neural building blocks shared by the encoder heads and the decoder.

Layers hold their parameters as graph tensors and expose them through
``named_params``; construction order fixes the parameter order, so a model
built from the same seed is bitwise reproducible.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Uniform fan-in scaling: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Base with recursive parameter/buffer discovery in attribute order."""

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((prefix + name, value))
            elif isinstance(value, Module):
                out.extend(value.named_params(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{prefix}{name}.{i}."))
        return out

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Module):
                out.extend(value.named_buffers(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_buffers(f"{prefix}{name}.{i}."))
        return out


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = uniform_init(rng, (in_dim, out_dim), in_dim)
        self.bias = uniform_init(rng, (out_dim,), in_dim)

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
        out = T.matmul(flat, self.weight)
        out = out + T.broadcast_to(T.reshape(self.bias, (1, -1)), out.shape)
        return T.reshape(out, lead + (out.shape[-1],)) if x.ndim != 2 else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        self.table = Tensor(rng.normal(0.0, 0.02, size=(vocab_size, dim)),
                            requires_grad=True)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.table, ids)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int, padding: int, rng: np.random.Generator):
        fan_in = in_channels * kernel * kernel
        self.weight = uniform_init(rng, (out_channels, in_channels, kernel, kernel), fan_in)
        self.bias = uniform_init(rng, (out_channels,), fan_in)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    """Per-channel normalization over (batch, height, width).

    Train mode normalizes with batch statistics and nudges the running
    stats (momentum 0.1); eval mode normalizes with the stored stats.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gain = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        return [(prefix + "running_mean", self.running_mean),
                (prefix + "running_var", self.running_var)]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm2d(x, self.gain, self.bias, self.running_mean,
                              self.running_var, self.momentum, self.eps, training)


class Dropout(Module):
    """Layer wrapper; a missing rng stream disables dropout entirely."""

    def __init__(self, rate: float):
        self.rate = rate

    def __call__(self, x: Tensor, rng, training: bool) -> Tensor:
        if rng is None or not training or self.rate == 0.0:
            return x
        return T.dropout(x, self.rate, rng, training)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate query and key/value sources."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator,
                 kv_dim: int | None = None):
        if dim % n_heads != 0:
            raise ValueError(f"model_dim {dim} not divisible by n_heads {n_heads}")
        kv_dim = dim if kv_dim is None else kv_dim
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(kv_dim, dim, rng)
        self.wv = Linear(kv_dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.n_heads = n_heads
        self.head_dim = dim // n_heads

    def _split(self, x: Tensor) -> Tensor:
        b, m, _ = x.shape
        return T.transpose(T.reshape(x, (b, m, self.n_heads, self.head_dim)),
                           (0, 2, 1, 3))

    def __call__(self, query: Tensor, memory: Tensor,
                 additive_mask: np.ndarray | None = None) -> Tensor:
        b, mq, _ = query.shape
        q = self._split(self.wq(query))
        k = self._split(self.wk(memory))
        v = self._split(self.wv(memory))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.head_dim))
        if additive_mask is not None:
            mask = Tensor(np.broadcast_to(additive_mask, scores.shape))
            scores = scores + mask
        weights = T.softmax(scores, axis=-1)
        ctx = T.matmul(weights, v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, mq, self.n_heads * self.head_dim))
        return self.wo(merged)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.lift = Linear(dim, hidden, rng)
        self.lower = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lower(T.relu(self.lift(x)))


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table of shape (length, dim)."""
    pos = np.arange(length)[:, None]
    idx = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (idx // 2)) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def causal_mask(m: int) -> np.ndarray:
    """(1, 1, m, m) additive mask hiding future key positions."""
    mask = np.triu(np.full((m, m), -1e9), k=1)
    return mask[None, None, :, :]


def pad_key_mask(ids: np.ndarray, pad_id: int) -> np.ndarray:
    """(b, 1, 1, m) additive mask hiding pad key positions."""
    blocked = np.where(ids == pad_id, -1e9, 0.0)
    return blocked[:, None, None, :]
