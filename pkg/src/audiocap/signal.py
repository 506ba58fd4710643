"""Time-domain audio to log-power spectrogram front end.

The FFT is an iterative radix-2 decimation-in-time transform vectorized
over leading axes, so a whole batch of frames transforms in one call.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class SignalError(ValueError):
    """Invalid waveform or transform parameters."""


@dataclass
class Waveform:
    """Single-channel audio: finite samples at a positive sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise SignalError("waveform must be single-channel (1-d)")
        if not np.all(np.isfinite(self.samples)):
            raise SignalError("waveform contains NaN/Inf")
        if self.sample_rate <= 0:
            raise SignalError("sample rate must be positive")


@dataclass
class Spectrogram:
    """T x F grid of log-power values with the framing that produced it."""

    frames: np.ndarray
    frame_size: int
    hop: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=32)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.intp)
    for i in range(1, n):
        rev[i] = rev[i >> 1] >> 1 | ((i & 1) << (bits - 1))
    return rev


def fft(x) -> np.ndarray:
    """Radix-2 decimation-in-time FFT along the last axis (power-of-two length)."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if not _is_power_of_two(n):
        raise SignalError(f"fft length must be a power of two, got {n}")
    out = np.ascontiguousarray(x[..., _bit_reversal(n)])
    span = 2
    while span <= n:
        half = span // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / span)
        blocks = out.reshape(out.shape[:-1] + (n // span, span))
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * twiddle
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        span *= 2
    return out


def ifft(x) -> np.ndarray:
    """Inverse of :func:`fft` (same power-of-two length contract)."""
    x = np.asarray(x, dtype=np.complex128)
    return np.conj(fft(np.conj(x))) / x.shape[-1]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window of length n."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def log_power_spectrogram(waveform: Waveform, frame_size: int = 256,
                          hop: int = 128, floor_eps: float = 1e-10) -> Spectrogram:
    """Frame, Hann-window, FFT, and log the floored power of each frame.

    Frame count is floor((len - frame_size)/hop) + 1; the trailing partial
    frame is dropped.  Cells are log(max(|X|^2, floor_eps)) over the
    frame_size/2 + 1 non-negative frequency bins.
    """
    if not _is_power_of_two(frame_size):
        raise SignalError(f"frame_size must be a power of two, got {frame_size}")
    if hop <= 0 or hop > frame_size:
        raise SignalError("hop must satisfy 0 < hop <= frame_size")
    samples = waveform.samples
    if samples.size < frame_size:
        raise SignalError(
            f"waveform has {samples.size} samples, shorter than one frame ({frame_size})")
    n_frames = (samples.size - frame_size) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(samples, frame_size)[::hop][:n_frames]
    spectrum = fft(frames * hann_window(frame_size))
    n_bins = frame_size // 2 + 1
    power = np.abs(spectrum[:, :n_bins]) ** 2
    return Spectrogram(np.log(np.maximum(power, floor_eps)), frame_size, hop)
