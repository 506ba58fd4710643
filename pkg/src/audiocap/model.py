"""The full captioning model: dual-head encoder + audio-conditioned decoder.

Inference runs spectrogram -> audio head -> beam search -> detokenize and
never touches the text head (its call counter proves it in tests).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .contrastive import ContrastiveConfig
from .data import Vocabulary
from .decoder import DecoderConfig, TransformerDecoder, beam_search
from .encoder import (AudioHeadConfig, DualHeadEncoder, EmbeddingBatch,
                      TextHeadConfig)
from .layers import Module
from .signal import Spectrogram, Waveform, log_power_spectrogram
from .tensor import Tensor


@dataclass
class ModelConfig:
    audio: AudioHeadConfig
    text: TextHeadConfig
    decoder: DecoderConfig
    contrastive: ContrastiveConfig
    frame_size: int = 256
    hop: int = 128

    @classmethod
    def desk_default(cls, vocab_size: int, embed_len: int = 64) -> "ModelConfig":
        return cls(
            audio=AudioHeadConfig(embed_len=embed_len),
            text=TextHeadConfig(vocab_size=vocab_size, embed_len=embed_len),
            decoder=DecoderConfig(vocab_size=vocab_size, memory_len=embed_len),
            contrastive=ContrastiveConfig(),
        )


class CaptionModel(Module):
    """Owns both encoder heads, the decoder, and the (optional) temperature."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 0):
        if config.decoder.memory_len != config.audio.embed_len:
            raise ValueError("decoder memory_len must equal the audio embed_len")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
        self.config = config
        self.vocab = vocab
        self.encoder = DualHeadEncoder(config.audio, config.text, rng)
        self.decoder = TransformerDecoder(config.decoder, rng)
        if config.contrastive.learnable_temperature:
            self.log_temperature = Tensor(
                np.array(math.log(config.contrastive.temperature)), requires_grad=True)
        else:
            self.log_temperature = None

    # -- parameter groups ------------------------------------------------------

    def encoder_named_params(self):
        out = self.encoder.named_params("encoder.")
        if self.log_temperature is not None:
            out.append(("log_temperature", self.log_temperature))
        return out

    def decoder_named_params(self):
        return self.decoder.named_params("decoder.")

    def named_params(self, prefix: str = ""):
        return [(prefix + n, p)
                for n, p in self.encoder_named_params() + self.decoder_named_params()]

    def named_buffers(self, prefix: str = ""):
        return self.encoder.named_buffers(prefix + "encoder.")

    def set_frozen(self, flag: bool) -> None:
        self.encoder.set_frozen(flag)

    @property
    def encoder_frozen(self) -> bool:
        return self.encoder.frozen

    # -- forward paths ------------------------------------------------------------

    def spectrogram(self, samples: np.ndarray) -> Spectrogram:
        wave = samples if isinstance(samples, Waveform) else Waveform(samples, 8000)
        return log_power_spectrogram(wave, self.config.frame_size, self.config.hop)

    def encode_audio(self, specs: list[Spectrogram], training: bool = False,
                     dropout_rng=None) -> EmbeddingBatch:
        return self.encoder.audio_head(specs, training, dropout_rng)

    def encode_text(self, token_ids: np.ndarray, training: bool = False,
                    dropout_rng=None) -> EmbeddingBatch:
        return self.encoder.text_head(token_ids, training, dropout_rng)

    def decode(self, token_ids: np.ndarray, audio: EmbeddingBatch,
               training: bool = False, dropout_rng=None) -> Tensor:
        return self.decoder(token_ids, audio.rows, training, dropout_rng)

    # -- inference -------------------------------------------------------------------

    def caption_tokens(self, audio_row: np.ndarray, beam_size: int = 3,
                       max_len: int | None = None) -> list[int]:
        """Beam-search token ids for one already-encoded audio embedding."""
        max_len = max_len or self.config.decoder.max_len
        row = Tensor(np.asarray(audio_row).reshape(1, -1))

        def step(prefixes: np.ndarray) -> np.ndarray:
            n = prefixes.shape[0]
            with T.no_grad():
                rows = Tensor(np.repeat(row.data, n, axis=0))
                logits = self.decoder(prefixes, rows, training=False)
                last = T.log_softmax(logits, axis=-1).data[:, -1, :]
            return last

        return beam_search(step, beam_size=beam_size, max_len=max_len)

    def infer(self, samples, beam_size: int = 3) -> str:
        """Waveform to caption; uses only the audio head and the decoder."""
        spec = self.spectrogram(samples)
        with T.no_grad():
            audio = self.encode_audio([spec], training=False)
        tokens = self.caption_tokens(audio.rows.data[0], beam_size=beam_size)
        return self.vocab.decode(tokens)
