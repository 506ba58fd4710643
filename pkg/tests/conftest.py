import numpy as np
import pytest

from audiocap.contrastive import ContrastiveConfig
from audiocap.data import Vocabulary
from audiocap.decoder import DecoderConfig
from audiocap.encoder import AudioHeadConfig, TextHeadConfig
from audiocap.model import CaptionModel, ModelConfig
from audiocap.signal import Waveform, log_power_spectrogram


TINY_WORDS = ["tone", "low", "high", "beeps", "noise", "two", "a", "the"]


def tiny_vocab() -> Vocabulary:
    return Vocabulary(TINY_WORDS)


def tiny_model_config(vocab_size: int, embed_len: int = 8) -> ModelConfig:
    return ModelConfig(
        audio=AudioHeadConfig(conv_channels=(2, 4), n_dual_path_blocks=1,
                              embed_len=embed_len, dropout=0.0),
        text=TextHeadConfig(vocab_size=vocab_size, model_dim=8, n_layers=1,
                            n_heads=2, embed_len=embed_len, dropout=0.0, max_len=16),
        decoder=DecoderConfig(vocab_size=vocab_size, model_dim=8, n_heads=2,
                              n_blocks=1, max_len=12, dropout=0.0,
                              memory_len=embed_len),
        contrastive=ContrastiveConfig(),
        frame_size=64,
        hop=32,
    )


def tiny_spectrogram(seed: int, n_samples: int = 600):
    rng = np.random.default_rng(seed)
    wave = Waveform(rng.normal(scale=0.2, size=n_samples), 8000)
    return log_power_spectrogram(wave, frame_size=64, hop=32)


@pytest.fixture
def vocab():
    return tiny_vocab()


@pytest.fixture
def tiny_model(vocab):
    return CaptionModel(tiny_model_config(len(vocab)), vocab, seed=3)
