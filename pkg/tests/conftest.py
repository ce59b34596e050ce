import asyncio
import sys

import pytest
from intent_sieve.corpus import synthetic_speech_corpus, synthetic_text_corpus
from intent_sieve.dsp import FeatureConfig
from intent_sieve.layers import RngSeed
from intent_sieve.models import ModelConfig
from intent_sieve.textenc import CharIndex, TextEncoder

TEXT_LEN = 12


@pytest.fixture()
def event_loop():
    """Fixture of @pytest.mark.asyncio()."""
    if sys.platform == "win32":
        asyncio.set_event_loop_policy(asyncio.WindowsProactorEventLoopPolicy())
    loop = asyncio.new_event_loop()
    yield loop
    loop.close()


@pytest.fixture()
def small_features() -> FeatureConfig:
    """8 kHz features of shape (32, 16) for 0.5 s utterances."""
    return FeatureConfig(n_fft=256, hop=128, n_mels=15, tail_frames=32, sample_rate_hz=8000)


@pytest.fixture()
def text_corpus():
    return synthetic_text_corpus(50, RngSeed(1))


@pytest.fixture()
def speech_corpus():
    return synthetic_speech_corpus(24, RngSeed(2))


@pytest.fixture()
def char_index(text_corpus, speech_corpus) -> CharIndex:
    return CharIndex.build([e.text for e in (*text_corpus, *speech_corpus)])


@pytest.fixture()
def text_encoder(char_index) -> TextEncoder:
    return TextEncoder(max_chars=TEXT_LEN, index=char_index)


@pytest.fixture()
def small_config(char_index, small_features) -> ModelConfig:
    frames, bins = small_features.feature_shape
    return ModelConfig(
        mlp_hidden=64,
        dropout=0.0,
        fusion_proj_dim=16,
        text_len=TEXT_LEN,
        text_dim=8,
        audio_frames=frames,
        audio_bins=bins,
        lstm_hidden=8,
        context_dim=8,
        vocab_size=len(char_index),
    )
