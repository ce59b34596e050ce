from unittest.mock import Mock, call

import numpy as np
import pytest
from intent_sieve.corpus import split, synthetic_speech_corpus
from intent_sieve.errors import InvalidConfig, InvalidInput, TrainingDiverged
from intent_sieve.labels import IntentLabel7
from intent_sieve.layers import RngSeed
from intent_sieve.models import ModelKind, build_fci, build_model, build_three_a
from intent_sieve.train import (
    Dataset,
    TrainConfig,
    _batches,
    predict_proba,
    speech_dataset,
    text_dataset,
    train_model,
)

OVERFIT = TrainConfig(epochs=200, batch_size=16, lr=0.0005, target_accuracy=1.0)


def test_batches_merge_trailing_singleton():
    sizes = [len(b) for b in _batches(np.arange(33), 16)]
    assert sizes == [16, 17]
    assert [len(b) for b in _batches(np.arange(34), 16)] == [16, 16, 2]
    assert [len(b) for b in _batches(np.arange(1), 16)] == [1]


@pytest.mark.parametrize(
    "kwargs",
    [{"epochs": 0}, {"batch_size": 0}, {"lr": 0.0}, {"train_ratio": 1.0}],
)
def test_invalid_train_config(kwargs):
    with pytest.raises(InvalidConfig):
        TrainConfig(**kwargs)


def test_text_dataset(text_corpus, text_encoder):
    data = text_dataset(text_corpus, text_encoder)
    assert len(data) == 50
    assert data.text.shape == (50, 12)
    assert data.audio is None
    assert data.labels[:7].tolist() == list(range(7))


def test_speech_dataset_skips_modalities(speech_corpus, text_encoder, small_features):
    data = speech_dataset(speech_corpus, None, small_features)
    assert data.text is None
    assert data.audio.shape == (24, *small_features.feature_shape)
    assert data.labels[:6].tolist() == list(range(6))
    assert speech_dataset(speech_corpus, text_encoder, None).audio is None


def test_empty_training_set(small_config):
    with pytest.raises(InvalidInput, match="empty"):
        train_model(build_fci(small_config), Dataset(labels=np.zeros(0, dtype=np.int64)))


def test_missing_class(text_corpus, text_encoder, small_config):
    examples = [e for e in text_corpus if e.label is not IntentLabel7.COMMAND]
    with pytest.raises(InvalidInput, match="No training examples for C"):
        train_model(build_fci(small_config), text_dataset(examples, text_encoder))


def test_short_run_history(text_corpus, text_encoder, small_config):
    train, validation = split(text_corpus)
    callback = Mock()
    result = train_model(
        build_fci(small_config),
        text_dataset(train, text_encoder),
        text_dataset(validation, text_encoder),
        TrainConfig(epochs=3, batch_size=8),
        progress_callback=callback,
    )
    assert [log.epoch for log in result.history] == [1, 2, 3]
    assert all(np.isfinite(log.loss) for log in result.history)
    assert all(log.val_accuracy is not None for log in result.history)
    assert callback.call_args_list[0] == call(done=0, total=3)
    assert callback.call_args_list[-1] == call(done=3, total=3)
    assert result.class_weights.shape == (7,)


def test_training_reduces_loss(text_corpus, text_encoder, small_config):
    result = train_model(
        build_fci(small_config),
        text_dataset(text_corpus, text_encoder),
        cfg=TrainConfig(epochs=15, batch_size=10, lr=0.01),
    )
    assert result.history[-1].loss < result.history[0].loss
    assert result.history[-1].val_accuracy is None


def test_diverging_loss_raises(text_corpus, text_encoder, small_config):
    model = build_fci(small_config)
    model.head.output.weight.data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train_model(model, text_dataset(text_corpus, text_encoder), cfg=TrainConfig(epochs=1))


def test_fixed_seed_is_reproducible(text_corpus, text_encoder, small_config):
    def run():
        model = build_fci(small_config, RngSeed(5))
        train_model(
            model,
            text_dataset(text_corpus, text_encoder),
            cfg=TrainConfig(epochs=2, batch_size=8),
            seed=RngSeed(5),
        )
        return model.state_dict()

    first, second = run(), run()
    assert all(np.array_equal(first[k], second[k]) for k in first)


def test_three_a_training_step(speech_corpus, text_encoder, small_config, small_features):
    data = speech_dataset(speech_corpus, text_encoder, small_features)
    model = build_three_a(small_config)
    result = train_model(model, data, cfg=TrainConfig(epochs=2, batch_size=6))
    assert len(result.history) == 2
    probs = predict_proba(model, data, batch_size=5)
    assert probs.shape == (24, 6)
    assert np.allclose(probs.sum(axis=1), 1.0)


def test_only_speech_baseline_trains(speech_corpus, small_config, small_features):
    data = speech_dataset(speech_corpus, None, small_features)
    model = build_model(ModelKind.ONLY_SPEECH, small_config)
    result = train_model(model, data, cfg=TrainConfig(epochs=1, batch_size=8))
    assert np.isfinite(result.history[0].loss)


@pytest.mark.slow()
def test_fci_overfits_tiny_corpus(text_corpus, text_encoder, small_config):
    data = text_dataset(text_corpus, text_encoder)
    model = build_fci(small_config)
    result = train_model(model, data, cfg=OVERFIT)
    assert result.history[-1].train_accuracy == 1.0
    assert len(result.history) <= 200


@pytest.mark.slow()
def test_three_a_overfits_tiny_corpus(small_config, small_features, text_encoder):
    examples = synthetic_speech_corpus(50, RngSeed(3))
    data = speech_dataset(examples, text_encoder, small_features)
    model = build_three_a(small_config)
    result = train_model(model, data, cfg=OVERFIT)
    assert result.history[-1].train_accuracy == 1.0
    assert len(result.history) <= 200


def test_six_way_text_dataset(text_corpus, text_encoder):
    kept = [e for e in text_corpus if e.label is not IntentLabel7.INTONATION_DEPENDENT]
    data = text_dataset(kept, text_encoder, six_way=True)
    assert data.labels.tolist() == [int(e.label) for e in kept]
    assert data.labels.max() == 5
    with pytest.raises(InvalidInput, match="no six-way label"):
        text_dataset(text_corpus, text_encoder, six_way=True)
