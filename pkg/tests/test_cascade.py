import time
from dataclasses import replace
from unittest.mock import Mock, call, patch

import numpy as np
import pytest
from intent_sieve.cascade import (
    Cascade,
    CostReport,
    FallbackPolicy,
    Route,
    RoutedPrediction,
    StageCosts,
    Utterance,
    fallback_policy,
    route_batch,
    route_batch_parallel,
    utterances,
)
from intent_sieve.corpus import synthetic_speech_corpus
from intent_sieve.dsp import FeatureConfig, extract_feature
from intent_sieve.errors import AudioRequired, InvalidConfig, InvalidInput
from intent_sieve.labels import IntentLabel6, IntentLabel7
from intent_sieve.layers import RngSeed
from intent_sieve.models import build_fci, build_model, build_three_a

IU = int(IntentLabel7.INTONATION_DEPENDENT)


def sieve_probs(top: int, value: float = 0.9) -> np.ndarray:
    probs = np.full(7, (1 - value) / 6)
    probs[top] = value
    return probs


@pytest.fixture()
def cascade(small_config, small_features, text_encoder) -> Cascade:
    cfg = replace(small_config, zero_init_head=True)
    return Cascade(
        fci=build_fci(cfg),
        three_a=build_three_a(cfg),
        fci_encoder=text_encoder,
        three_a_encoder=text_encoder,
        feature_config=small_features,
    )


def force_sieve(cascade: Cascade, label: IntentLabel7):
    cascade.fci.head.output.bias.data[int(label)] = 5.0


@pytest.fixture()
def items(speech_corpus):
    return utterances(speech_corpus)


@pytest.mark.parametrize(
    ("probs", "expected"),
    [
        ([0.0, 0.05, 0.3, 0.05, 0.0, 0.0, 0.6], IntentLabel6.QUESTION),
        ([0.1, 0.3, 0.3, 0.0, 0.0, 0.0, 0.3], IntentLabel6.STATEMENT),
        ([0.0, 0.0, 0.0, 0.0, 0.0, 0.2, 0.8], IntentLabel6.RHETORICAL_COMMAND),
    ],
)
def test_fallback_second_best(probs, expected):
    assert fallback_policy(np.array(probs), FallbackPolicy.SECOND_BEST) is expected


def test_fallback_error():
    probs = sieve_probs(IU)
    with pytest.raises(AudioRequired) as e:
        fallback_policy(probs, FallbackPolicy.ERROR)
    assert np.array_equal(e.value.fci_probs, probs)


def test_clear_cut_utterance_stays_text_only(cascade, items):
    force_sieve(cascade, IntentLabel7.QUESTION)
    with patch("intent_sieve.cascade.extract_feature", wraps=extract_feature) as extract:
        prediction = cascade.route(items[0].text, items[0].audio)
    assert prediction.label is IntentLabel6.QUESTION
    assert prediction.route is Route.TEXT_ONLY
    assert prediction.three_a_probs is None
    assert prediction.costs.audio_ns == 0
    assert prediction.costs.text_ns > 0
    extract.assert_not_called()


def test_fragment_maps_to_fragment(cascade):
    force_sieve(cascade, IntentLabel7.FRAGMENT)
    assert cascade.route("가나").label is IntentLabel6.FRAGMENT


def test_iu_goes_to_audio_stage(cascade, items):
    force_sieve(cascade, IntentLabel7.INTONATION_DEPENDENT)
    cascade.three_a.head.output.bias.data[int(IntentLabel6.COMMAND)] = 5.0
    with patch("intent_sieve.cascade.extract_feature", wraps=extract_feature) as extract:
        prediction = cascade.route(items[0].text, items[0].audio)
    assert prediction.route is Route.AUDIO_AIDED
    assert prediction.label is IntentLabel6.COMMAND
    assert prediction.three_a_probs.shape == (6,)
    assert prediction.costs.audio_ns > 0
    assert extract.call_count == 1


def test_iu_without_audio(cascade):
    force_sieve(cascade, IntentLabel7.INTONATION_DEPENDENT)
    with pytest.raises(AudioRequired) as e:
        cascade.route("가나어")
    assert int(np.argmax(e.value.fci_probs)) == IU


def test_iu_without_audio_second_best(cascade):
    force_sieve(cascade, IntentLabel7.INTONATION_DEPENDENT)
    cascade.fci.head.output.bias.data[int(IntentLabel7.RHETORICAL_QUESTION)] = 2.0
    prediction = replace(cascade, policy=FallbackPolicy.SECOND_BEST).route("가나어")
    assert prediction.label is IntentLabel6.RHETORICAL_QUESTION
    assert prediction.route is Route.TEXT_ONLY
    assert prediction.fallback
    assert prediction.to_dict()["fallback"] is True


def test_iu_with_unreadable_audio(cascade, tmp_path):
    force_sieve(cascade, IntentLabel7.INTONATION_DEPENDENT)
    path = tmp_path / "broken.wav"
    path.write_bytes(b"not a wav file")
    with pytest.raises(InvalidInput, match="Unreadable WAV file"):
        cascade.route("가나어", path)


def test_margin_sends_uncertain_utterances_to_audio(cascade, items):
    # zero head gives a uniform sieve: the top two are tied
    margin_cascade = replace(cascade, margin=0.1)
    assert margin_cascade.route(items[0].text, items[0].audio).route is Route.AUDIO_AIDED
    assert margin_cascade.route(items[0].text).route is Route.TEXT_ONLY
    assert cascade.route(items[0].text, items[0].audio).route is Route.TEXT_ONLY


def test_route_multimodal_skips_sieve(cascade, items):
    with patch("intent_sieve.cascade.fci_forward") as sieve:
        prediction = cascade.route_multimodal(items[0].text, items[0].audio)
    sieve.assert_not_called()
    assert prediction.route is Route.AUDIO_AIDED
    assert prediction.fci_probs is None
    assert prediction.costs.text_ns == 0
    with pytest.raises(AudioRequired, match="needs audio"):
        cascade.route_multimodal(items[0].text, None)


def test_text_only_second_stage(small_config, small_features, text_encoder, items):
    cfg = replace(small_config, zero_init_head=True)
    cascade = Cascade(
        fci=build_fci(cfg),
        three_a=build_model("only-text6", cfg),
        fci_encoder=text_encoder,
        three_a_encoder=text_encoder,
        feature_config=FeatureConfig(),
    )
    force_sieve(cascade, IntentLabel7.INTONATION_DEPENDENT)
    with patch("intent_sieve.cascade.extract_feature") as extract:
        prediction = cascade.route(items[0].text, items[0].audio)
    extract.assert_not_called()
    assert prediction.route is Route.AUDIO_AIDED


def test_invalid_cascades(cascade, small_config, text_encoder):
    with pytest.raises(InvalidConfig, match="Sieve must be a seven-way text model"):
        replace(cascade, fci=cascade.three_a)
    with pytest.raises(InvalidConfig, match="six-way"):
        replace(cascade, three_a=build_fci(small_config))
    with pytest.raises(InvalidConfig, match="don't fit"):
        replace(cascade, feature_config=FeatureConfig())
    with pytest.raises(InvalidConfig, match="needs a text encoder"):
        replace(cascade, three_a_encoder=None)
    with pytest.raises(InvalidConfig, match="margin"):
        replace(cascade, margin=1.5)


def test_routed_prediction_to_dict(cascade):
    force_sieve(cascade, IntentLabel7.RHETORICAL_COMMAND)
    data = cascade.route("가나지").to_dict()
    assert data["label"] == "rhetorical_command"
    assert data["route"] == "text-only"
    assert len(data["fci_probs"]) == 7
    assert data["three_a_probs"] is None
    assert data["audio_ns"] == 0
    assert data["fallback"] is False


def test_no_iu_means_no_audio_cost(cascade, items):
    force_sieve(cascade, IntentLabel7.STATEMENT)
    with patch("intent_sieve.cascade.extract_feature", wraps=extract_feature) as extract:
        result = route_batch(cascade, items)
    extract.assert_not_called()
    assert result.report == CostReport(
        n_total=24,
        n_text_only=24,
        n_audio_aided=0,
        text_ns=result.report.text_ns,
        audio_ns=0,
    )


@pytest.mark.parametrize("n_iu", [0, 1, 5, 24])
def test_audio_cost_follows_iu_count(cascade, items, n_iu):
    iu_texts = {item.text for item in items[:n_iu]}
    real_sieve = Cascade.sieve

    def sieve(self, text):
        real_sieve(self, text)
        return sieve_probs(IU if text in iu_texts else int(IntentLabel7.STATEMENT))

    with patch.object(Cascade, "sieve", new=sieve), patch(
        "intent_sieve.cascade.extract_feature", wraps=extract_feature
    ) as extract:
        result = route_batch(cascade, items)
    n_routed = sum(item.text in iu_texts for item in items)
    assert extract.call_count == n_routed
    assert result.report.n_audio_aided == n_routed
    assert result.report.n_text_only == 24 - n_routed
    assert (result.report.audio_ns > 0) == (n_routed > 0)


def test_route_batch_continues_after_errors(cascade, items):
    force_sieve(cascade, IntentLabel7.INTONATION_DEPENDENT)
    batch = [items[0], Utterance("가나어"), items[1]]
    callback = Mock()
    result = route_batch(cascade, batch, progress_callback=callback)
    assert result.predictions[0] is not None
    assert result.predictions[1] is None
    assert result.predictions[2] is not None
    assert [i for i, _ in result.errors] == [1]
    assert isinstance(result.errors[0][1], AudioRequired)
    assert result.report.n_total == 3
    assert result.report.n_audio_aided == 2
    assert callback.call_args_list == [call(done=i, total=3) for i in range(4)]


def test_route_batch_always_audio(cascade, items):
    force_sieve(cascade, IntentLabel7.STATEMENT)
    result = route_batch(cascade, items[:4], always_audio=True)
    assert all(p.route is Route.AUDIO_AIDED and p.fci_probs is None for p in result.predictions)
    assert result.report.text_ns == 0


@pytest.mark.asyncio()
async def test_route_batch_parallel_keeps_order(cascade, items):
    force_sieve(cascade, IntentLabel7.INTONATION_DEPENDENT)
    batch = [*items[:6], Utterance("가나어"), *items[6:10]]
    sequential = route_batch(cascade, batch)
    callback = Mock()
    parallel = await route_batch_parallel(
        cascade, batch, max_workers=4, progress_callback=callback
    )
    assert [p and p.label for p in parallel.predictions] == [
        p and p.label for p in sequential.predictions
    ]
    for a, b in zip(parallel.predictions, sequential.predictions):
        if a is not None:
            assert np.allclose(a.three_a_probs, b.three_a_probs)
    assert [i for i, _ in parallel.errors] == [6]
    assert callback.call_args_list[-1] == call(done=11, total=11)


def test_routed_prediction_consistency():
    with pytest.raises(InvalidInput, match="Text-only predictions"):
        RoutedPrediction(
            label=IntentLabel6.STATEMENT,
            route=Route.TEXT_ONLY,
            fci_probs=sieve_probs(1),
            costs=StageCosts(text_ns=1, audio_ns=5),
        )
    with pytest.raises(InvalidInput, match="Text-only predictions"):
        RoutedPrediction(
            label=IntentLabel6.STATEMENT,
            route=Route.TEXT_ONLY,
            fci_probs=sieve_probs(1),
            three_a_probs=np.full(6, 1 / 6),
        )
    with pytest.raises(InvalidInput, match="need the multimodal probabilities"):
        RoutedPrediction(
            label=IntentLabel6.STATEMENT, route=Route.AUDIO_AIDED, fci_probs=sieve_probs(1)
        )


def test_text_only_labels_follow_sieve_argmax(small_config, small_features, text_encoder, items):
    cascade = Cascade(
        fci=build_fci(small_config, RngSeed(5)),
        three_a=build_three_a(small_config, RngSeed(6)),
        fci_encoder=text_encoder,
        three_a_encoder=text_encoder,
        feature_config=small_features,
    )
    with patch("intent_sieve.cascade.extract_feature", wraps=extract_feature) as extract:
        result = route_batch(cascade, items)
    tops = [int(np.argmax(cascade.sieve(item.text))) for item in items]
    assert extract.call_count == tops.count(IU)
    for top, prediction in zip(tops, result.predictions):
        if top == IU:
            assert prediction.route is Route.AUDIO_AIDED
        else:
            assert prediction.route is Route.TEXT_ONLY
            assert prediction.label == top


@pytest.mark.slow()
def test_cascade_is_cheaper_than_always_multimodal(cascade, small_features):
    examples = synthetic_speech_corpus(1000, RngSeed(11), iu_fraction=0.1)
    batch = utterances(examples)
    sieve_top = {e.text: int(e.label7) for e in examples}
    real_sieve = Cascade.sieve

    def sieve(self, text):
        real_sieve(self, text)
        return sieve_probs(sieve_top[text])

    with patch.object(Cascade, "sieve", new=sieve), patch(
        "intent_sieve.cascade.extract_feature", wraps=extract_feature
    ) as extract:
        start = time.perf_counter()
        routed = route_batch(cascade, batch)
        cascade_s = time.perf_counter() - start
        n_extracted = extract.call_count
        extract.reset_mock()

        start = time.perf_counter()
        multimodal = route_batch(cascade, batch, always_audio=True)
        multimodal_s = time.perf_counter() - start

    n_iu = sum(sieve_top[item.text] == IU for item in batch)
    assert 0 < n_iu < 1000
    assert n_extracted == n_iu == routed.report.n_audio_aided
    assert extract.call_count == 1000
    for item, prediction in zip(batch, routed.predictions):
        if sieve_top[item.text] == IU:
            assert prediction.route is Route.AUDIO_AIDED
        else:
            assert prediction.route is Route.TEXT_ONLY
            assert prediction.label == sieve_top[item.text]
            assert prediction.label == int(np.argmax(prediction.fci_probs))

    assert multimodal.report.n_audio_aided == 1000
    assert routed.report.audio_ns < multimodal.report.audio_ns
    assert cascade_s < multimodal_s
