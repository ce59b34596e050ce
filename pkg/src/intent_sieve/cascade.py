"""
Two-stage intention routing.

The text sieve classifies every utterance into fragments, the five clear-cut cases or
intonation-dependent utterances (IU). Only IUs reach the acoustic stage, which extracts the audio
features and resolves them with the multimodal model:

    text -> sieve -> FR/S/Q/C/RQ/RC ----------------------------------> label (text-only)
                  -> IU -> audio -> features -> multimodal model -> label (audio-aided)
"""

import asyncio
import logging
import sys
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from pathlib import Path
from typing import Any, AsyncIterator, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .corpus import SpeechExample
from .dsp import FeatureConfig, Waveform, extract_feature, read_wav
from .errors import AudioRequired, IntentSieveError, InvalidConfig, InvalidInput
from .labels import IntentLabel6, IntentLabel7
from .models import IntentClassifier, fci_forward, three_a_forward
from .textenc import TextEncoder

if sys.version_info >= (3, 8):
    from typing import Protocol
else:
    from typing_extensions import Protocol

logger = logging.getLogger(__name__)

AudioSource = Union[Waveform, Path, str]

_IU = int(IntentLabel7.INTONATION_DEPENDENT)


class Route(str, Enum):
    TEXT_ONLY = "text-only"
    AUDIO_AIDED = "audio-aided"


class FallbackPolicy(str, Enum):
    ERROR = "error"
    SECOND_BEST = "second-best"


@dataclass(frozen=True)
class StageCosts:
    text_ns: int = 0
    audio_ns: int = 0


@dataclass(frozen=True)
class RoutedPrediction:
    """
    Final six-way label of one utterance and how it was reached.

    `fci_probs` is absent only for multimodal-only runs that skip the sieve. `fallback` marks IUs
    labelled by the fallback policy because no audio was available.
    """

    label: IntentLabel6
    route: Route
    fci_probs: Optional[np.ndarray]
    three_a_probs: Optional[np.ndarray] = None
    costs: StageCosts = StageCosts()
    fallback: bool = False

    def __post_init__(self):
        if self.route is Route.TEXT_ONLY:
            if self.three_a_probs is not None or self.costs.audio_ns != 0:
                raise InvalidInput("Text-only predictions carry no audio stage outputs or cost")
        elif self.three_a_probs is None:
            raise InvalidInput("Audio-aided predictions need the multimodal probabilities")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": str(self.label),
            "route": self.route.value,
            "fci_probs": None if self.fci_probs is None else self.fci_probs.tolist(),
            "three_a_probs": None if self.three_a_probs is None else self.three_a_probs.tolist(),
            "text_ns": self.costs.text_ns,
            "audio_ns": self.costs.audio_ns,
            "fallback": self.fallback,
        }


@dataclass(frozen=True)
class CostReport:
    n_total: int = 0
    n_text_only: int = 0
    n_audio_aided: int = 0
    text_ns: int = 0
    audio_ns: int = 0

    @classmethod
    def aggregate(cls, predictions: Sequence[Optional[RoutedPrediction]]) -> "CostReport":
        """Sum over the routed utterances; failed ones (`None`) only count towards the total."""
        done = [p for p in predictions if p is not None]
        return cls(
            n_total=len(predictions),
            n_text_only=sum(p.route is Route.TEXT_ONLY for p in done),
            n_audio_aided=sum(p.route is Route.AUDIO_AIDED for p in done),
            text_ns=sum(p.costs.text_ns for p in done),
            audio_ns=sum(p.costs.audio_ns for p in done),
        )

    def to_dict(self) -> Dict[str, int]:
        return {
            "n_total": self.n_total,
            "n_text_only": self.n_text_only,
            "n_audio_aided": self.n_audio_aided,
            "text_ns": self.text_ns,
            "audio_ns": self.audio_ns,
        }


def fallback_policy(fci_probs: np.ndarray, policy: FallbackPolicy) -> IntentLabel6:
    """
    Label an IU without audio: fail, or take the most probable non-IU class.

    Equal probabilities resolve to the lowest class code.

    Raises:
        AudioRequired: With the `error` policy
    """
    if FallbackPolicy(policy) is FallbackPolicy.ERROR:
        raise AudioRequired(fci_probs)
    probs = np.asarray(fci_probs, dtype=np.float64)
    return IntentLabel6(int(np.argmax(probs[:_IU])))


def _load_audio(audio: AudioSource) -> Waveform:
    return audio if isinstance(audio, Waveform) else read_wav(audio)


def _needs_audio(probs: np.ndarray, margin: Optional[float]) -> bool:
    top = int(np.argmax(probs))
    if top == _IU:
        return True
    if margin is None:
        return False
    second, first = np.sort(probs)[-2:]
    return bool(first - second < margin)


@dataclass(frozen=True)
class Cascade:
    """
    Trained sieve and multimodal disambiguator with their input encoders.

    `margin` additionally sends utterances whose top-1 and top-2 sieve probabilities differ by
    less than the margin to the audio stage when audio is given; `None` disables it.
    """

    fci: IntentClassifier
    three_a: IntentClassifier
    fci_encoder: TextEncoder
    three_a_encoder: Optional[TextEncoder] = None
    feature_config: FeatureConfig = FeatureConfig()
    policy: FallbackPolicy = FallbackPolicy.ERROR
    margin: Optional[float] = None

    def __post_init__(self):
        if self.fci.n_classes != len(IntentLabel7) or self.fci.kind.uses_audio:
            raise InvalidConfig(f"Sieve must be a seven-way text model, got '{self.fci.kind}'")
        if self.three_a.n_classes != len(IntentLabel6):
            raise InvalidConfig(
                f"Disambiguator must be a six-way model, got '{self.three_a.kind}'"
            )
        cfg = self.three_a.config
        if self.three_a.kind.uses_audio and self.feature_config.feature_shape != (
            cfg.audio_frames,
            cfg.audio_bins,
        ):
            raise InvalidConfig(
                f"Features of shape {self.feature_config.feature_shape} don't fit the "
                f"disambiguator input ({cfg.audio_frames}, {cfg.audio_bins})"
            )
        if self.three_a.kind.uses_text and self.three_a_encoder is None:
            raise InvalidConfig(f"Model '{self.three_a.kind}' needs a text encoder")
        if self.margin is not None and not 0.0 <= self.margin <= 1.0:
            raise InvalidConfig(f"margin must be in [0, 1]: {self.margin}")

    def sieve(self, text: str) -> np.ndarray:
        """Seven-way sieve probabilities."""
        return fci_forward(self.fci_encoder(text), self.fci)

    def disambiguate(self, text: str, audio: Optional[AudioSource]) -> np.ndarray:
        """Six-way probabilities of the second-stage model (loads and featurizes the audio)."""
        model = self.three_a
        audio_feature = None
        if model.kind.uses_audio:
            if audio is None:
                raise AudioRequired(np.zeros(0), f"Model '{model.kind}' needs audio")
            audio_feature = extract_feature(_load_audio(audio), self.feature_config).matrix
        text_feature = self.three_a_encoder(text) if self.three_a_encoder is not None else None
        return three_a_forward(audio_feature, text_feature, model)

    def route(self, text: str, audio: Optional[AudioSource] = None) -> RoutedPrediction:
        """
        Route one utterance through the sieve and, for IUs, the acoustic stage.

        Raises:
            InvalidInput: If the transcript is empty or the audio unreadable
            AudioRequired: If the sieve says IU, no audio is given and the policy is `error`
        """
        start = time.perf_counter_ns()
        probs = self.sieve(text)
        text_ns = time.perf_counter_ns() - start

        is_iu = int(np.argmax(probs)) == _IU
        if not _needs_audio(probs, self.margin) or (audio is None and not is_iu):
            return RoutedPrediction(
                label=IntentLabel6(int(np.argmax(probs))),
                route=Route.TEXT_ONLY,
                fci_probs=probs,
                costs=StageCosts(text_ns=text_ns),
            )
        if audio is None:
            return RoutedPrediction(
                label=fallback_policy(probs, self.policy),
                route=Route.TEXT_ONLY,
                fci_probs=probs,
                costs=StageCosts(text_ns=text_ns),
                fallback=True,
            )

        start = time.perf_counter_ns()
        probs6 = self.disambiguate(text, audio)
        audio_ns = time.perf_counter_ns() - start
        return RoutedPrediction(
            label=IntentLabel6(int(np.argmax(probs6))),
            route=Route.AUDIO_AIDED,
            fci_probs=probs,
            three_a_probs=probs6,
            costs=StageCosts(text_ns=text_ns, audio_ns=audio_ns),
        )

    def route_multimodal(self, text: str, audio: Optional[AudioSource]) -> RoutedPrediction:
        """Skip the sieve and run the multimodal model on the utterance."""
        if audio is None and self.three_a.kind.uses_audio:
            raise AudioRequired(np.zeros(0), "Multimodal-only routing needs audio")
        start = time.perf_counter_ns()
        probs6 = self.disambiguate(text, audio)
        audio_ns = time.perf_counter_ns() - start
        return RoutedPrediction(
            label=IntentLabel6(int(np.argmax(probs6))),
            route=Route.AUDIO_AIDED,
            fci_probs=None,
            three_a_probs=probs6,
            costs=StageCosts(audio_ns=audio_ns),
        )


class Utterance(NamedTuple):
    text: str
    audio: Optional[AudioSource] = None


def utterances(examples: Sequence[SpeechExample]) -> List[Utterance]:
    return [
        Utterance(e.text, e.waveform if e.waveform is not None else e.audio_path) for e in examples
    ]


@dataclass
class BatchResult:
    """Predictions in input order (`None` where routing failed) and the per-row errors."""

    predictions: List[Optional[RoutedPrediction]]
    errors: List[Tuple[int, IntentSieveError]] = field(default_factory=list)

    @property
    def report(self) -> CostReport:
        return CostReport.aggregate(self.predictions)


class ProgressCallback(Protocol):
    def __call__(self, done: int, total: int): ...


def _route_one(
    cascade: Cascade, item: Utterance, always_audio: bool
) -> Union[RoutedPrediction, IntentSieveError]:
    try:
        if always_audio:
            return cascade.route_multimodal(item.text, item.audio)
        return cascade.route(item.text, item.audio)
    except IntentSieveError as e:
        return e


def _collect(result: BatchResult, index: int, outcome: Union[RoutedPrediction, IntentSieveError]):
    if isinstance(outcome, IntentSieveError):
        logger.warning("Utterance %d failed: %s", index, outcome)
        result.errors.append((index, outcome))
    else:
        result.predictions[index] = outcome


def route_batch(
    cascade: Cascade,
    items: Sequence[Utterance],
    *,
    always_audio: bool = False,
    progress_callback: Optional[ProgressCallback] = None,
) -> BatchResult:
    """
    Route every utterance in order; a failing row is recorded and the batch continues.

    With `always_audio` every utterance goes straight to the multimodal model.
    """
    result = BatchResult(predictions=[None] * len(items))
    total = len(items)
    if progress_callback:
        progress_callback(done=0, total=total)
    for i, item in enumerate(items):
        _collect(result, i, _route_one(cascade, item, always_audio))
        if progress_callback:
            progress_callback(done=i + 1, total=total)
    return result


async def route_parallel(
    cascade: Cascade,
    items: Sequence[Utterance],
    *,
    always_audio: bool = False,
    executor: Optional[Executor] = None,
) -> AsyncIterator[Tuple[int, Union[RoutedPrediction, IntentSieveError]]]:
    """Yield `(index, prediction or error)` in completion order, routing on a thread pool."""
    loop = asyncio.get_running_loop()

    async def run(i: int, item: Utterance):
        outcome = await loop.run_in_executor(
            executor, partial(_route_one, cascade, item, always_audio)
        )
        return i, outcome

    for coro in asyncio.as_completed([run(i, item) for i, item in enumerate(items)]):
        yield await coro


async def route_batch_parallel(
    cascade: Cascade,
    items: Sequence[Utterance],
    *,
    always_audio: bool = False,
    max_workers: Optional[int] = None,
    progress_callback: Optional[ProgressCallback] = None,
) -> BatchResult:
    """Concurrent `route_batch`; predictions and errors come back in input order."""
    result = BatchResult(predictions=[None] * len(items))
    done = 0
    total = len(items)
    if progress_callback:
        progress_callback(done=done, total=total)
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        async for i, outcome in route_parallel(
            cascade, items, always_audio=always_audio, executor=executor
        ):
            _collect(result, i, outcome)
            done += 1
            if progress_callback:
                progress_callback(done=done, total=total)
    result.errors.sort(key=lambda e: e[0])
    return result
