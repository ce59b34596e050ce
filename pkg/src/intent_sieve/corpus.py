"""Corpus files, train/validation splits, class weights and annotation agreement."""

import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    Callable,
    Dict,
    Iterable,
    List,
    Optional,
    Sequence,
    Tuple,
    Type,
    TypeVar,
    Union,
)

import numpy as np

from .dsp import Waveform, read_wav, write_wav
from .errors import InvalidConfig, InvalidInput, ParseError, UnknownLabel
from .labels import IntentLabel6, IntentLabel7, Label, parse_label, to_six
from .layers import RngSeed, Stream

logger = logging.getLogger(__name__)

T = TypeVar("T")
PathLike = Union[str, Path]


@dataclass(frozen=True)
class TextExample:
    text: str
    label: IntentLabel7

    def __post_init__(self):
        if not self.text.strip():
            raise InvalidInput("Example text is empty")


@dataclass(frozen=True)
class SpeechExample:
    """
    Transcribed utterance with its audio.

    `label6` is the intention an intonation-dependent utterance resolves to; for the other
    labels it defaults to the six-way counterpart of `label7`. A `waveform` held in memory takes
    precedence over `audio_path`.
    """

    audio_path: Path
    text: str
    label7: IntentLabel7
    label6: Optional[IntentLabel6] = None
    waveform: Optional[Waveform] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.text.strip():
            raise InvalidInput("Example text is empty")
        if self.label6 is None:
            if self.label7 is IntentLabel7.INTONATION_DEPENDENT:
                raise InvalidInput(
                    f"Intonation-dependent example {self.audio_path!s} needs a six-way label"
                )
            object.__setattr__(self, "label6", to_six(self.label7))

    @property
    def label(self) -> IntentLabel7:
        return self.label7

    @property
    def target6(self) -> IntentLabel6:
        assert self.label6 is not None
        return self.label6

    def load_audio(self) -> Waveform:
        return self.waveform if self.waveform is not None else read_wav(self.audio_path)


def _parse_label_at(value: str, enum: Type[Label], path: PathLike, lineno: int) -> Label:
    try:
        return parse_label(value, enum)  # type: ignore[type-var]
    except UnknownLabel:
        raise UnknownLabel(f"Unknown label '{value}'", path=path, lineno=lineno) from None


def parse_text_corpus(lines: Iterable[str], path: PathLike = "<text>") -> List[TextExample]:
    examples = []
    for lineno, line_orig in enumerate(lines, start=1):
        line = line_orig.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        label, sep, text = line.partition("\t")
        if not sep or not text.strip():
            raise ParseError("Expected 'label<TAB>text'", path=path, lineno=lineno)
        label7 = _parse_label_at(label, IntentLabel7, path, lineno)
        examples.append(TextExample(text=text.strip(), label=label7))  # type: ignore[arg-type]
    return examples


def load_text_corpus(path: PathLike) -> List[TextExample]:
    """
    Load a UTF-8 TSV text corpus with lines `label<TAB>text`; blank lines are skipped.

    Raises:
        ParseError: If a line has no tab or no text
        UnknownLabel: If a label is neither a known name, abbreviation nor code
    """
    with open(path, mode="r", encoding="utf-8") as file:
        return parse_text_corpus(file, path)


def without_intonation_dependent(examples: Sequence[TextExample]) -> List[TextExample]:
    """Keep the fragment and clear-cut examples, the part of a text corpus with a six-way label."""
    kept = [e for e in examples if e.label is not IntentLabel7.INTONATION_DEPENDENT]
    if len(kept) < len(examples):
        logger.info("Dropped %d intonation-dependent examples", len(examples) - len(kept))
    return kept


def save_text_corpus(path: PathLike, examples: Iterable[TextExample]):
    with open(path, mode="w", encoding="utf-8", newline="\n") as file:
        for example in examples:
            file.write(f"{example.label}\t{example.text}\n")


def load_speech_manifest(path: PathLike) -> List[SpeechExample]:
    """
    Load a JSON-lines speech manifest of objects `{audio, text, label7, label6?}`.

    Relative audio paths are resolved against the manifest directory.

    Raises:
        ParseError: If a line isn't a JSON object with the required keys
        UnknownLabel: If a label is unknown
    """
    path = Path(path)
    examples = []
    with open(path, mode="r", encoding="utf-8") as file:
        for lineno, line in enumerate(file, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                audio, text, label7 = row["audio"], row["text"], row["label7"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ParseError(f"Invalid manifest row: {e}", path=path, lineno=lineno) from None
            label6 = row.get("label6")
            parsed7 = _parse_label_at(label7, IntentLabel7, path, lineno)
            parsed6 = None
            if label6 is not None:
                parsed6 = _parse_label_at(label6, IntentLabel6, path, lineno)
            try:
                examples.append(
                    SpeechExample(
                        audio_path=path.parent / audio,
                        text=text,
                        label7=parsed7,  # type: ignore[arg-type]
                        label6=parsed6,  # type: ignore[arg-type]
                    )
                )
            except InvalidInput as e:
                raise ParseError(str(e), path=path, lineno=lineno) from None
    return examples


def load_transcripts(path: PathLike) -> List[Tuple[str, Optional[Path]]]:
    """
    Load `(text, audio path)` pairs from a JSON-lines manifest; labels are optional here.

    Raises:
        ParseError: If a line isn't a JSON object with a non-empty `text`
    """
    path = Path(path)
    rows: List[Tuple[str, Optional[Path]]] = []
    with open(path, mode="r", encoding="utf-8") as file:
        for lineno, line in enumerate(file, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                text = str(row["text"])
                audio = row.get("audio")
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as e:
                raise ParseError(f"Invalid manifest row: {e}", path=path, lineno=lineno) from None
            if not text.strip():
                raise ParseError("Empty transcript", path=path, lineno=lineno)
            rows.append((text, None if audio is None else path.parent / audio))
    return rows


def save_speech_manifest(path: PathLike, examples: Iterable[SpeechExample]):
    """Write a manifest; audio paths below the manifest directory are stored relative to it."""
    path = Path(path)
    base = path.parent.resolve()
    with open(path, mode="w", encoding="utf-8", newline="\n") as file:
        for example in examples:
            row = {
                "audio": _relative_audio(example.audio_path, base),
                "text": example.text,
                "label7": str(example.label7),
            }
            if example.label7 is IntentLabel7.INTONATION_DEPENDENT:
                row["label6"] = str(example.label6)
            file.write(json.dumps(row, ensure_ascii=False) + "\n")


def _relative_audio(audio: Path, base: Path) -> str:
    resolved = audio.resolve()
    try:
        return resolved.relative_to(base).as_posix()
    except ValueError:
        return os.fspath(resolved)


@dataclass(frozen=True)
class SplitSpec:
    train_ratio: float = 0.9
    seed: RngSeed = RngSeed()
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_ratio < 1.0:
            raise InvalidConfig(f"train_ratio must be in (0, 1): {self.train_ratio}")


MIN_STRATIFIED_EXAMPLES = 10


def _n_train(n: int, ratio: float) -> int:
    """Round half up, keeping at least one example on each side."""
    return max(1, min(n - 1, int(np.floor(ratio * n + 0.5))))


def split(
    examples: Sequence[T],
    spec: SplitSpec = SplitSpec(),
    key: Callable[[T], int] = lambda e: int(e.label),  # type: ignore[attr-defined]
) -> Tuple[List[T], List[T]]:
    """
    Deterministic train/validation split, stratified by `key` unless disabled.

    A class with fewer than two examples can't be split and is put into train with a warning.
    Both parts keep the input order.

    Raises:
        InvalidInput: If stratification is requested for fewer than 10 examples
    """
    rng = spec.seed.generator(Stream.SPLIT)
    n = len(examples)
    if not spec.stratified:
        if n < 2:  # noqa: PLR2004
            return list(examples), []
        train_idx = rng.permutation(n)[: _n_train(n, spec.train_ratio)]
    else:
        if n < MIN_STRATIFIED_EXAMPLES:
            raise InvalidInput(
                f"Stratified split needs at least {MIN_STRATIFIED_EXAMPLES} examples, got {n}"
            )
        by_class: Dict[int, List[int]] = defaultdict(list)
        for i, example in enumerate(examples):
            by_class[key(example)].append(i)
        chosen = []
        for label in sorted(by_class):
            indices = np.array(by_class[label])
            if len(indices) < 2:  # noqa: PLR2004
                logger.warning("Class %d has a single example, keeping it in train", label)
                chosen.extend(indices.tolist())
                continue
            perm = rng.permutation(len(indices))
            chosen.extend(indices[perm[: _n_train(len(indices), spec.train_ratio)]].tolist())
        train_idx = np.array(chosen, dtype=np.int64)

    mask = np.zeros(n, dtype=bool)
    mask[train_idx] = True
    train = [e for e, m in zip(examples, mask) if m]
    validation = [e for e, m in zip(examples, mask) if not m]
    return train, validation


def label_counts(labels: Iterable[int], n_classes: int) -> np.ndarray:
    labels = np.fromiter((int(label) for label in labels), dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidInput(f"Label out of range [0, {n_classes})")
    return np.bincount(labels, minlength=n_classes)


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """
    Balanced inverse-frequency weights `total / (K * count)`.

    Raises:
        InvalidInput: If a class has no examples
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise InvalidInput("Class counts must be a non-empty vector")
    if np.any(counts <= 0):
        empty = np.flatnonzero(counts <= 0).tolist()
        raise InvalidInput(f"Classes without examples: {empty}")
    return counts.sum() / (counts.size * counts)


def fleiss_kappa(ratings: Union[Sequence[Sequence[int]], np.ndarray]) -> float:
    """
    Fleiss' kappa of a count matrix `ratings[item, category]` (annotators per category).

    If all ratings fall into one category the chance agreement is 1; kappa is then defined as 1
    for unanimous items.

    Raises:
        InvalidInput: If rows have different sums, fewer than two annotators or the statistic
            is undefined
    """
    counts = np.asarray(ratings, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[0] == 0:  # noqa: PLR2004
        raise InvalidInput("Ratings must be a non-empty (items, categories) matrix")
    if np.any(counts < 0):
        raise InvalidInput("Rating counts must not be negative")
    totals = counts.sum(axis=1)
    n = totals[0]
    if not np.all(totals == n):
        raise InvalidInput(f"Items have different annotator counts: {sorted(set(totals.tolist()))}")
    if n < 2:  # noqa: PLR2004
        raise InvalidInput(f"Fleiss' kappa needs at least 2 annotators, got {int(n)}")

    per_item = (np.square(counts).sum(axis=1) - n) / (n * (n - 1))
    p_bar = per_item.mean()
    p_category = counts.sum(axis=0) / counts.sum()
    p_expected = float(np.square(p_category).sum())
    if np.isclose(p_expected, 1.0):
        if np.isclose(p_bar, 1.0):
            return 1.0
        raise InvalidInput("Fleiss' kappa is undefined when chance agreement is 1")
    return float((p_bar - p_expected) / (1.0 - p_expected))


def majority_vote(labels: Sequence[T]) -> Optional[T]:
    """Most frequent label, or `None` if the top count is tied (needs adjudication)."""
    if not labels:
        raise InvalidInput("Majority vote needs at least one annotation")
    ranked = Counter(labels).most_common(2)
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        return None
    return ranked[0][0]


def rating_counts(annotations: Sequence[Sequence[int]], n_classes: int) -> np.ndarray:
    """Turn per-item annotator labels into the (items, categories) count matrix."""
    if not annotations:
        return np.zeros((0, n_classes), dtype=np.int64)
    return np.stack([label_counts(row, n_classes) for row in annotations])


def load_ratings(path: PathLike, *, counts: bool = False) -> np.ndarray:
    """
    Load annotations as a Fleiss count matrix.

    Each non-blank line is one item: tab-separated per-annotator labels (names, abbreviations or
    codes of the seven-way alphabet), or with `counts=True` the per-category counts.
    """
    rows = []
    with open(path, mode="r", encoding="utf-8") as file:
        for lineno, line in enumerate(file, start=1):
            fields = line.split()
            if not fields:
                continue
            if counts:
                try:
                    rows.append([int(f) for f in fields])
                except ValueError:
                    raise ParseError("Counts must be integers", path=path, lineno=lineno) from None
            else:
                rows.append(
                    [int(_parse_label_at(f, IntentLabel7, path, lineno)) for f in fields]
                )
    if counts:
        if len({len(row) for row in rows}) > 1:
            raise ParseError("Rows have different numbers of categories", path=path)
        return np.array(rows, dtype=np.int64)
    return rating_counts(rows, len(IntentLabel7))


# ---------------------------------------------------------------------------------------------
# synthetic corpora

SYLLABLES = "가나다마바사아자차카타파하고노도모보소오조"
# sentence-final character per seven-way label; intonation-dependent utterances share one
SYNTHETIC_ENDINGS = {
    IntentLabel7.FRAGMENT: "것",
    IntentLabel7.STATEMENT: "다",
    IntentLabel7.QUESTION: "까",
    IntentLabel7.COMMAND: "라",
    IntentLabel7.RHETORICAL_QUESTION: "냐",
    IntentLabel7.RHETORICAL_COMMAND: "지",
    IntentLabel7.INTONATION_DEPENDENT: "어",
}


def _synthetic_text(rng: np.random.Generator, label: IntentLabel7) -> str:
    words = []
    for _ in range(int(rng.integers(1, 4))):
        length = int(rng.integers(1, 4))
        words.append("".join(rng.choice(list(SYLLABLES), size=length)))
    return " ".join(words) + SYNTHETIC_ENDINGS[label]


def synthetic_text_corpus(
    n: int, seed: RngSeed = RngSeed(), labels: Sequence[IntentLabel7] = tuple(IntentLabel7)
) -> List[TextExample]:
    """Separable text examples: labels cycle through `labels`, each with its own final char."""
    rng = seed.generator(Stream.SYNTHETIC)
    examples = []
    for i in range(n):
        label = labels[i % len(labels)]
        examples.append(TextExample(text=_synthetic_text(rng, label), label=label))
    return examples


def synthetic_waveform(
    label: IntentLabel6,
    rng: np.random.Generator,
    sample_rate_hz: int = 8000,
    duration_s: float = 0.5,
) -> Waveform:
    """
    Steady tone followed by a label-specific final contour (last 40 % of the utterance).

    The final contour starts at `300 + 120 * code` Hz and rises for even codes, falls for odd.
    """
    n = int(round(sample_rate_hz * duration_s))
    t = np.arange(n) / sample_rate_hz
    tail_start = 0.6 * duration_s
    base = 300.0 + 120.0 * int(label)
    slope = 0.8 if int(label) % 2 == 0 else -0.4
    rel = np.clip(t - tail_start, 0.0, None) / max(duration_s - tail_start, 1e-9)
    freq = np.where(t < tail_start, 180.0, base * (1.0 + slope * rel))
    phase = 2 * np.pi * np.cumsum(freq) / sample_rate_hz + rng.uniform(0, 2 * np.pi)
    amplitude = rng.uniform(0.3, 0.6)
    samples = amplitude * np.sin(phase) + rng.normal(0.0, 0.005, size=n)
    return Waveform(samples=samples, sample_rate_hz=sample_rate_hz)


def synthetic_speech_corpus(
    n: int,
    seed: RngSeed = RngSeed(),
    *,
    iu_fraction: float = 0.5,
    directory: Optional[PathLike] = None,
    sample_rate_hz: int = 8000,
    duration_s: float = 0.5,
) -> List[SpeechExample]:
    """
    Speech examples whose six-way intention is audible in the final contour.

    About `iu_fraction` of the utterances are intonation-dependent: their text ends with the shared
    IU character, so only the audio tells them apart. With `directory` the waveforms are written
    as WAV files, otherwise they are kept in memory.
    """
    if not 0.0 <= iu_fraction <= 1.0:
        raise InvalidInput(f"iu_fraction must be in [0, 1]: {iu_fraction}")
    rng = seed.generator(Stream.SYNTHETIC)
    examples = []
    for i in range(n):
        label6 = IntentLabel6(i % len(IntentLabel6))
        is_iu = rng.random() < iu_fraction
        label7 = IntentLabel7.INTONATION_DEPENDENT if is_iu else IntentLabel7(int(label6))
        waveform = synthetic_waveform(label6, rng, sample_rate_hz, duration_s)
        audio_path = Path(f"utt{i:05d}.wav")
        if directory is not None:
            audio_path = Path(directory) / audio_path
            write_wav(audio_path, waveform)
        examples.append(
            SpeechExample(
                audio_path=audio_path,
                text=_synthetic_text(rng, label7),
                label7=label7,
                label6=label6,
                waveform=waveform if directory is None else None,
            )
        )
    return examples
