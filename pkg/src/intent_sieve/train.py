import logging
import sys
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import weighted_cross_entropy
from .corpus import SpeechExample, TextExample, class_weights, label_counts
from .dsp import FeatureConfig, extract_feature
from .errors import InvalidConfig, InvalidInput, TrainingDiverged
from .evaluation import confusion, metrics
from .labels import IntentLabel7, to_six
from .layers import Mode, RngSeed, Stream
from .models import IntentClassifier
from .optim import AdamState, adam_step
from .textenc import TextEncoder

if sys.version_info >= (3, 8):
    from typing import Protocol
else:
    from typing_extensions import Protocol

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 0.0005
    train_ratio: float = 0.9
    class_weighting: bool = True
    target_accuracy: Optional[float] = None  # stop once the training accuracy reaches it

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be positive: {self.epochs}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be positive: {self.batch_size}")
        if self.lr <= 0:
            raise InvalidConfig(f"lr must be positive: {self.lr}")
        if not 0.0 < self.train_ratio < 1.0:
            raise InvalidConfig(f"train_ratio must be in (0, 1): {self.train_ratio}")


@dataclass(frozen=True)
class Dataset:
    """Model-ready arrays; inputs a model doesn't use may be `None`."""

    labels: np.ndarray
    text: Optional[np.ndarray] = None
    audio: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(
            labels=self.labels[indices],
            text=None if self.text is None else self.text[indices],
            audio=None if self.audio is None else self.audio[indices],
        )


def text_dataset(
    examples: Sequence[TextExample], encoder: TextEncoder, *, six_way: bool = False
) -> Dataset:
    """Labelled character inputs, seven-way or mapped onto the six-way alphabet."""
    if six_way and any(e.label is IntentLabel7.INTONATION_DEPENDENT for e in examples):
        raise InvalidInput("Intonation-dependent examples have no six-way label")
    labels = [int(to_six(e.label)) if six_way else int(e.label) for e in examples]
    return Dataset(
        labels=np.array(labels, dtype=np.int64),
        text=encoder.batch([e.text for e in examples]) if examples else None,
    )


def speech_dataset(
    examples: Sequence[SpeechExample],
    encoder: Optional[TextEncoder],
    feature_config: Optional[FeatureConfig],
) -> Dataset:
    """Six-way labelled inputs; pass `None` for a modality to skip it (and its extraction)."""
    audio = None
    if feature_config is not None and examples:
        audio = np.stack(
            [extract_feature(e.load_audio(), feature_config).matrix for e in examples]
        )
    text = None
    if encoder is not None and examples:
        text = encoder.batch([e.text for e in examples])
    return Dataset(
        labels=np.array([int(e.target6) for e in examples], dtype=np.int64),
        text=text,
        audio=audio,
    )


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: Optional[float] = None
    val_macro_f1: Optional[float] = None


@dataclass
class TrainResult:
    model: IntentClassifier
    class_weights: np.ndarray
    history: List[EpochLog] = field(default_factory=list)


class ProgressCallback(Protocol):
    def __call__(self, done: int, total: int): ...


def _batches(perm: np.ndarray, size: int) -> List[np.ndarray]:
    """Consecutive batches; a trailing single example joins the previous batch."""
    batches = [perm[i : i + size] for i in range(0, len(perm), size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


def predict_proba(model: IntentClassifier, data: Dataset, batch_size: int = 64) -> np.ndarray:
    """Inference-mode class probabilities of every example, shape (N, n_classes)."""
    parts = [
        model.predict_proba(part.audio, part.text)
        for part in (
            data.subset(np.arange(i, min(i + batch_size, len(data))))
            for i in range(0, len(data), batch_size)
        )
    ]
    return np.concatenate(parts) if parts else np.zeros((0, model.n_classes))


def train_model(
    model: IntentClassifier,
    train: Dataset,
    validation: Optional[Dataset] = None,
    cfg: TrainConfig = TrainConfig(),
    seed: RngSeed = RngSeed(),
    progress_callback: Optional[ProgressCallback] = None,
) -> TrainResult:
    """
    Train with Adam and class-weighted cross entropy on shuffled mini-batches.

    The training accuracy of an epoch counts the training-mode predictions of its batches.

    Raises:
        InvalidInput: If the training set is empty or a class has no training example
        TrainingDiverged: If the loss or a gradient becomes non-finite
    """
    if len(train) == 0:
        raise InvalidInput("Training set is empty")
    n_classes = model.n_classes
    if cfg.class_weighting:
        counts = label_counts(train.labels, n_classes)
        if np.any(counts == 0):
            missing = [model.labels(i).abbreviation for i in np.flatnonzero(counts == 0)]
            raise InvalidInput(f"No training examples for {', '.join(missing)}")
        weights = class_weights(counts)
    else:
        weights = np.ones(n_classes)

    state = AdamState(lr=cfg.lr)
    shuffle_rng = seed.generator(Stream.SHUFFLE)
    dropout_rng = seed.generator(Stream.DROPOUT)
    params = model.parameters()
    result = TrainResult(model=model, class_weights=weights)
    names = tuple(label.abbreviation for label in model.labels)

    if progress_callback:
        progress_callback(done=0, total=cfg.epochs)
    for epoch in range(1, cfg.epochs + 1):
        total_loss = 0.0
        correct = 0
        for indices in _batches(shuffle_rng.permutation(len(train)), cfg.batch_size):
            batch = train.subset(indices)
            logits = model.forward(batch.audio, batch.text, Mode.TRAIN, dropout_rng)
            loss = weighted_cross_entropy(logits, batch.labels, weights)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"Loss became non-finite in epoch {epoch}")
            model.zero_grad()
            loss.backward()
            adam_step(params, state)
            total_loss += float(loss.data) * len(indices)
            correct += int(np.sum(np.argmax(logits.data, axis=-1) == batch.labels))

        log = EpochLog(
            epoch=epoch, loss=total_loss / len(train), train_accuracy=correct / len(train)
        )
        if validation is not None and len(validation) > 0:
            preds = np.argmax(predict_proba(model, validation, cfg.batch_size), axis=-1)
            report = metrics(confusion(preds, validation.labels, n_classes, names))
            log = EpochLog(
                epoch=log.epoch,
                loss=log.loss,
                train_accuracy=log.train_accuracy,
                val_accuracy=report.accuracy,
                val_macro_f1=report.macro_f1,
            )
        result.history.append(log)
        logger.info(
            "Epoch %d: loss %.4f, train accuracy %.4f, validation accuracy %s, F1 %s",
            log.epoch,
            log.loss,
            log.train_accuracy,
            "-" if log.val_accuracy is None else f"{log.val_accuracy:.4f}",
            "-" if log.val_macro_f1 is None else f"{log.val_macro_f1:.4f}",
        )
        if progress_callback:
            progress_callback(done=epoch, total=cfg.epochs)
        if cfg.target_accuracy is not None and log.train_accuracy >= cfg.target_accuracy:
            logger.info("Reached training accuracy %.4f after %d epochs", log.train_accuracy, epoch)
            break
    return result
