import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from .errors import InvalidInput

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts indexed as `counts[predicted, answer]`."""

    counts: np.ndarray
    label_names: Tuple[str, ...]

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.label_names)
        if counts.shape != (k, k):
            raise InvalidInput(f"Confusion matrix must be {k}x{k}, got {counts.shape}")
        if np.any(counts < 0):
            raise InvalidInput("Confusion matrix counts must not be negative")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> Dict[str, Any]:
        return {"labels": list(self.label_names), "counts": self.counts.tolist()}

    def format_table(self) -> str:
        """Aligned plain-text table, rows predicted and columns answer."""
        corner = "Pred \\ Ans"
        width = max(len(corner), *(len(n) for n in self.label_names), len(str(self.counts.max())))
        lines = [" ".join(f"{c:>{width}}" for c in (corner, *self.label_names))]
        for name, row in zip(self.label_names, self.counts):
            lines.append(" ".join(f"{c:>{width}}" for c in (name, *row.tolist())))
        return "\n".join(lines)


def default_names(n_classes: int) -> Tuple[str, ...]:
    return tuple(str(i) for i in range(n_classes))


def confusion(
    preds: Sequence[int],
    answers: Sequence[int],
    n_classes: int,
    label_names: Optional[Sequence[str]] = None,
) -> ConfusionMatrix:
    """
    Count (predicted, answer) pairs.

    Raises:
        InvalidInput: If the sequences differ in length or a label is out of range
    """
    if len(preds) != len(answers):
        raise InvalidInput(f"Got {len(preds)} predictions for {len(answers)} answers")
    p = np.asarray([int(x) for x in preds], dtype=np.int64)
    a = np.asarray([int(x) for x in answers], dtype=np.int64)
    for values in (p, a):
        if values.size and (values.min() < 0 or values.max() >= n_classes):
            raise InvalidInput(f"Label out of range [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (p, a), 1)
    names = tuple(label_names) if label_names is not None else default_names(n_classes)
    return ConfusionMatrix(counts=counts, label_names=names)


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    macro_f1: float
    per_class_recall: np.ndarray
    per_class_precision: np.ndarray
    per_class_f1: np.ndarray
    label_names: Tuple[str, ...]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class": {
                name: {"recall": float(r), "precision": float(p), "f1": float(f)}
                for name, r, p, f in zip(
                    self.label_names,
                    self.per_class_recall,
                    self.per_class_precision,
                    self.per_class_f1,
                )
            },
        }

    def format_table(self) -> str:
        width = max(5, *(len(n) for n in self.label_names))
        lines = [f"{'':<{width}} {'recall':>9} {'precision':>9} {'f1':>9}"]
        for name, r, p, f in zip(
            self.label_names, self.per_class_recall, self.per_class_precision, self.per_class_f1
        ):
            lines.append(f"{name:<{width}} {r:>9.4f} {p:>9.4f} {f:>9.4f}")
        lines.append(f"accuracy {self.accuracy:.4f}, macro F1 {self.macro_f1:.4f}")
        return "\n".join(lines)


def _safe_ratio(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    out = np.zeros_like(numerator, dtype=np.float64)
    np.divide(numerator, denominator, out=out, where=denominator > 0)
    return out


def metrics(cm: ConfusionMatrix) -> MetricReport:
    """
    Accuracy, per-class recall/precision/F1 and macro F1 of a confusion matrix.

    Recall divides by column sums (answers), precision by row sums (predictions). Zero
    denominators give 0. Classes that never occur as answer are left out of the macro average.

    Raises:
        InvalidInput: If the matrix holds no counts
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise InvalidInput("Confusion matrix is empty")
    diagonal = np.diag(counts)
    answered = counts.sum(axis=0)
    predicted = counts.sum(axis=1)
    recall = _safe_ratio(diagonal, answered)
    precision = _safe_ratio(diagonal, predicted)
    f1 = _safe_ratio(2 * precision * recall, precision + recall)

    absent = [cm.label_names[i] for i in np.flatnonzero(answered == 0)]
    if absent:
        logger.warning("No answers for %s, excluded from macro F1", ", ".join(absent))
    unpredicted = [cm.label_names[i] for i in np.flatnonzero(predicted == 0)]
    if unpredicted:
        logger.warning("Never predicted: %s, precision set to 0", ", ".join(unpredicted))

    present = answered > 0
    return MetricReport(
        accuracy=float(diagonal.sum() / total),
        macro_f1=float(f1[present].mean()),
        per_class_recall=recall,
        per_class_precision=precision,
        per_class_f1=f1,
        label_names=cm.label_names,
    )


@dataclass(frozen=True)
class TimedRun:
    wall_ns: int
    predictions: List[int]
    report: Optional[MetricReport] = None

    @property
    def wall_s(self) -> float:
        return self.wall_ns / 1e9


def _chunks(items: Sequence[T], n: int) -> List[Sequence[T]]:
    size = -(-len(items) // n)
    return [items[i : i + size] for i in range(0, len(items), size)]


def timed_inference(
    runner: Callable[[Sequence[T]], Sequence[int]],
    inputs: Sequence[T],
    answers: Optional[Sequence[int]] = None,
    *,
    n_classes: int = 0,
    label_names: Optional[Sequence[str]] = None,
    warmup_items: int = 16,
    workers: int = 1,
) -> TimedRun:
    """
    Measure the wall time of `runner` over all inputs on the monotonic clock.

    One warm-up call on the first `warmup_items` inputs precedes the measurement. With `workers`
    > 1 the inputs are split into contiguous chunks run on a thread pool; predictions keep the
    input order, so metrics don't depend on the worker count.
    """
    if warmup_items > 0 and inputs:
        runner(inputs[:warmup_items])
    start = time.perf_counter_ns()
    if workers > 1 and len(inputs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(runner, _chunks(inputs, workers)))
        predictions = [int(p) for part in parts for p in part]
    else:
        predictions = [int(p) for p in runner(inputs)]
    wall_ns = time.perf_counter_ns() - start

    report = None
    if answers is not None:
        cm = confusion(predictions, answers, n_classes, label_names)
        report = metrics(cm)
    return TimedRun(wall_ns=wall_ns, predictions=predictions, report=report)


def format_duration(seconds: float) -> str:
    """Compact duration: `850ms`, `10.2s`, `3m 30s`."""
    if seconds < 1:
        return f"{seconds * 1000:.0f}ms"
    if seconds < 60:  # noqa: PLR2004
        return f"{seconds:.1f}s"
    minutes, rest = divmod(int(round(seconds)), 60)
    return f"{minutes}m {rest}s"


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    accuracy: float
    macro_f1: float
    wall_ns: int
    n_audio: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.name,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "wall_ns": self.wall_ns,
            "n_audio": self.n_audio,
        }


def format_comparison(rows: Sequence[ComparisonRow]) -> str:
    """Side-by-side accuracy, F1 and time per model."""
    width = max(5, *(len(r.name) for r in rows)) if rows else 5
    lines = [f"{'model':<{width}} {'accuracy':>9} {'F1':>9} {'time':>9} {'audio':>6}"]
    for r in rows:
        lines.append(
            f"{r.name:<{width}} {r.accuracy:>9.4f} {r.macro_f1:>9.4f} "
            f"{format_duration(r.wall_ns / 1e9):>9} {r.n_audio:>6}"
        )
    return "\n".join(lines)
