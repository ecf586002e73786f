"""Confusion matrix, accuracy, precision/recall/F1, one-vs-rest ROC AUC, and report emitters."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import LabelError, UndefinedMetricError


class ZeroDivisionWarning(UserWarning):
    """A precision/recall/F1 denominator was zero; the metric was set to 0."""


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class
    class_names: tuple[str, ...] = ()

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def to_csv(self) -> str:
        names = self.class_names or tuple(str(i) for i in range(self.num_classes))
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["true\\pred", *names])
        for name, row in zip(names, self.counts):
            writer.writerow([name, *map(int, row)])
        return buf.getvalue()


def confusion_matrix(predictions: Sequence, num_classes: int,
                     class_names: Sequence[str] = ()) -> ConfusionMatrix:
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for i, p in enumerate(predictions):
        if p.true_label is None:
            raise LabelError(f"prediction {i} ({p.sample_id!r}) has no true label")
        t, q = int(p.true_label), p.predicted
        if not (0 <= t < num_classes and 0 <= q < num_classes):
            raise LabelError(f"prediction {i}: labels ({t}, {q}) outside [0, {num_classes})")
        counts[t, q] += 1
    return ConfusionMatrix(counts, tuple(class_names))


def _require_nonempty(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise UndefinedMetricError("metrics are undefined for an empty evaluation")


def accuracy(cm: ConfusionMatrix) -> float:
    _require_nonempty(cm)
    return float(np.trace(cm.counts) / cm.total)


@dataclass
class ClassScores:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    zero_division: list[tuple[str, int]] = field(default_factory=list)

    def aggregate(self, averaging: str = "weighted") -> tuple[float, float, float]:
        if averaging == "macro":
            w = np.full(len(self.support), 1.0 / len(self.support))
        elif averaging == "weighted":
            w = self.support / self.support.sum()
        else:
            raise ValueError(f"unknown averaging {averaging!r}")
        return float(w @ self.precision), float(w @ self.recall), float(w @ self.f1)


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    zero = den == 0
    out = np.divide(num, den, out=np.zeros(num.shape, dtype=np.float64), where=~zero)
    return out, zero


def precision_recall_f1(cm: ConfusionMatrix, averaging: str = "weighted"):
    """Per-class scores and, unless ``averaging == "none"``, the (P, R, F1) aggregate.

    Zero denominators yield 0 and are listed in ``zero_division`` along with
    a :class:`ZeroDivisionWarning`.
    """
    _require_nonempty(cm)
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    precision, p_zero = _safe_ratio(tp, counts.sum(axis=0))
    recall, r_zero = _safe_ratio(tp, counts.sum(axis=1))
    f1, f_zero = _safe_ratio(2 * precision * recall, precision + recall)
    flags = ([("precision", int(c)) for c in np.flatnonzero(p_zero)]
             + [("recall", int(c)) for c in np.flatnonzero(r_zero)]
             + [("f1", int(c)) for c in np.flatnonzero(f_zero)])
    if flags:
        warnings.warn(f"zero denominators set to 0: {flags}", ZeroDivisionWarning, stacklevel=2)
    scores = ClassScores(precision, recall, f1, cm.counts.sum(axis=1), flags)
    if averaging == "none":
        return scores, None
    return scores, scores.aggregate(averaging)


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC with midranks for tied scores."""
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc_ovr(predictions: Sequence, num_classes: int) -> tuple[float, np.ndarray]:
    """Macro one-vs-rest AUC and the per-class AUCs."""
    labels = np.array([p.true_label for p in predictions])
    if any(label is None for label in labels):
        raise LabelError("every prediction needs a true label for AUC")
    probs = np.stack([p.probs for p in predictions]) if len(predictions) else np.empty((0, num_classes))
    per_class = np.empty(num_classes)
    for c in range(num_classes):
        positive = labels == c
        if positive.all() or not positive.any():
            raise UndefinedMetricError(
                f"AUC undefined for class {c}: needs both positive and negative samples")
        per_class[c] = binary_auc(probs[:, c], positive)
    return float(per_class.mean()), per_class


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    model_name: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc_auc: float | None
    per_class_precision: list[float]
    per_class_recall: list[float]
    per_class_f1: list[float]
    support: list[int]
    per_class_auc: list[float] | None = None
    class_names: list[str] = field(default_factory=list)
    zero_division: list[list] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.support)


CSV_HEADER = ("model", "accuracy", "precision", "recall", "f1", "roc_auc")


def build_report(predictions: Sequence, num_classes: int, model_name: str = "model",
                 class_names: Sequence[str] = (), averaging: str = "weighted") -> MetricsReport:
    """Compute every metric; AUC is left as None when some class lacks positives or negatives."""
    cm = confusion_matrix(predictions, num_classes, class_names)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroDivisionWarning)
        scores, (p, r, f) = precision_recall_f1(cm, averaging)
    try:
        auc, per_auc = roc_auc_ovr(predictions, num_classes)
        per_auc_list = per_auc.tolist()
    except UndefinedMetricError:
        auc, per_auc_list = None, None
    return MetricsReport(model_name, accuracy(cm), p, r, f, auc,
                         scores.precision.tolist(), scores.recall.tolist(), scores.f1.tolist(),
                         [int(s) for s in scores.support], per_auc_list, list(class_names),
                         [list(flag) for flag in scores.zero_division])


def _fmt4(value: float | None) -> str:
    return "" if value is None else f"{value:.4f}"


def emit_report(report: MetricsReport, fmt: str = "json") -> str:
    """JSON (full precision, stable key order) or a one-row CSV at 4 decimals."""
    if fmt == "json":
        return json.dumps(asdict(report), indent=2) + "\n"
    if fmt == "csv":
        row = [report.model_name] + [_fmt4(getattr(report, k)) for k in CSV_HEADER[1:]]
        return ",".join(CSV_HEADER) + "\n" + ",".join(row) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report(text: str) -> MetricsReport:
    return MetricsReport(**json.loads(text))
