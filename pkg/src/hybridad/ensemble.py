"""Probability-averaging ensemble (soft voting) and prediction files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import AlignmentError, DataError, DimensionError, HybridError, ParameterError


@dataclass
class Prediction:
    probs: np.ndarray
    true_label: int | None = None
    sample_id: str = ""

    @property
    def predicted(self) -> int:
        # np.argmax returns the first maximum, i.e. the lowest class index on ties
        return int(np.argmax(self.probs))


def normalize_weights(weights: Sequence[float] | None, n: int) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise DimensionError(f"expected {n} weights, got {w.shape[0] if w.ndim else 'scalar'}")
    if (w < 0).any() or not np.isfinite(w).all():
        raise ParameterError(f"weights must be finite and non-negative, got {w.tolist()}")
    total = w.sum()
    if total <= 0:
        raise ParameterError("at least one weight must be positive")
    return w / total


def fuse_average(member_probs: Sequence[Sequence[float]], weights: Sequence[float] | None = None
                 ) -> np.ndarray:
    """Weighted mean of member probability vectors (or N,K arrays).

    Accumulated as ``first + sum(w_i * (p_i - first))`` so that fusing copies
    of a single vector returns that vector exactly; the result is clipped to
    the member-wise [min, max] envelope to absorb rounding.
    """
    if len(member_probs) == 0:
        raise ParameterError("need at least one member")
    stack = [np.asarray(p, dtype=np.float64) for p in member_probs]
    shape = stack[0].shape
    for i, p in enumerate(stack):
        if p.shape != shape:
            raise DimensionError(f"member {i} has shape {p.shape}, expected {shape}")
        if np.abs(p.sum(axis=-1) - 1.0).max() > 1e-6 or (p < 0).any():
            raise ParameterError(f"member {i} is not a probability distribution")
    w = normalize_weights(weights, len(stack))
    ref = stack[0]
    acc = ref.copy()
    for wi, p in zip(w, stack):
        acc += wi * (p - ref)
    arr = np.stack(stack)
    return np.clip(acc, arr.min(axis=0), arr.max(axis=0))


class Ensemble:
    """Members are ``(name, model)`` pairs or ``(name, list[Prediction])`` pairs.

    Fusion order is by sorted member name, so the result does not depend on
    the order members were listed in.
    """

    def __init__(self, members: Sequence[tuple[str, object]], weights: Sequence[float] | None = None,
                 num_classes: int | None = None):
        if not members:
            raise ParameterError("an ensemble needs at least one member")
        names = [name for name, _ in members]
        if len(set(names)) != len(names):
            raise ParameterError(f"duplicate member names in {names}")
        w = normalize_weights(weights, len(members))
        order = sorted(range(len(members)), key=lambda i: names[i])
        self.members = [members[i] for i in order]
        self.weights = w[order]
        self.num_classes = num_classes

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.members]

    def member_probs(self, batch) -> list[np.ndarray]:
        out = []
        for name, member in self.members:
            try:
                if hasattr(member, "forward"):
                    with ad.no_grad():
                        probs = member.forward(batch, "infer").data
                else:
                    probs = np.stack([p.probs for p in member])
            except HybridError as exc:
                raise type(exc)(f"member {name!r} failed: {exc}") from exc
            if self.num_classes is not None and probs.shape[-1] != self.num_classes:
                raise DimensionError(
                    f"member {name!r} emits {probs.shape[-1]} classes, expected {self.num_classes}")
            out.append(probs)
        return out

    def predict_proba(self, batch=None) -> np.ndarray:
        return fuse_average(self.member_probs(batch), self.weights)

    def predict(self, batch=None, labels: Sequence[int] | None = None,
                sample_ids: Sequence[str] | None = None) -> list[Prediction]:
        fused = self.predict_proba(batch)
        n = fused.shape[0]
        if labels is None:
            labels = self._stored_labels()
        if sample_ids is None:
            sample_ids = self._stored_ids() or [str(i) for i in range(n)]
        labels = labels if labels is not None else [None] * n
        return [Prediction(fused[i], None if labels[i] is None else int(labels[i]), sample_ids[i])
                for i in range(n)]

    def _stored(self):
        for _, member in self.members:
            if not hasattr(member, "forward"):
                return member
        return None

    def _stored_labels(self):
        stored = self._stored()
        return None if stored is None else [p.true_label for p in stored]

    def _stored_ids(self):
        stored = self._stored()
        return None if stored is None else [p.sample_id for p in stored]


def predict(ensemble: Ensemble, batch=None) -> list[Prediction]:
    return ensemble.predict(batch)


# ---------------------------------------------------------------------------
# prediction files
# ---------------------------------------------------------------------------

def format_predictions(predictions: Sequence[Prediction]) -> str:
    lines = []
    for p in predictions:
        label = "" if p.true_label is None else str(p.true_label)
        probs = "\t".join(f"{v:.9f}" for v in p.probs)
        lines.append(f"{p.sample_id}\t{label}\t{probs}\n")
    return "".join(lines)


def write_predictions(path: str | Path, predictions: Sequence[Prediction]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_predictions(predictions))
    return path


def read_predictions(path: str | Path) -> list[Prediction]:
    preds = []
    k = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) < 4:
                raise DataError(f"{path}:{lineno}: expected sample_id, label and >= 2 probabilities")
            if k is None:
                k = len(fields) - 2
            elif len(fields) - 2 != k:
                raise DimensionError(f"{path}:{lineno}: {len(fields) - 2} probabilities, expected {k}")
            try:
                probs = np.array([float(v) for v in fields[2:]])
                label = int(fields[1]) if fields[1] else None
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed prediction record") from None
            preds.append(Prediction(probs, label, fields[0]))
    return preds


def read_ensemble_manifest(path: str | Path) -> tuple[list[Path], list[float] | None]:
    """Lines ``path`` or ``path<TAB>weight``; relative paths resolve against the manifest."""
    base = Path(path).parent
    paths, weights = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            entry, _, weight = line.partition("\t")
            if weight.strip():
                try:
                    weights.append(float(weight))
                except ValueError:
                    raise ParameterError(f"{path}:{lineno}: bad weight {weight!r}") from None
            member = Path(entry.strip())
            paths.append(member if member.is_absolute() else base / member)
    if weights and len(weights) != len(paths):
        raise ParameterError("either every ensemble member has a weight or none does")
    return paths, (weights or None)


def fuse_from_files(prediction_files: Sequence[str | Path], weights: Sequence[float] | None = None
                    ) -> list[Prediction]:
    """Fuse stored per-model predictions aligned by sample_id; output sorted by sample_id."""
    if not prediction_files:
        raise ParameterError("need at least one prediction file")
    members = []
    reference: set[str] | None = None
    for path in prediction_files:
        preds = sorted(read_predictions(path), key=lambda p: p.sample_id)
        ids = {p.sample_id for p in preds}
        if len(ids) != len(preds):
            raise AlignmentError(f"{path} repeats sample ids")
        if reference is None:
            reference = ids
        elif ids != reference:
            raise AlignmentError(
                f"{path} does not align with {prediction_files[0]}: "
                f"{len(ids ^ reference)} sample ids differ")
        if members and [p.true_label for p in preds] != [p.true_label for p in members[0][1]]:
            raise AlignmentError(f"{path} disagrees with {prediction_files[0]} on true labels")
        name = str(path)
        repeats = sum(1 for n, _ in members if n == name or n.startswith(name + "#"))
        members.append((f"{name}#{repeats}" if repeats else name, preds))
    return Ensemble(members, weights).predict()
