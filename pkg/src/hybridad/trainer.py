"""Adam, cross-entropy, plateau scheduling, early stopping, and the training loop."""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import AugmentConfig, DatasetSplit, iter_batches
from .errors import (
    CheckpointError,
    EmptyInputError,
    LabelError,
    NonFiniteError,
    ParameterError,
)
from .models import Model, ModelConfig, build_model

log = logging.getLogger(__name__)


def cross_entropy_loss(probs: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-probability of the true class (probabilities clamped to [1e-12, 1])."""
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise LabelError(f"labels shape {labels.shape} does not match probabilities {probs.shape}")
    k = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return ad.nll_of_probs(probs, labels)


# ---------------------------------------------------------------------------
# optimiser and schedules
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias-corrected moments, keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient for parameter {name}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict:
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps}


def adam_step(params: dict[str, Tensor], state: Adam) -> Adam:
    """Apply one update using the gradients already stored on ``params``."""
    state.params = params
    state.step()
    return state


class ReduceLROnPlateau:
    """Multiply lr by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, optimizer: Adam, factor: float = 0.5, patience: int = 3,
                 min_lr: float = 1e-6, min_delta: float = 1e-4):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.min_delta = min_delta
        self.best = float("inf")
        self.wait = 0

    def step(self, val_loss: float) -> None:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.wait = 0
            return
        self.wait += 1
        if self.wait >= self.patience:
            self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
            self.wait = 0


class EarlyStopping:
    def __init__(self, patience: int = 5, min_delta: float = 1e-4):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_epoch = -1
        self.wait = 0

    def step(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Return (improved, should_stop)."""
        if val_loss < self.best - self.min_delta:
            self.best, self.best_epoch, self.wait = val_loss, epoch, 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    early_stop_patience: int = 5
    lr_factor: float = 0.5
    lr_patience: int = 3
    min_lr: float = 1e-6
    min_delta: float = 1e-4
    augment: bool = True
    rotation_deg: float = 15.0
    flip_prob: float = 0.5
    zoom: float = 0.1
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be >= 1")
        if self.early_stop_patience < 1 or self.lr_patience < 1:
            raise ParameterError("patience values must be >= 1")
        if not 0.0 < self.lr_factor < 1.0:
            raise ParameterError(f"lr_factor must lie in (0, 1), got {self.lr_factor}")
        if self.min_lr <= 0 or self.lr <= 0:
            raise ParameterError("lr and min_lr must be positive")
        return self

    def augment_config(self) -> AugmentConfig | None:
        if not self.augment:
            return None
        return AugmentConfig(self.rotation_deg, self.flip_prob, self.zoom).validate()


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,train_acc,val_loss,val_acc,lr"]
        lines += [f"{r.epoch},{r.train_loss:.6f},{r.train_acc:.6f},{r.val_loss:.6f},"
                  f"{r.val_acc:.6f},{r.lr:.6g}" for r in self.records]
        return "\n".join(lines) + "\n"


def _as_split(data) -> tuple[list, list]:
    if isinstance(data, DatasetSplit):
        return data.train, data.val
    train, val = data
    return list(train), list(val)


def validation_pass(model: Model, samples: Sequence, batch_size: int) -> tuple[float, float]:
    """Infer-mode mean loss and accuracy over ``samples`` in stable order."""
    total_loss, correct = 0.0, 0
    with ad.no_grad():
        for images, labels in iter_batches(samples, batch_size, None, channels=model.config.channels):
            probs = model.forward(images, "infer")
            total_loss += cross_entropy_loss(probs, labels).item() * len(labels)
            correct += int((probs.data.argmax(axis=1) == labels).sum())
    return total_loss / len(samples), correct / len(samples)


class Trainer:
    """Stateful loop so a run can be checkpointed and resumed between epochs."""

    def __init__(self, model: Model, config: TrainConfig | None = None):
        self.model = model
        self.config = (config or TrainConfig()).validate()
        self.optimizer = Adam(model.parameters(), lr=self.config.lr)
        self.scheduler = ReduceLROnPlateau(self.optimizer, self.config.lr_factor,
                                           self.config.lr_patience, self.config.min_lr,
                                           self.config.min_delta)
        self.stopper = EarlyStopping(self.config.early_stop_patience, self.config.min_delta)
        self.history = TrainHistory()
        self.best_state: dict[str, np.ndarray] | None = None
        self.epoch = 0

    def _rng(self, purpose: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, self.epoch, purpose])

    def run_epoch(self, train: Sequence, val: Sequence) -> tuple[EpochRecord, bool]:
        cfg = self.config
        model = self.model
        lr_used = self.optimizer.lr
        dropout_rng = self._rng(1)
        seen, total_loss, correct = 0, 0.0, 0
        batches = iter_batches(train, cfg.batch_size, shuffle_seed=int(self._rng(0).integers(2**32)),
                               channels=model.config.channels,
                               augment_params=cfg.augment_config(), augment_rng=self._rng(2))
        for b, (images, labels) in enumerate(batches):
            self.optimizer.zero_grad()
            try:
                probs = model.forward(images, "train", dropout_rng)
                loss = cross_entropy_loss(probs, labels)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {self.epoch} batch {b}: {exc}") from exc
            loss.backward()
            try:
                self.optimizer.step()
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {self.epoch} batch {b}: {exc}") from exc
            n = len(labels)
            seen += n
            total_loss += loss.item() * n
            correct += int((probs.data.argmax(axis=1) == labels).sum())
        val_loss, val_acc = validation_pass(model, val, cfg.batch_size)
        record = EpochRecord(self.epoch, total_loss / seen, correct / seen, val_loss, val_acc, lr_used)
        self.history.records.append(record)
        improved, stop = self.stopper.step(self.epoch, val_loss)
        if improved:
            self.best_state = model.state_dict()
            self.history.best_epoch = self.epoch
        self.scheduler.step(val_loss)
        log.info("epoch %d loss %.4f acc %.4f val_loss %.4f val_acc %.4f lr %.2e",
                 self.epoch, record.train_loss, record.train_acc, val_loss, val_acc, lr_used)
        self.epoch += 1
        return record, stop

    def fit(self, train: Sequence, val: Sequence) -> tuple[Model, TrainHistory]:
        if len(train) == 0 or len(val) == 0:
            raise EmptyInputError("training needs non-empty train and validation splits")
        while self.epoch < self.config.epochs:
            _, stop = self.run_epoch(train, val)
            if stop:
                self.history.stop_reason = "early_stopping"
                break
        else:
            self.history.stop_reason = "max_epochs"
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)
        return self.model, self.history

    # -- state for checkpoints ---------------------------------------
    def trainer_state(self) -> dict:
        return {
            "epoch": self.epoch,
            "optimizer": self.optimizer.state(),
            "scheduler": {"best": self.scheduler.best, "wait": self.scheduler.wait},
            "stopper": {"best": self.stopper.best, "best_epoch": self.stopper.best_epoch,
                        "wait": self.stopper.wait},
            "history": [asdict(r) for r in self.history.records],
            "best_epoch": self.history.best_epoch,
            "stop_reason": self.history.stop_reason,
            "train_config": asdict(self.config),
        }

    def restore_state(self, state: dict, moments: dict[str, dict[str, np.ndarray]] | None = None) -> None:
        self.epoch = state["epoch"]
        opt = state["optimizer"]
        self.optimizer.t = opt["t"]
        self.optimizer.lr = opt["lr"]
        self.scheduler.best = state["scheduler"]["best"]
        self.scheduler.wait = state["scheduler"]["wait"]
        self.stopper.best = state["stopper"]["best"]
        self.stopper.best_epoch = state["stopper"]["best_epoch"]
        self.stopper.wait = state["stopper"]["wait"]
        self.history = TrainHistory([EpochRecord(**r) for r in state["history"]],
                                    state["best_epoch"], state["stop_reason"])
        if moments:
            for name in self.optimizer.m:
                self.optimizer.m[name][...] = moments["m"][name]
                self.optimizer.v[name][...] = moments["v"][name]


def train(model: Model, data, config: TrainConfig | None = None) -> tuple[Model, TrainHistory]:
    """Train with Adam and return the best-validation snapshot plus history.

    ``data`` is a :class:`DatasetSplit` or a ``(train, val)`` pair of sample lists.
    """
    train_samples, val_samples = _as_split(data)
    return Trainer(model, config).fit(train_samples, val_samples)


def evaluate(model: Model, samples: Sequence, batch_size: int = 32) -> list:
    """Infer-mode predictions for ``samples`` in their given order."""
    from .ensemble import Prediction

    if len(samples) == 0:
        raise EmptyInputError("cannot evaluate an empty split")
    out: list[Prediction] = []
    with ad.no_grad():
        start = 0
        for images, labels in iter_batches(samples, batch_size, None, channels=model.config.channels):
            probs = model.forward(images, "infer").data
            for row, label, s in zip(probs, labels, samples[start:start + len(labels)]):
                out.append(Prediction(row.copy(), int(label), getattr(s, "sample_id", str(start))))
            start += len(labels)
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"HYADCKPT"
CHECKPOINT_VERSION = 1


def _write_blob(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_blob(buf: io.BytesIO) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<H", _take(buf, 2))
    name = _take(buf, n).decode("utf-8")
    (rank,) = struct.unpack("<B", _take(buf, 1))
    shape = struct.unpack(f"<{rank}I", _take(buf, 4 * rank))
    count = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(_take(buf, 8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return name, arr


def _take(buf: io.BytesIO, n: int) -> bytes:
    chunk = buf.read(n)
    if len(chunk) != n:
        raise CheckpointError("checkpoint file is truncated")
    return chunk


def _write_section(buf: io.BytesIO, blobs: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        _write_blob(buf, name, arr)


def _read_section(buf: io.BytesIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _take(buf, 4))
    return dict(_read_blob(buf) for _ in range(count))


def _write_text(buf: io.BytesIO, text: str) -> None:
    data = text.encode("utf-8")
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def _read_text(buf: io.BytesIO) -> str:
    (n,) = struct.unpack("<I", _take(buf, 4))
    return _take(buf, n).decode("utf-8")


def save_checkpoint(model: Model, state: Trainer | None, path: str | Path) -> Path:
    """Write config, parameters, buffers and (optionally) optimiser/schedule state."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _write_text(buf, model.config.to_text())
    _write_section(buf, {n: p.data for n, p in model.parameters().items()})
    _write_section(buf, model.buffers())
    if state is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        _write_text(buf, json.dumps(state.trainer_state()))
        _write_section(buf, {f"m:{n}": a for n, a in state.optimizer.m.items()})
        _write_section(buf, {f"v:{n}": a for n, a in state.optimizer.v.items()})
        _write_section(buf, state.best_state or {})
    path = Path(path)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path, num_classes: int | None = None,
                    expected_config: ModelConfig | None = None) -> tuple[Model, Trainer | None]:
    """Rebuild the model (and trainer state, if stored) from ``path``."""
    try:
        buf = io.BytesIO(Path(path).read_bytes())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack("<I", _take(buf, 4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    config = ModelConfig.from_text(_read_text(buf))
    if num_classes is not None and config.num_classes != num_classes:
        raise CheckpointError(f"checkpoint has {config.num_classes} classes, expected {num_classes}")
    if expected_config is not None and expected_config != config:
        raise CheckpointError("checkpoint config does not match the expected model config")
    model = build_model(config)
    params = _read_section(buf)
    buffers = _read_section(buf)
    state = dict(params)
    state.update({f"buffer:{k}": v for k, v in buffers.items()})
    try:
        model.load_state_dict(state)
    except Exception as exc:
        raise CheckpointError(f"checkpoint parameters do not fit config: {exc}") from exc
    trainer = None
    if _take(buf, 1) == b"\x01":
        tstate = json.loads(_read_text(buf))
        m = {k[2:]: v for k, v in _read_section(buf).items()}
        v = {k[2:]: v for k, v in _read_section(buf).items()}
        trainer = Trainer(model, TrainConfig(**tstate["train_config"]))
        opt = tstate["optimizer"]
        trainer.optimizer.beta1, trainer.optimizer.beta2, trainer.optimizer.eps = (
            opt["beta1"], opt["beta2"], opt["eps"])
        trainer.restore_state(tstate, {"m": m, "v": v})
        trainer.best_state = _read_section(buf) or None
    return model, trainer
