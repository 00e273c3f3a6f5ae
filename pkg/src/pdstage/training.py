"""Loss, Nadam optimizer and the epoch loop with early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .model import HybridModel, get_state, set_state
from .numerics import Tensor, as_tensor, backward, clamp_min, getitem, log, neg, reduce

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class TrainingDivergence(RuntimeError):
    """Loss became non-finite; carries where it happened."""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


def cross_entropy(probabilities: Tensor, labels) -> Tensor:
    """Mean of ``-ln p[label]`` with probabilities floored at 1e-12."""
    probabilities = as_tensor(probabilities)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, classes = probabilities.shape
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for {n} predictions")
    bad = (labels < 0) | (labels >= classes)
    if bad.any():
        raise ValueError(f"label {int(labels[bad][0])} outside [0, {classes})")
    picked = getitem(probabilities, (np.arange(n), labels))
    return neg(reduce("mean", log(clamp_min(picked, PROB_FLOOR))))


# ----------------------------------------------------------------------------
# Nadam


@dataclass
class NadamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    n: Dict[str, np.ndarray] = field(default_factory=dict)


def nadam_step(state: NadamState, params: Dict[str, Tensor]) -> None:
    """One Nesterov-Adam update of every tensor in ``params`` from its ``grad``.

    With step counter ``t`` (after increment)::

        m = b1 m + (1 - b1) g;   n = b2 n + (1 - b2) g^2
        m_hat = m / (1 - b1^(t+1));   n_hat = n / (1 - b2^t)
        theta -= lr (b1 m_hat + (1 - b1) g / (1 - b1^t)) / (sqrt(n_hat) + eps)
    """
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        if p.grad.shape != p.shape:
            raise ValueError(f"gradient shape {p.grad.shape} != parameter shape {p.shape} for {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    m_corr = 1.0 - b1 ** (t + 1)
    g_corr = 1.0 - b1 ** t
    n_corr = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.n[name] = np.zeros(p.shape)
        n = state.n[name]
        m *= b1
        m += (1.0 - b1) * g
        n *= b2
        n += (1.0 - b2) * (g * g)
        m_hat = m / m_corr
        n_hat = n / n_corr
        p.data -= state.learning_rate * (b1 * m_hat + (1.0 - b1) * g / g_corr) / (np.sqrt(n_hat) + state.epsilon)


# ----------------------------------------------------------------------------
# configuration and history


@dataclass
class TrainConfig:
    batch_size: int = 150
    max_epochs: int = 30
    dropout_rate: float = 0.1
    patience: int = 5
    monitor: str = "val_loss"
    seed: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    validation_fraction: float = 0.1

    def problems(self) -> List[str]:
        found = []
        if self.batch_size < 1:
            found.append("batch_size must be >= 1")
        if self.patience < 1:
            found.append("patience must be >= 1")
        if self.max_epochs < 0:
            found.append("max_epochs must be >= 0")
        if self.monitor not in ("val_loss", "loss"):
            found.append("monitor must be 'val_loss' or 'loss'")
        if not 0.0 <= self.dropout_rate < 1.0:
            found.append("dropout_rate must lie in [0, 1)")
        if not 0.0 <= self.validation_fraction < 1.0:
            found.append("validation_fraction must lie in [0, 1)")
        return found

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainingHistory:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.epochs)

    def column(self, name: str) -> List[float]:
        return [getattr(e, name) for e in self.epochs]

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,train_acc,val_loss,val_acc"]
        for e in self.epochs:
            lines.append(
                f"{e.epoch},{e.train_loss:.6f},{e.train_acc:.6f},{e.val_loss:.6f},{e.val_acc:.6f}"
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "TrainingHistory":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), *(float(r[k]) for k in
                    ("train_loss", "train_acc", "val_loss", "val_acc"))) for r in rows])


class EarlyStopping:
    """Tracks the monitored loss; ``update`` returns True when training should
    stop (no strict improvement for ``patience`` consecutive epochs)."""

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best = math.inf
        self.best_epoch: Optional[int] = None
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.bad_epochs == 0


# ----------------------------------------------------------------------------
# loop

SegmentsLike = Union[Tuple[np.ndarray, np.ndarray], Sequence]


def as_arrays(segments: SegmentsLike) -> Tuple[np.ndarray, np.ndarray]:
    """``(values, labels)`` from a list of segments or an ``(X, y)`` pair."""
    if isinstance(segments, tuple) and len(segments) == 2 and isinstance(segments[0], np.ndarray):
        x, y = segments
        return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)
    segments = list(segments)
    if not segments:
        return np.empty((0, 0, 0)), np.empty(0, dtype=np.int64)
    x = np.stack([s.values for s in segments]).astype(np.float64, copy=False)
    y = np.array([s.label for s in segments], dtype=np.int64)
    return x, y


def predict_proba(model: HybridModel, x: np.ndarray, batch_size: int = 150) -> np.ndarray:
    """Inference-mode class probabilities for an array of segments."""
    out = []
    for lo in range(0, len(x), batch_size):
        out.append(model(Tensor(x[lo:lo + batch_size]), training=False).data)
    if not out:
        return np.empty((0, model.config.class_count))
    return np.concatenate(out)


def evaluate(model: HybridModel, x: np.ndarray, y: np.ndarray, batch_size: int = 150) -> Tuple[float, float]:
    """Inference-mode ``(mean cross-entropy, accuracy)``."""
    probs = predict_proba(model, x, batch_size)
    picked = np.maximum(probs[np.arange(len(y)), y], PROB_FLOOR)
    return float(-np.log(picked).mean()), float((probs.argmax(axis=1) == y).mean())


def fit(model: HybridModel, train_segments: SegmentsLike, val_segments: Optional[SegmentsLike],
        config: TrainConfig, on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainingHistory:
    """Train with shuffled mini-batches and Nadam, early-stop on the monitored
    loss, and leave the model holding its best-epoch parameters."""
    problems = config.problems()
    if problems:
        raise ValueError("invalid train config: " + "; ".join(problems))
    x, y = as_arrays(train_segments)
    if len(x) == 0:
        raise ValueError("training set is empty")
    if val_segments is not None:
        vx, vy = as_arrays(val_segments)
        if len(vx) == 0:
            vx = None
    else:
        vx = None
    monitor = config.monitor if vx is not None else "loss"

    history = TrainingHistory()
    if config.max_epochs == 0:
        return history

    model.dropout_rate = config.dropout_rate
    for block in model.temporal + model.spatial:
        block.dropout_rate = config.dropout_rate
    params = model.parameters()
    state = NadamState(config.learning_rate, config.beta1, config.beta2, config.epsilon)
    rng = np.random.default_rng(config.seed)
    stopper = EarlyStopping(config.patience)
    best_state = get_state(model)

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(x))
        loss_sum, correct = 0.0, 0
        for b, lo in enumerate(range(0, len(x), config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            for p in params.values():
                p.grad = None
            probs = model(Tensor(x[idx]), training=True)
            loss = cross_entropy(probs, y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergence(epoch, b, value)
            backward(loss)
            nadam_step(state, params)
            loss_sum += value * len(idx)
            correct += int((probs.data.argmax(axis=1) == y[idx]).sum())
        train_loss, train_acc = loss_sum / len(x), correct / len(x)
        if vx is not None:
            val_loss, val_acc = evaluate(model, vx, vy, config.batch_size)
        else:
            val_loss, val_acc = math.nan, math.nan
        record = EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc)
        history.epochs.append(record)
        logger.info("epoch %d loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
                    epoch, train_loss, train_acc, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(record)

        watched = val_loss if monitor == "val_loss" else train_loss
        stop = stopper.update(epoch, watched)
        if stopper.improved_last:
            best_state = get_state(model)
        if stop:
            history.stopped_early = True
            break

    history.best_epoch = stopper.best_epoch
    set_state(model, best_state)
    return history
