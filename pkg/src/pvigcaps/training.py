"""Optimisation, learning-rate schedule, evaluation metrics and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ConfigError, ContractError, DivergenceError
from .model import PViGNet, cross_entropy  # noqa: F401  (re-exported)
from .tensor import Tape, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 75
    batch_size: int = 32
    lr: float = 2e-3
    start_lr: float = 1e-6
    warmup_epochs: float = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    loss: str = "auto"
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5
    augment: bool = True
    train_acc: str = "running"
    seed: int = 0
    precision: str = "f64"

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch size >= 1")
        if self.epochs and not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup ({self.warmup_epochs}) must be shorter than the run ({self.epochs} epochs)")
        if self.lr <= 0 or self.start_lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("learning rates and eps must be positive, weight decay non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.loss not in ("auto", "margin", "cross-entropy"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.train_acc not in ("running", "eval"):
            raise ConfigError(f"train_acc must be 'running' or 'eval', got {self.train_acc!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- schedule and optimiser


def lr_at(epoch: float, config: TrainConfig) -> float:
    """Linear warmup from ``start_lr`` to ``lr``, then cosine decay back to ``start_lr``."""
    lo, hi, warm = config.start_lr, config.lr, config.warmup_epochs
    if epoch < warm:
        return lo + (hi - lo) * epoch / warm
    span = config.epochs - warm
    t = min(max((epoch - warm) / span, 0.0), 1.0) if span > 0 else 1.0
    return lo + (hi - lo) * (1.0 + math.cos(math.pi * t)) / 2.0


@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, grads: dict, state: OptState, lr: float, config: TrainConfig) -> OptState:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    ``params`` maps names to tensors, ``grads`` names to arrays; a missing
    gradient counts as zero.
    """
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data * (1.0 - lr * config.weight_decay)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return state


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    confusion: np.ndarray
    class_names: tuple[str, ...]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    flags: list[str]

    @property
    def samples(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.confusion.sum())

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1))

    def to_text(self) -> str:
        lines = ["[summary]", f"samples = {self.samples}", f"accuracy = {self.accuracy:.12g}",
                 f"macro_f1 = {self.macro_f1:.12g}", "", "[per_class]",
                 "# class precision recall f1 support flags"]
        for i, name in enumerate(self.class_names):
            flag = ",".join(f.split(":", 1)[1] for f in self.flags if f.startswith(f"{name}:")) or "-"
            lines.append(f"{name} {self.precision[i]:.12g} {self.recall[i]:.12g} {self.f1[i]:.12g} "
                         f"{int(self.support[i])} {flag}")
        lines += ["", "[confusion]", "# rows = true class, columns = predicted class"]
        lines += [" ".join(str(int(v)) for v in row) for row in self.confusion]
        return "\n".join(lines) + "\n"


def _ratio(num, den):
    return (num / den) if den else 0.0


def metrics_from_confusion(confusion, class_names=None) -> MetricsReport:
    """One-vs-rest precision/recall/F1 per class; zero denominators give 0 and a flag."""
    cm = np.asarray(confusion, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ContractError(f"confusion matrix must be square, got {cm.shape}")
    if cm.sum() == 0:
        raise ContractError("no samples to evaluate")
    c = cm.shape[0]
    names = tuple(class_names) if class_names is not None else tuple(f"class_{i}" for i in range(c))
    precision, recall, f1, flags = np.zeros(c), np.zeros(c), np.zeros(c), []
    for k in range(c):
        tp = cm[k, k]
        fp = cm[:, k].sum() - tp
        fn = cm[k, :].sum() - tp
        if tp + fp == 0:
            flags.append(f"{names[k]}:precision_undefined")
        if tp + fn == 0:
            flags.append(f"{names[k]}:recall_undefined")
        precision[k] = _ratio(tp, tp + fp)
        recall[k] = _ratio(tp, tp + fn)
        if precision[k] + recall[k] == 0:
            flags.append(f"{names[k]}:f1_undefined")
        f1[k] = _ratio(2 * precision[k] * recall[k], precision[k] + recall[k])
    return MetricsReport(cm, names, precision, recall, f1, cm.sum(axis=1), flags)


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def metrics_from_predictions(y_true, y_pred, num_classes: int, class_names=None) -> MetricsReport:
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, num_classes), class_names)


# ---------------------------------------------------------------- evaluation and training


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def run_inference(model: PViGNet, dataset, batch_size: int = 32, loss_kind: str | None = None,
                  margins=(0.9, 0.1, 0.5)):
    """Eval-mode scores for every sample plus the mean loss."""
    scores, total = [], 0.0
    for idx in _batches(len(dataset), batch_size):
        images, labels = dataset.batch(idx)
        out = model(images, training=False)
        total += model.loss(out, labels, loss_kind, margins).item() * len(idx)
        scores.append(model.scores(out).data)
    return np.concatenate(scores), total / len(dataset)


def evaluate(model: PViGNet, dataset, batch_size: int = 32, class_names=None) -> MetricsReport:
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    scores, _ = run_inference(model, dataset, batch_size)
    names = class_names or _class_names(model, dataset)
    return metrics_from_predictions(dataset.labels, scores.argmax(axis=1), model.config.num_classes, names)


def _class_names(model, dataset):
    names = tuple(getattr(dataset, "class_names", ()) or ())
    c = model.config.num_classes
    return names if len(names) == c else tuple(f"class_{i}" for i in range(c))


@dataclass
class HistoryRow:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainResult:
    history: list[HistoryRow]
    best_state: dict[str, np.ndarray]
    best_epoch: int
    opt_state: OptState
    rng_state: dict

    @property
    def best_val_acc(self) -> float | None:
        rows = [r for r in self.history if r.epoch == self.best_epoch]
        return rows[0].val_acc if rows else None


def _snapshot(model) -> dict[str, np.ndarray]:
    return {k: np.array(v, copy=True) for k, v in model.state_dict().items()}


def train(model: PViGNet, train_set, val_set, config: TrainConfig, on_epoch=None,
          stop_after: int | None = None) -> TrainResult:
    """Mini-batch AdamW training with per-epoch learning rate.

    The best state is chosen by validation accuracy (earliest epoch on
    ties); without a validation set, training accuracy is used.  Training
    accuracy is either the running accuracy of the training batches or, with
    ``train_acc="eval"``, an eval-mode pass over the un-augmented training
    split.  ``stop_after`` ends the run early without changing the schedule.
    """
    config.validate()
    if len(train_set) == 0:
        raise ContractError("training set is empty")
    if val_set is not None and set(train_set.ids) & set(val_set.ids):
        raise ContractError("train and validation splits overlap")
    loss_kind = None if config.loss == "auto" else config.loss
    margins = (config.m_plus, config.m_minus, config.lam)
    params = dict(model.named_parameters())
    state = OptState()
    rng = np.random.default_rng(config.seed)
    history: list[HistoryRow] = []
    best_state, best_epoch, best_acc = _snapshot(model), -1, -1.0

    for epoch in range(config.epochs if stop_after is None else min(stop_after, config.epochs)):
        lr = lr_at(epoch, config)
        order = rng.permutation(len(train_set))
        loss_sum, correct = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            images, labels = train_set.batch(idx, config.seed if config.augment else None, epoch)
            with Tape():
                out = model(images, training=True)
                loss = model.loss(out, labels, loss_kind, margins)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, b, value)
            grads = backward(loss)
            adamw_step(params, {n: grads[p] for n, p in params.items() if p in grads}, state, lr, config)
            loss_sum += value * len(idx)
            correct += int((model.scores(out).data.argmax(axis=1) == labels).sum())
        train_loss, train_acc = loss_sum / len(train_set), correct / len(train_set)
        if config.train_acc == "eval":
            scores, _ = run_inference(model, train_set, config.batch_size, loss_kind, margins)
            train_acc = float((scores.argmax(axis=1) == train_set.labels).mean())
        if val_set is not None and len(val_set):
            scores, val_loss = run_inference(model, val_set, config.batch_size, loss_kind, margins)
            val_acc = float((scores.argmax(axis=1) == val_set.labels).mean())
        else:
            val_loss, val_acc = float("nan"), float("nan")
        row = HistoryRow(epoch, lr, train_loss, train_acc, val_loss, val_acc)
        history.append(row)
        select = val_acc if val_set is not None and len(val_set) else train_acc
        if select > best_acc:
            best_acc, best_epoch, best_state = select, epoch, _snapshot(model)
        log.info("epoch %d lr %.3g loss %.4f acc %.3f val_loss %.4f val_acc %.3f",
                 epoch, lr, train_loss, train_acc, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(history, best_state, best_epoch, state, rng.bit_generator.state)


__all__ = ["TrainConfig", "OptState", "adamw_step", "lr_at", "cross_entropy", "MetricsReport",
           "metrics_from_confusion", "metrics_from_predictions", "confusion_matrix", "evaluate",
           "run_inference", "train", "TrainResult", "HistoryRow"]
