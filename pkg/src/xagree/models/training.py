"""Mini-batch training with Adam/AMSGrad and early stopping on validation accuracy."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import ConfigError, ContractError, TrainingError
from ..tensor import Tape, log_softmax
from .base import Classifier, TokenSequence

log = logging.getLogger(__name__)

ACTIVATIONS = ("softmax", "uniform")


@dataclass
class TrainingConfig:
    max_epochs: int = 40
    patience: int = 5
    learning_rate: Optional[float] = None  # None: the architecture's default
    batch_size: int = 32
    seed: int = 0
    amsgrad: bool = True
    attention_activation: str = "softmax"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = 5.0

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ConfigError(f"patience {self.patience} must lie in [0, max_epochs={self.max_epochs}]")
        if self.attention_activation not in ACTIVATIONS:
            raise ConfigError(f"attention_activation must be one of {ACTIVATIONS}")


@dataclass
class TrainingHistory:
    train_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    best_epoch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adam, optionally with the AMSGrad running maximum of second moments."""

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, amsgrad=False):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps, self.amsgrad = lr, beta1, beta2, eps, amsgrad
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v_max = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, clip_norm: Optional[float] = None) -> None:
        self.t += 1
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        if clip_norm is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > clip_norm:
                grads = {k: g * (clip_norm / norm) for k, g in grads.items()}
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            v = self.v[k]
            if self.amsgrad:
                self.v_max[k] = np.maximum(self.v_max[k], v)
                v = self.v_max[k]
            p.data = p.data - self.lr * (self.m[k] / corr1) / (np.sqrt(v / corr2) + self.eps)


def accuracy(model: Classifier, data: Sequence[TokenSequence]) -> float:
    if not data:
        return 0.0
    pred = model.predict(list(data))
    return float(np.mean(pred == np.array([s.label for s in data])))


def train(model: Classifier, train_data: Sequence[TokenSequence], val_data: Sequence[TokenSequence],
          cfg: TrainingConfig) -> tuple:
    """Train in place and restore the best-validation-accuracy weights.

    Stops once ``patience`` epochs pass without improvement (``patience=0``
    therefore runs a single epoch).  ``cfg.seed`` drives shuffling; parameter
    initialisation is fixed by the seed the model was built with.

    Returns ``(model, history)``.
    """
    train_data = list(train_data)
    val_data = list(val_data) or train_data
    if not train_data:
        raise ContractError("training set is empty")
    labels = np.array([s.label for s in train_data + val_data])
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ContractError(f"labels outside [0, {model.num_classes})")

    model.attention_activation = cfg.attention_activation
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate if cfg.learning_rate is not None else model.default_lr
    opt = Adam(model.params, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.amsgrad)
    history = TrainingHistory()
    best_acc, best_state = -1.0, model.state()

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_data))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_data[i] for i in order[start:start + cfg.batch_size]]
            batch = model.encode(chunk)
            with Tape() as tape:
                logits, _ = model.forward_batch(batch)
                picked = log_softmax(logits, axis=-1)[np.arange(batch.size), batch.labels]
                loss = -picked.mean()
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError("loss is not finite", epoch)
            tape.backward(loss)
            opt.step(cfg.clip_norm)
            total += value * batch.size
            count += batch.size
        val_acc = accuracy(model, val_data)
        history.train_loss.append(total / count)
        history.val_accuracy.append(val_acc)
        log.debug("epoch %d loss %.4f val_acc %.4f", epoch, total / count, val_acc)
        if val_acc > best_acc:
            best_acc, best_state, history.best_epoch = val_acc, model.state(), epoch
        if epoch - history.best_epoch >= cfg.patience:
            break
    model.load_state(best_state)
    return model, history


def ablate_uniform(model: Classifier) -> Classifier:
    """Copy of ``model`` whose attention is uniform over non-padding positions."""
    other = model.copy()
    other.attention_activation = "uniform"
    return other
