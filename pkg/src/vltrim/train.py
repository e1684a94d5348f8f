"""Classifier training with label and/or distillation losses."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import NumericError
from .graph import ModelGraph
from .objectives import LogitPair, cross_entropy, kl_divergence_np, loss_distill
from .optim import Adam
from .synthworld import ClassificationSet
from .tensor import Tensor

log = logging.getLogger(__name__)


def predict_logits(model: ModelGraph, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for lo in range(0, len(images), batch_size):
            out.append(model.forward(Tensor(images[lo:lo + batch_size])).data)
    return np.concatenate(out)


def accuracy(model: ModelGraph, data: ClassificationSet) -> float:
    return float(np.mean(np.argmax(predict_logits(model, data.images), axis=1) == data.labels))


def eval_loss(model: ModelGraph, data: ClassificationSet, teacher_logits: Optional[np.ndarray], tau: float, task_weight: float) -> float:
    logits = predict_logits(model, data.images)
    total = 0.0
    if teacher_logits is not None:
        total += kl_divergence_np(teacher_logits, logits, tau)
    if teacher_logits is None or task_weight:
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        ce = -float(np.mean(logp[np.arange(len(data.labels)), data.labels]))
        total += ce if teacher_logits is None else task_weight * ce
    return total


@dataclass
class FitResult:
    epochs_run: int
    eval_losses: list[float] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)
    stopped_early: bool = False


def fit_classifier(
    model: ModelGraph,
    data: ClassificationSet,
    epochs: int,
    rng: np.random.Generator,
    lr: float = 1e-3,
    batch_size: int = 32,
    teacher: Optional[ModelGraph] = None,
    tau: float = 1.0,
    task_weight: float = 0.0,
    val: Optional[ClassificationSet] = None,
    plateau_tol: Optional[float] = None,
    plateau_epochs: int = 2,
    on_epoch: Optional[Callable[[int, float, float], None]] = None,
    max_steps: Optional[int] = None,
) -> FitResult:
    """Adam training on labels, or on the teacher's soft targets when given.

    With a teacher the loss is ``KL(teacher ‖ student) + task_weight·CE``.
    Teacher logits are computed once, without gradient. Training stops early
    when the validation loss moves less than ``plateau_tol`` over
    ``plateau_epochs`` epochs.
    """
    opt = Adam(model.parameters(), lr=lr)
    t_train = predict_logits(teacher, data.images) if teacher is not None else None
    t_val = predict_logits(teacher, val.images) if teacher is not None and val is not None else None
    result = FitResult(0)
    steps = 0
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        running, batches = 0.0, 0
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            logits = model.forward(Tensor(data.images[idx]))
            if t_train is not None:
                loss = loss_distill(LogitPair(t_train[idx], logits), tau)
                if task_weight:
                    loss = loss + T.scalar_mul(cross_entropy(logits, data.labels[idx]), task_weight)
            else:
                loss = cross_entropy(logits, data.labels[idx])
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += float(loss.data)
            batches += 1
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        result.epochs_run = epoch + 1
        result.train_losses.append(running / max(batches, 1))
        ev = eval_loss(model, val, t_val, tau, task_weight) if val is not None else result.train_losses[-1]
        result.eval_losses.append(ev)
        if on_epoch is not None:
            on_epoch(epoch, result.train_losses[-1], ev)
        if max_steps is not None and steps >= max_steps:
            break
        if (
            plateau_tol is not None
            and len(result.eval_losses) > plateau_epochs
            and abs(result.eval_losses[-1] - result.eval_losses[-1 - plateau_epochs]) < plateau_tol
        ):
            result.stopped_early = True
            break
    opt.zero_grad()
    return result
