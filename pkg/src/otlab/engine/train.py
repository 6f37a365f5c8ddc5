"""Classification training loop (the first training stage)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import Dataset, batches
from ..errors import DivergenceError
from ..validation import as_rng
from . import ops
from .model import Model, forward, trace
from .optim import Sgd, backward


@dataclass(frozen=True)
class Schedule:
    steps: int
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def train_classifier(model: Model, dataset: Dataset, schedule: Schedule, rng,
                     augment=None) -> list[tuple[int, float, float]]:
    """Train in place with softmax cross-entropy; returns (step, loss, accuracy) rows.

    ``augment`` is an optional callable ``(images, rng) -> images`` applied to
    each raw (N, H, W) batch before the forward pass. All randomness (batch
    order and augmentation) is drawn from the single ``rng`` in sequence, so
    a seed fixes the whole run.
    """
    rng = as_rng(rng)
    opt = Sgd(schedule.lr, schedule.momentum)
    rows: list[tuple[int, float, float]] = []
    step = 0
    while step < schedule.steps:
        for images, labels, _ids in batches(dataset, schedule.batch_size, rng):
            if step >= schedule.steps:
                break
            if augment is not None:
                images = augment(images, rng)
            run = trace(model, images[..., np.newaxis])
            loss_node, probs = ops.softmax_cross_entropy(run.logits, labels)
            loss = float(loss_node.value)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {step + 1}")
            grads = backward(run, loss_node)
            opt.step(model, grads)
            accuracy = float((probs.argmax(axis=1) == labels).mean())
            step += 1
            rows.append((step, loss, accuracy))
    return rows


def train_accuracy(model: Model, dataset: Dataset, batch_size: int = 256) -> float:
    """Fraction of dataset images the model classifies correctly."""
    correct = 0
    images = dataset.image_array()
    labels = dataset.label_array()
    for start in range(0, len(labels), batch_size):
        x = images[start:start + batch_size, :, :, np.newaxis]
        pred = np.argmax(forward(model, x), axis=1)
        correct += int((pred == labels[start:start + batch_size]).sum())
    return correct / max(len(labels), 1)
