"""Plain cross-entropy training loop for the teacher model."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import ModelState, forward
from .optim import AdamW, cosine_lr
from .taskgen import Dataset, accuracy
from .tensor import ComputeGraph, ContractError, cross_entropy, reshape


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 256
    target_accuracy: float = 0.99
    weight_decay: float = 0.01
    cosine_schedule: bool = True


@dataclass
class TrainResult:
    model: ModelState
    epochs_run: int
    history: list[dict] = field(default_factory=list)
    wall_time: float = 0.0


def train_teacher(model: ModelState, dataset: Dataset, eval_set: Dataset,
                  cfg: TrainConfig, seed: int = 0) -> TrainResult:
    """Next-token cross-entropy on answer positions until the accuracy bar
    or the epoch budget is hit. Updates ``model`` in place."""
    if dataset.n == 0:
        raise ContractError("training needs a non-empty dataset")
    inputs_all, targets_all, weights_all = dataset.training_arrays()
    opt = AdamW(model.params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    steps_per_epoch = (dataset.n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    history: list[dict] = []
    t0 = time.perf_counter()
    epochs_run = 0

    for epoch in range(cfg.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([seed, 0x7E, epoch])
        ).permutation(dataset.n)
        epoch_loss = 0.0
        for start in range(0, dataset.n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            inputs = inputs_all[rows]
            targets = targets_all[rows]
            weights = weights_all[rows]
            if cfg.cosine_schedule:
                opt.lr = cosine_lr(cfg.learning_rate, step, total_steps)
            opt.zero_grad()
            with ComputeGraph() as g:
                logits = forward(model, inputs)
                n, t = targets.shape
                flat = reshape(logits, (n * t, model.config.vocab_size))
                loss = cross_entropy(flat, targets.reshape(-1), weights.reshape(-1))
            g.backward(loss)
            opt.step()
            epoch_loss += loss.item() * len(rows)
            step += 1
        epochs_run = epoch + 1
        acc = accuracy(model, eval_set).overall
        history.append(
            {"epoch": epoch, "loss": epoch_loss / dataset.n, "accuracy": acc}
        )
        if acc >= cfg.target_accuracy:
            break
    model.zero_grads()
    return TrainResult(model, epochs_run, history, time.perf_counter() - t0)
