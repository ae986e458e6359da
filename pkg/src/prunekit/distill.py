"""Teacher-to-student distillation losses and the epoch loop.

The default loss, per answer position: KL(teacher softmax || student
softmax) plus a gamma-weighted hinge pushing the student's log-probability
of the correct token above its best competing token. Scores in the hinge
are log-probabilities (shift-invariant in the logits, bounded gradients).

Variants, switchable for ablations:

    kl_only      KL term alone
    kl_pairwise  KL + gamma * hinge (default)
    hard_label   KL + dataset-label cross-entropy as extra supervision

The teacher is frozen: its parameters are read, never written.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import ModelState, forward
from .optim import AdamW, cosine_lr
from .taskgen import Dataset
from .tensor import (
    ComputeGraph,
    ContractError,
    DimensionError,
    NumericError,
    Tensor,
    add,
    gather_last,
    index_rows,
    kl_divergence,
    log_softmax,
    max_last,
    mul,
    relu,
    reshape,
    sub,
    sum_all,
)

LOSS_VARIANTS = ("kl_only", "kl_pairwise", "hard_label")


@dataclass
class DistillConfig:
    gamma: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 2
    cosine_schedule: bool = True
    loss_variant: str = "kl_pairwise"
    correct_from: str = "dataset"  # or "teacher_argmax"
    weight_decay: float = 0.01

    def validate(self):
        if self.gamma < 0:
            raise ContractError("gamma must be >= 0")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be > 0")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ContractError(f"loss_variant must be one of {LOSS_VARIANTS}")


def _hinge_sum(student_lsm: Tensor, correct_tokens: np.ndarray) -> Tensor:
    """sum over rows of max(0, best-other log-prob - correct log-prob)."""
    correct_lp = gather_last(student_lsm, correct_tokens)
    block = np.zeros(student_lsm.shape, dtype=np.float32)
    np.put_along_axis(block, correct_tokens[..., None], np.float32(-1e9), axis=-1)
    top_other = max_last(add(student_lsm, block))
    return sum_all(relu(sub(top_other, correct_lp)))


def distill_loss(student_logits: Tensor, teacher_logits, correct_tokens,
                 gamma: float) -> Tensor:
    """Positionwise KL plus gamma-weighted pairwise hinge, summed over rows.

    ``student_logits`` is [L, V] (or any [..., V]); ``correct_tokens`` holds
    the matching int ids. With gamma == 0 the result is the bare KL sum.
    """
    correct_tokens = np.asarray(correct_tokens)
    if correct_tokens.shape != tuple(student_logits.shape[:-1]):
        raise DimensionError(
            f"correct_tokens shape {correct_tokens.shape} does not match "
            f"logits {student_logits.shape}"
        )
    v = student_logits.shape[-1]
    if correct_tokens.size and (correct_tokens.min() < 0 or correct_tokens.max() >= v):
        raise ContractError("correct token id out of range")
    kl = kl_divergence(student_logits, teacher_logits)
    if gamma == 0.0:
        return kl
    hinge = _hinge_sum(log_softmax(student_logits), correct_tokens)
    return add(kl, mul(hinge, float(gamma)))


def hard_label_loss(student_logits: Tensor, correct_tokens) -> Tensor:
    """Per-position cross-entropy against dataset labels, summed over rows."""
    correct_tokens = np.asarray(correct_tokens)
    if correct_tokens.shape != tuple(student_logits.shape[:-1]):
        raise DimensionError(
            f"correct_tokens shape {correct_tokens.shape} does not match "
            f"logits {student_logits.shape}"
        )
    v = student_logits.shape[-1]
    if correct_tokens.size and (correct_tokens.min() < 0 or correct_tokens.max() >= v):
        raise ContractError("correct token id out of range")
    picked = gather_last(log_softmax(student_logits), correct_tokens)
    return mul(sum_all(picked), -1.0)


def _answer_logits(model: ModelState, inputs: np.ndarray, flat_rows: np.ndarray) -> Tensor:
    """Logits at the answer positions only, as a [M, V] tensor."""
    logits = forward(model, inputs)
    n, t = inputs.shape
    flat = reshape(logits, (n * t, model.config.vocab_size))
    return index_rows(flat, flat_rows)


def batch_distill_loss(model: ModelState, teacher_logits: np.ndarray,
                       inputs: np.ndarray, flat_rows: np.ndarray,
                       correct: np.ndarray, cfg: DistillConfig,
                       n_samples: int) -> Tensor:
    """Variant-dispatched distillation loss for one batch, averaged over
    samples (positionwise terms are summed within each sample)."""
    student = _answer_logits(model, inputs, flat_rows)
    scale = 1.0 / float(n_samples)
    if cfg.loss_variant == "kl_only":
        total = kl_divergence(student, teacher_logits)
    elif cfg.loss_variant == "kl_pairwise":
        total = distill_loss(student, teacher_logits, correct, cfg.gamma)
    else:  # hard_label
        total = add(
            kl_divergence(student, teacher_logits),
            hard_label_loss(student, correct),
        )
    return mul(total, scale)


@dataclass
class DistillResult:
    model: ModelState
    epochs_run: int
    diverged: bool
    epoch_losses: list[float] = field(default_factory=list)
    wall_time: float = 0.0


def distill_epochs(student: ModelState, teacher: ModelState, dataset: Dataset,
                   cfg: DistillConfig, seed: int = 0,
                   epochs: int | None = None) -> DistillResult:
    """Run E epochs of mini-batch distillation; updates ``student`` in place.

    Teacher logits are computed fresh per batch (no caching). On a
    non-finite loss the last finite epoch snapshot is restored and the
    result is flagged diverged.
    """
    cfg.validate()
    e = cfg.epochs if epochs is None else epochs
    t0 = time.perf_counter()
    if e == 0:
        return DistillResult(student, 0, False, [], 0.0)

    inputs_all, targets_all, weights_all = dataset.training_arrays()
    n, t = targets_all.shape
    opt = AdamW(student.params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    steps_per_epoch = (dataset.n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = e * steps_per_epoch
    step = 0
    snapshot = {k: p.data.copy() for k, p in student.params.items()}
    losses: list[float] = []

    for epoch in range(e):
        order = np.random.default_rng(
            np.random.SeedSequence([seed, 0xD157, epoch])
        ).permutation(dataset.n)
        epoch_loss = 0.0
        try:
            for start in range(0, dataset.n, cfg.batch_size):
                rows = order[start : start + cfg.batch_size]
                inputs = inputs_all[rows]
                weights = weights_all[rows]
                flat_rows = np.flatnonzero(weights.reshape(-1))
                teacher_flat = forward(teacher, inputs).data.reshape(-1, teacher.config.vocab_size)
                teacher_logits = teacher_flat[flat_rows]
                if cfg.correct_from == "teacher_argmax":
                    correct = teacher_logits.argmax(axis=-1)
                else:
                    correct = targets_all[rows].reshape(-1)[flat_rows]
                if cfg.cosine_schedule:
                    opt.lr = cosine_lr(cfg.learning_rate, step, total_steps)
                opt.zero_grad()
                with ComputeGraph() as g:
                    loss = batch_distill_loss(
                        student, teacher_logits, inputs, flat_rows, correct,
                        cfg, len(rows),
                    )
                # A bitwise-zero loss sits at the exact minimum of both
                # nonnegative terms: the true gradient is zero and any
                # computed residue is roundoff, which Adam would blow up
                # into a full-size step. Nothing to learn; skip.
                if loss.item() != 0.0:
                    g.backward(loss)
                    opt.step()
                epoch_loss += loss.item() * len(rows)
                step += 1
        except NumericError:
            for k, p in student.params.items():
                p.data = snapshot[k].copy()
            student.zero_grads()
            return DistillResult(
                student, epoch, True, losses, time.perf_counter() - t0
            )
        losses.append(epoch_loss / dataset.n)
        snapshot = {k: p.data.copy() for k, p in student.params.items()}
    student.zero_grads()
    return DistillResult(student, e, False, losses, time.perf_counter() - t0)
