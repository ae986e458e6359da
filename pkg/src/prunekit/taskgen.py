"""Synthetic five-task classification suite for pruning experiments.

Each sample is a token sequence: a prompt holding a block of feature tokens
plus a task-query token, followed by a short multi-token answer naming a
class. The answer is a deterministic function of one feature slot, chosen
per task, so a small transformer can learn every task essentially
perfectly — the point is to have a cheap, reproducible stand-in for a real
classification workload.

Token layout (vocab 512):

    0           PAD
    1           BOS
    2..6        per-task query tokens
    16..159     feature tokens, six slots with 24 values each
    192..311    answer tokens, per (task, answer position, class)

Everything is a pure function of seeds and sample indices.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import ModelState, forward
from .tensor import ContractError

VOCAB_SIZE = 512
PAD, BOS = 0, 1
QUERY_BASE = 2
N_SLOTS = 6
SLOT_VALUES = 24
FEATURE_BASE = 16
ANSWER_BASE = 192
MAX_CLASSES = 8
MAX_ANSWER_LEN = 3
PROMPT_LEN = 1 + N_SLOTS + 1  # BOS, features, query

TASK_NAMES = ("background_color", "manifestation", "content_class", "logo", "style")
_DEFAULT_CLASSES = (8, 8, 8, 6, 6)
_DEFAULT_ANSWER_LENS = (2, 2, 2, 3, 3)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    n_classes: int
    rule_seed: int
    answer_len: int = 2

    def __post_init__(self):
        if not (2 <= self.n_classes <= MAX_CLASSES):
            raise ContractError(f"n_classes must be in [2, {MAX_CLASSES}]")
        if not (1 <= self.answer_len <= MAX_ANSWER_LEN):
            raise ContractError(f"answer_len must be in [1, {MAX_ANSWER_LEN}]")


@dataclass(frozen=True)
class Sample:
    prompt_tokens: tuple
    answer_tokens: tuple
    task_id: int


def default_task_specs(rule_seed: int = 7) -> list[TaskSpec]:
    return [
        TaskSpec(task_id=t, n_classes=_DEFAULT_CLASSES[t], rule_seed=rule_seed,
                 answer_len=_DEFAULT_ANSWER_LENS[t])
        for t in range(len(TASK_NAMES))
    ]


class _Rules:
    """Hidden generating rule for one task: which slot decides the class,
    how slot values map to classes, and how classes spell their names."""

    def __init__(self, spec: TaskSpec):
        rng = np.random.default_rng(np.random.SeedSequence([spec.rule_seed, 0x52]))
        slot_assignment = rng.permutation(N_SLOTS)
        value_tables = rng.permuted(
            np.tile(np.arange(SLOT_VALUES), (len(TASK_NAMES), 1)), axis=1
        )
        stratify = rng.permuted(
            np.tile(np.arange(SLOT_VALUES), (len(TASK_NAMES), 1)), axis=1
        )
        name_perms = rng.permuted(
            np.tile(np.arange(MAX_CLASSES), (len(TASK_NAMES), MAX_ANSWER_LEN, 1)), axis=2
        )
        t = spec.task_id
        self.slot = int(slot_assignment[t % N_SLOTS])
        self.value_to_class = value_tables[t] % spec.n_classes
        self.stratify = stratify[t]
        self.name_perm = name_perms[t][:, : spec.n_classes] % spec.n_classes
        self.spec = spec

    def answer_tokens(self, class_id: int) -> tuple:
        t = self.spec.task_id
        return tuple(
            ANSWER_BASE + t * (MAX_ANSWER_LEN * MAX_CLASSES) + pos * MAX_CLASSES
            + int(self.name_perm[pos][class_id])
            for pos in range(self.spec.answer_len)
        )


_RULE_CACHE: dict[TaskSpec, _Rules] = {}


def _rules_for(spec: TaskSpec) -> _Rules:
    rules = _RULE_CACHE.get(spec)
    if rules is None:
        rules = _Rules(spec)
        _RULE_CACHE[spec] = rules
    return rules


def _make_row(specs: list[TaskSpec], index: int, seed: int):
    task = index % len(specs)
    per_task_index = index // len(specs)
    rules = _rules_for(specs[task])
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    values = rng.integers(0, SLOT_VALUES, size=N_SLOTS)
    # Cycle the governing slot through all values so classes stay balanced.
    values[rules.slot] = rules.stratify[per_task_index % SLOT_VALUES]
    class_id = int(rules.value_to_class[values[rules.slot]])
    prompt = (
        (BOS,)
        + tuple(FEATURE_BASE + s * SLOT_VALUES + int(values[s]) for s in range(N_SLOTS))
        + (QUERY_BASE + task,)
    )
    return prompt, rules.answer_tokens(class_id), task, class_id


def make_sample(specs: list[TaskSpec], index: int, seed: int) -> Sample:
    """Deterministic sample ``index`` of the interleaved task stream."""
    prompt, answer, task, _ = _make_row(specs, index, seed)
    return Sample(prompt, answer, task)


@dataclass
class Dataset:
    """Padded token matrix plus per-sample answer metadata."""

    tokens: np.ndarray  # [n, prompt_len + MAX_ANSWER_LEN], PAD-filled
    answer_len: np.ndarray  # [n]
    task_id: np.ndarray  # [n]
    class_id: np.ndarray  # [n]
    specs: list[TaskSpec] = field(repr=False, default_factory=list)
    prompt_len: int = PROMPT_LEN

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    def __len__(self) -> int:
        return self.n

    def sample(self, i: int) -> Sample:
        p = self.prompt_len
        a = int(self.answer_len[i])
        return Sample(
            tuple(int(t) for t in self.tokens[i, :p]),
            tuple(int(t) for t in self.tokens[i, p : p + a]),
            int(self.task_id[i]),
        )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            tokens=self.tokens[idx].copy(),
            answer_len=self.answer_len[idx].copy(),
            task_id=self.task_id[idx].copy(),
            class_id=self.class_id[idx].copy(),
            specs=self.specs,
            prompt_len=self.prompt_len,
        )

    def training_arrays(self):
        """(inputs, targets, weights): next-token prediction restricted to
        answer positions. weights[i, p] = 1 where targets[i, p] is an
        answer token."""
        inputs = self.tokens[:, :-1]
        targets = self.tokens[:, 1:]
        pos = np.arange(targets.shape[1])[None, :]
        first = self.prompt_len - 1
        weights = (
            (pos >= first) & (pos < first + self.answer_len[:, None])
        ).astype(np.float32)
        return inputs, targets, weights

    def class_counts(self) -> dict[int, np.ndarray]:
        out = {}
        for spec in self.specs:
            mask = self.task_id == spec.task_id
            out[spec.task_id] = np.bincount(
                self.class_id[mask], minlength=spec.n_classes
            )
        return out

    def export_text(self, path) -> None:
        """One line per sample: prompt ids, answer ids, task id, tab-separated."""
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(self.n):
                s = self.sample(i)
                fh.write(
                    " ".join(map(str, s.prompt_tokens))
                    + "\t"
                    + " ".join(map(str, s.answer_tokens))
                    + "\t"
                    + str(s.task_id)
                    + "\n"
                )


def build_dataset(specs: list[TaskSpec], indices, seed: int) -> Dataset:
    indices = np.asarray(indices)
    n = len(indices)
    width = PROMPT_LEN + MAX_ANSWER_LEN
    tokens = np.full((n, width), PAD, dtype=np.int64)
    answer_len = np.zeros(n, dtype=np.int64)
    task_id = np.zeros(n, dtype=np.int64)
    class_id = np.zeros(n, dtype=np.int64)
    for row, idx in enumerate(indices):
        prompt, answer, task, cls = _make_row(specs, int(idx), seed)
        seq = prompt + answer
        tokens[row, : len(seq)] = seq
        answer_len[row] = len(answer)
        task_id[row] = task
        class_id[row] = cls
    return Dataset(tokens, answer_len, task_id, class_id, specs)


def generate_split(specs: list[TaskSpec], sizes: dict, seed: int,
                   pruning_fraction: float | None = None):
    """Build (D_p, D_d, D_t) by sample-index partition.

    Train and test are disjoint by construction. By default the pruning and
    distillation sets are both the full training set; ``pruning_fraction``
    carves D_p off the front of it instead.
    """
    n_train, n_test = int(sizes["train"]), int(sizes["test"])
    if n_train < 1 or n_test < 1:
        raise ContractError("split sizes must be >= 1")
    train = build_dataset(specs, np.arange(n_train), seed)
    test = build_dataset(specs, np.arange(n_train, n_train + n_test), seed)
    if pruning_fraction is None:
        return train, train, test
    cut = max(1, int(n_train * pruning_fraction))
    return train.subset(np.arange(cut)), train.subset(np.arange(cut, n_train)), test


# ---------------------------------------------------------------------------
# evaluation


def greedy_decode(model: ModelState, prompts: np.ndarray, steps: int) -> np.ndarray:
    """Append ``steps`` argmax tokens to each prompt row. No grad recording."""
    cur = np.asarray(prompts)
    out = []
    for _ in range(steps):
        logits = forward(model, cur).data
        nxt = logits[:, -1, :].argmax(axis=-1)
        out.append(nxt)
        cur = np.concatenate([cur, nxt[:, None]], axis=1)
    return np.stack(out, axis=1)


@dataclass
class AccuracyReport:
    overall: float
    per_task: dict[int, float]
    n: int


def accuracy(model: ModelState, dataset: Dataset, batch_size: int = 512) -> AccuracyReport:
    """Greedy-decoded exact-match accuracy; a sample counts only if every
    answer token matches."""
    if dataset.n == 0:
        raise ContractError("accuracy needs a non-empty dataset")
    correct = np.zeros(dataset.n, dtype=bool)
    max_len = int(dataset.answer_len.max())
    p = dataset.prompt_len
    for start in range(0, dataset.n, batch_size):
        rows = slice(start, min(start + batch_size, dataset.n))
        decoded = greedy_decode(model, dataset.tokens[rows, :p], max_len)
        truth = dataset.tokens[rows, p : p + max_len]
        lens = dataset.answer_len[rows]
        pos = np.arange(max_len)[None, :]
        ok = (decoded == truth) | (pos >= lens[:, None])
        correct[rows] = ok.all(axis=1)
    per_task = {}
    for spec in dataset.specs:
        mask = dataset.task_id == spec.task_id
        if mask.any():
            per_task[spec.task_id] = float(correct[mask].mean())
    return AccuracyReport(float(correct.mean()), per_task, dataset.n)


def throughput(model: ModelState, dataset: Dataset, n_samples: int = 64) -> float:
    """Greedy-decode samples/s at batch size 1 (wall clock, local machine)."""
    n = min(n_samples, dataset.n)
    p = dataset.prompt_len
    t0 = time.perf_counter()
    for i in range(n):
        greedy_decode(model, dataset.tokens[i : i + 1, :p], int(dataset.answer_len[i]))
    dt = time.perf_counter() - t0
    return n / dt if dt > 0 else float("inf")
