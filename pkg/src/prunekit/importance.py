"""First-order importance scores and their structural aggregations.

Element scores follow the gradient-times-weight rule: accumulate the loss
gradient for each parameter over the scoring dataset, then take
|summed gradient| * |weight| elementwise. Group scores are plain sums of
member element scores at three granularities:

  * FFN hidden unit n of a block: row n of W_in plus column n of W_out.
  * attention channel n of a block: column n of W_Q/W_K/W_V plus row n of
    W_O, summed over heads.
  * model-width coordinate n: every slice that reads or writes coordinate n
    in every block, plus the embedding, norm, and output-head entries.

Aggregation happens in float64 with numpy's reduction order, so group
scores are reproducibly bit-identical for a given element map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelState, forward
from .tensor import ComputeGraph, ContractError, NumericError, Tensor, cross_entropy, reshape
from .taskgen import Dataset

__all__ = [
    "ElementImportance",
    "ImportanceReport",
    "answer_ce_loss",
    "accumulate_element_importance",
    "aggregate_ffn",
    "aggregate_attention",
    "aggregate_in_out",
    "compute_report",
    "write_report",
]

ElementImportance = dict[str, np.ndarray]


@dataclass
class ImportanceReport:
    ffn_inter: list[np.ndarray]  # per block, length d_ffn
    att_inter: list[np.ndarray]  # per block, length d_head
    in_out: np.ndarray  # length d_model
    block_scores: np.ndarray | None = None  # diagnostic only


def answer_ce_loss(model: ModelState, dataset: Dataset, rows) -> Tensor:
    """Mean answer-token cross-entropy for the given dataset rows.

    The default scoring loss: every batch is mean-reduced the same way so
    summed gradients across batches are comparable.
    """
    inputs, targets, weights = dataset.training_arrays()
    inputs, targets, weights = inputs[rows], targets[rows], weights[rows]
    logits = forward(model, inputs)
    n, t = targets.shape
    flat = reshape(logits, (n * t, model.config.vocab_size))
    return cross_entropy(flat, targets.reshape(-1), weights.reshape(-1))


def accumulate_element_importance(
    model: ModelState,
    dataset: Dataset,
    batch_size: int = 256,
    loss_fn=answer_ce_loss,
    max_samples: int | None = None,
) -> ElementImportance:
    """|sum of per-batch loss gradients| * |weight|, elementwise.

    Gradients are zeroed on entry, summed across all batches, and the
    product with the weight magnitude is taken once at the end.
    """
    n = dataset.n if max_samples is None else min(dataset.n, max_samples)
    if n == 0:
        raise ContractError("importance accumulation needs a non-empty dataset")
    model.zero_grads()
    for start in range(0, n, batch_size):
        rows = np.arange(start, min(start + batch_size, n))
        with ComputeGraph() as g:
            loss = loss_fn(model, dataset, rows)
        g.backward(loss)
        for name, p in model.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError(
                    f"non-finite gradient for {name} in batch starting at row {start}"
                )
    scores: ElementImportance = {}
    for name, p in model.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        scores[name] = np.abs(g) * np.abs(p.data)
    model.zero_grads()
    return scores


def _sum_last(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=np.float64).sum(axis=-1)


def aggregate_ffn(elem: ElementImportance, block: int) -> np.ndarray:
    """Per-hidden-unit scores for one block's FFN."""
    w_in = elem.get(f"blocks.{block}.ffn.w_in")
    w_out = elem.get(f"blocks.{block}.ffn.w_out")
    if w_in is None or w_out is None:
        raise ContractError(f"block {block} out of range")
    return _sum_last(w_in) + _sum_last(w_out.T)


def aggregate_attention(elem: ElementImportance, block: int) -> np.ndarray:
    """Per-channel scores for one block's attention, summed over heads."""
    pre = f"blocks.{block}.attn."
    if pre + "wq" not in elem:
        raise ContractError(f"block {block} out of range")
    total = None
    for nm in ("wq", "wk", "wv"):
        part = _sum_last(np.swapaxes(elem[pre + nm], 1, 2)).sum(axis=0)
        total = part if total is None else total + part
    total = total + _sum_last(elem[pre + "wo"]).sum(axis=0)
    return total


def aggregate_in_out(elem: ElementImportance) -> np.ndarray:
    """Per-coordinate scores over the model width, across all blocks plus
    embeddings, layer norms, and the output head."""
    total = _sum_last(elem["tok_emb"].T) + _sum_last(elem["pos_emb"].T)
    total = total + np.asarray(elem["final_norm.scale"], dtype=np.float64)
    total = total + np.asarray(elem["final_norm.shift"], dtype=np.float64)
    if "head" in elem:
        total = total + _sum_last(elem["head"].T)
    block = 0
    while f"blocks.{block}.ffn.w_in" in elem:
        pre = f"blocks.{block}."
        for ln in ("ln1", "ln2"):
            total = total + np.asarray(elem[pre + ln + ".scale"], dtype=np.float64)
            total = total + np.asarray(elem[pre + ln + ".shift"], dtype=np.float64)
        for nm in ("wq", "wk", "wv"):
            # [H, d_model, d_head]: coordinate n is row n of every head
            total = total + _sum_last(elem[pre + "attn." + nm]).sum(axis=0)
        total = total + _sum_last(np.swapaxes(elem[pre + "attn.wo"], 1, 2)).sum(axis=0)
        total = total + _sum_last(elem[pre + "ffn.w_in"].T)
        total = total + _sum_last(elem[pre + "ffn.w_out"])
        block += 1
    return total


def compute_report(model: ModelState, elem: ElementImportance) -> ImportanceReport:
    n_blocks = model.config.n_blocks
    ffn = [aggregate_ffn(elem, b) for b in range(n_blocks)]
    att = [aggregate_attention(elem, b) for b in range(n_blocks)]
    blocks = np.array(
        [
            sum(float(elem[k].sum(dtype=np.float64)) for k in elem if k.startswith(f"blocks.{b}."))
            for b in range(n_blocks)
        ]
    )
    return ImportanceReport(
        ffn_inter=ffn,
        att_inter=att,
        in_out=aggregate_in_out(elem),
        block_scores=blocks,
    )


def write_report(report: ImportanceReport, path) -> None:
    """Human-inspectable dump: one line per (group, block, values)."""
    with open(path, "w", encoding="utf-8") as fh:
        for b, vec in enumerate(report.ffn_inter):
            fh.write(f"ffn_inter\t{b}\t" + " ".join(f"{v:.9e}" for v in vec) + "\n")
        for b, vec in enumerate(report.att_inter):
            fh.write(f"att_inter\t{b}\t" + " ".join(f"{v:.9e}" for v in vec) + "\n")
        fh.write("in_out\t-\t" + " ".join(f"{v:.9e}" for v in report.in_out) + "\n")
        if report.block_scores is not None:
            fh.write(
                "block_scores\t-\t" + " ".join(f"{v:.9e}" for v in report.block_scores) + "\n"
            )
