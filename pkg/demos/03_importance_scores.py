#!/usr/bin/env python3
"""Gradient-times-weight importance scores, aggregated per structure, and a
check that they actually rank: zeroing the lowest-scored FFN units should
hurt far less than zeroing the highest-scored ones.

Usage: python demos/03_importance_scores.py   (~30 s)
"""

import numpy as np

from prunekit.importance import accumulate_element_importance, compute_report
from prunekit.model import ModelConfig, clone_model, init_model
from prunekit.pruner import split_for_pipeline
from prunekit.taskgen import accuracy, default_task_specs, generate_split
from prunekit.train import TrainConfig, train_teacher

specs = default_task_specs(7)
d_p, d_d, d_t = generate_split(specs, {"train": 1500, "test": 400}, seed=3)
data = split_for_pipeline(d_p, d_d, val_size=256)

cfg = ModelConfig(vocab_size=512, max_seq_len=16, d_model=48,
                  n_blocks=2, n_heads=4, d_head=12, d_ffn=96)
model = init_model(cfg, seed=4)
train_teacher(model, data.d_d, data.val,
              TrainConfig(epochs=25, learning_rate=1.5e-3, batch_size=128,
                          target_accuracy=0.96), seed=5)

elem = accumulate_element_importance(model, data.d_p, max_samples=512)
report = compute_report(model, elem)

print("per-structure score vectors:")
print(f"  ffn_inter : {len(report.ffn_inter)} blocks x {len(report.ffn_inter[0])} units")
print(f"  att_inter : {len(report.att_inter)} blocks x {len(report.att_inter[0])} channels")
print(f"  in_out    : {len(report.in_out)} width coordinates")
print(f"  block     : {np.array2string(report.block_scores, precision=2)} (diagnostic)\n")

scores = report.ffn_inter[0]
order = np.argsort(scores, kind="stable")
k = len(scores) // 10
print(f"block 0 FFN scores: min {scores.min():.4f}, median "
      f"{np.median(scores):.4f}, max {scores.max():.4f}")


def zero_ffn_dims(m, dims):
    out = clone_model(m)
    for b in range(m.config.n_blocks):
        out.params[f"blocks.{b}.ffn.w_in"].data[list(dims), :] = 0
        out.params[f"blocks.{b}.ffn.w_out"].data[:, list(dims)] = 0
    return out


base = accuracy(model, data.val).overall
low = accuracy(zero_ffn_dims(model, order[:k]), data.val).overall
high = accuracy(zero_ffn_dims(model, order[-k:]), data.val).overall
print(f"\nzeroing the {k} lowest-importance FFN units per block:  "
      f"accuracy {base:.3f} -> {low:.3f}")
print(f"zeroing the {k} highest-importance FFN units per block: "
      f"accuracy {base:.3f} -> {high:.3f}")
print("\nlow-importance units are the cheap ones to remove." if low >= high
      else "\nunexpected ordering — try another seed")
