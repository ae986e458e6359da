#!/usr/bin/env python3
"""Two small ablations: gradual vs one-shot pruning at matched distillation
budgets, and the three distillation-loss variants.

Usage: python demos/06_ablations.py   (~5 min)
"""

import copy

from prunekit.distill import DistillConfig
from prunekit.model import ModelConfig, init_model, param_count
from prunekit.pruner import StageConfig, run_oneshot, run_pipeline, split_for_pipeline
from prunekit.taskgen import accuracy, default_task_specs, generate_split
from prunekit.train import TrainConfig, train_teacher

specs = default_task_specs(7)
d_p, d_d, d_t = generate_split(specs, {"train": 1500, "test": 400}, seed=0)
data = split_for_pipeline(d_p, d_d, val_size=256, importance_samples=512,
                          gate_samples=256)

cfg = ModelConfig(vocab_size=512, max_seq_len=16, d_model=64,
                  n_blocks=4, n_heads=4, d_head=16, d_ffn=256)
teacher = init_model(cfg, seed=10)
print("training the teacher...")
train_teacher(teacher, data.d_d, data.val,
              TrainConfig(epochs=30, learning_rate=1.5e-3, batch_size=128,
                          target_accuracy=0.96), seed=11)
print(f"teacher test accuracy: {accuracy(teacher, d_t).overall:.3f}\n")

stage_cfg = StageConfig(alpha=0.10, epochs=2,
                        blocks_per_iter=1, max_blocks=2,
                        ffn_per_iter=64, max_ffn=128,
                        att_per_iter=4, max_att=8,
                        inout_per_iter=8, max_inout=24)
dcfg = DistillConfig(epochs=2, batch_size=128)

print("=== gradual vs one-shot (matched distill epochs) ===")
gradual = run_pipeline(teacher, stage_cfg, dcfg, data, seed=1)
oneshot = run_oneshot(teacher, stage_cfg, dcfg, data, scope="all", seed=1,
                      matched_epochs=gradual.total_epochs)
for name, res in (("gradual", gradual), ("one-shot", oneshot)):
    acc = accuracy(res.model, d_t).overall
    print(f"  {name:<9} {param_count(res.model.config):>7,} params  "
          f"{res.total_epochs:>2} distill epochs  accuracy {acc:.3f}")

print("\n=== distillation loss variants ===")
for arm in ("kl_only", "hard_label", "kl_pairwise"):
    acfg = copy.deepcopy(dcfg)
    acfg.loss_variant = arm
    if arm == "kl_only":
        acfg.gamma = 0.0
    res = run_pipeline(teacher, stage_cfg, acfg, data, seed=2)
    acc = accuracy(res.model, d_t).overall
    print(f"  {arm:<12} accuracy {acc:.3f} at {param_count(res.model.config):,} params")
