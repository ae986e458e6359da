#!/usr/bin/env python3
"""The full tolerance-gated pipeline on a small model: train a teacher,
run all four pruning stages with interleaved distillation, and print the
drop-then-recover trace.

Usage: python demos/05_compression_pipeline.py   (~2 min)
"""

from prunekit.distill import DistillConfig
from prunekit.model import ModelConfig, init_model, param_count
from prunekit.pruner import StageConfig, run_pipeline, split_for_pipeline
from prunekit.taskgen import accuracy, default_task_specs, generate_split, throughput
from prunekit.train import TrainConfig, train_teacher

specs = default_task_specs(7)
d_p, d_d, d_t = generate_split(specs, {"train": 2000, "test": 500}, seed=0)
data = split_for_pipeline(d_p, d_d, val_size=256, importance_samples=512,
                          gate_samples=256)

cfg = ModelConfig(vocab_size=512, max_seq_len=16, d_model=64,
                  n_blocks=4, n_heads=4, d_head=16, d_ffn=256)
teacher = init_model(cfg, seed=1)
print("training the teacher...")
train_teacher(teacher, data.d_d, data.val,
              TrainConfig(epochs=30, learning_rate=1.5e-3, batch_size=128,
                          target_accuracy=0.98), seed=2)
t_acc = accuracy(teacher, d_t).overall
print(f"teacher: {param_count(cfg):,} params, test accuracy {t_acc:.3f}\n")

stage_cfg = StageConfig(alpha=0.05, epochs=2,
                        blocks_per_iter=1, max_blocks=2,
                        ffn_per_iter=64, max_ffn=128,
                        att_per_iter=4, max_att=8,
                        inout_per_iter=8, max_inout=16)
result = run_pipeline(teacher, stage_cfg, DistillConfig(epochs=2, batch_size=128),
                      data, seed=3)

print("stage      it  params        gate-acc before -> pruned+distilled")
for rec in result.log.records:
    if rec.get("event") == "iteration":
        print(f"{rec['stage']:<9} {rec['iteration']:>3}  "
              f"{rec['params_before']:>7,} -> {rec['params_after']:>7,}  "
              f"{rec['perf_before']:.3f} -> {rec['perf_after']:.3f}")

student = result.model
s_acc = accuracy(student, d_t).overall
print(f"\nfinal student: {param_count(student.config):,} params "
      f"({param_count(cfg) / param_count(student.config):.1f}x smaller)")
print(f"accuracy: teacher {t_acc:.3f} -> student {s_acc:.3f}")
print(f"greedy decode: teacher {throughput(teacher, d_t, 32):.1f}/s, "
      f"student {throughput(student, d_t, 32):.1f}/s")
