#!/usr/bin/env python3
"""Structural surgery: prune plans, exact parameter accounting, dead-dim
removal, and zero-extension (the converse operation).

Usage: python demos/04_model_surgery.py
"""

import numpy as np

from prunekit.model import (
    ModelConfig, forward, init_model, param_count, shape_audit, zero_extend_ffn,
)
from prunekit.pruner import PrunePlan, apply_plan, plan_param_delta

cfg = ModelConfig(vocab_size=64, max_seq_len=12, d_model=16,
                  n_blocks=4, n_heads=2, d_head=6, d_ffn=24)
model = init_model(cfg, seed=0)
probe = np.random.default_rng(1).integers(0, 64, size=(2, 8))

print(f"start: {cfg.n_blocks} blocks, {param_count(cfg):,} params, "
      f"audit -> {shape_audit(model) or 'clean'}\n")

plans = [
    PrunePlan("blocks", (3,)),
    PrunePlan("ffn_inter", tuple((0, 7, 19) for _ in range(3))),
    PrunePlan("att_inter", tuple((2,) for _ in range(3))),
    PrunePlan("in_out", (1, 10)),
]
for plan in plans:
    predicted = plan_param_delta(model.config, plan)
    before = param_count(model.config)
    model = apply_plan(model, plan)
    after = param_count(model.config)
    print(f"{plan.kind:<10} removed {before - after:>5} params "
          f"(closed form predicted {predicted:>5}) audit -> "
          f"{shape_audit(model) or 'clean'}")

print(f"\nfinal config: {model.config}")

print("\n=== dead dimensions cost nothing to remove ===")
model2 = init_model(cfg, seed=2)
dead = (3, 11)
for b in range(cfg.n_blocks):
    model2.params[f"blocks.{b}.ffn.w_in"].data[list(dead), :] = 0
    model2.params[f"blocks.{b}.ffn.w_out"].data[:, list(dead)] = 0
before_out = forward(model2, probe).data
pruned = apply_plan(model2, PrunePlan("ffn_inter", tuple(dead for _ in range(4))))
after_out = forward(pruned, probe).data
print(f"output change after removing all-zero FFN units: "
      f"{np.abs(before_out - after_out).max():.2e}")

print("\n=== and zero-extension adds nothing ===")
model3 = init_model(cfg, seed=3)
base = forward(model3, probe).data
grown = zero_extend_ffn(model3, 8)
print(f"output change after appending 8 all-zero FFN units: "
      f"{np.abs(forward(grown, probe).data - base).max():.2e}")
print(f"grown model audit -> {shape_audit(grown) or 'clean'}")
