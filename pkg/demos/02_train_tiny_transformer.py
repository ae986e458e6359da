#!/usr/bin/env python3
"""Generate the synthetic task suite and train a small teacher on it.

Usage: python demos/02_train_tiny_transformer.py   (~30 s)
"""

from prunekit.model import ModelConfig, init_model, param_count
from prunekit.pruner import split_for_pipeline
from prunekit.taskgen import TASK_NAMES, accuracy, default_task_specs, generate_split
from prunekit.train import TrainConfig, train_teacher

specs = default_task_specs(rule_seed=7)
d_p, d_d, d_t = generate_split(specs, {"train": 2000, "test": 500}, seed=0)
data = split_for_pipeline(d_p, d_d, val_size=256)

print("one sample per task:")
for t in range(5):
    s = d_d.sample(t)
    print(f"  {TASK_NAMES[t]:>17}: prompt {list(s.prompt_tokens)} -> answer {list(s.answer_tokens)}")

cfg = ModelConfig(vocab_size=512, max_seq_len=16, d_model=64,
                  n_blocks=4, n_heads=4, d_head=16, d_ffn=256)
model = init_model(cfg, seed=1)
print(f"\nmodel: {cfg.n_blocks} blocks, width {cfg.d_model}, "
      f"{param_count(cfg):,} parameters")

result = train_teacher(
    model, data.d_d, data.val,
    TrainConfig(epochs=30, learning_rate=1.5e-3, batch_size=128, target_accuracy=0.98),
    seed=2,
)
print("\nepoch  loss     val accuracy")
for h in result.history:
    print(f"{h['epoch']:>5}  {h['loss']:<7.4f}  {h['accuracy']:.3f}")

rep = accuracy(model, d_t)
print(f"\ntest accuracy: {rep.overall:.3f} overall")
for t, name in enumerate(TASK_NAMES):
    print(f"  {name:>17}: {rep.per_task[t]:.3f}")
