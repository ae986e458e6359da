import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from prunekit.model import ModelConfig, init_model
from prunekit.pruner import split_for_pipeline
from prunekit.taskgen import default_task_specs, generate_split
from prunekit.train import TrainConfig, train_teacher

MICRO_CFG = ModelConfig(
    vocab_size=512, max_seq_len=16, d_model=48,
    n_blocks=2, n_heads=4, d_head=12, d_ffn=96,
)


@pytest.fixture(scope="session")
def micro_data():
    specs = default_task_specs(7)
    d_p, d_d, d_t = generate_split(specs, {"train": 1500, "test": 400}, seed=101)
    return split_for_pipeline(
        d_p, d_d, val_size=200, importance_samples=512, gate_samples=256
    ), d_t


@pytest.fixture(scope="session")
def trained_micro(micro_data):
    """A small teacher, trained once per session, shared read-only."""
    data, _ = micro_data
    model = init_model(MICRO_CFG, seed=11)
    train_teacher(
        model, data.d_d, data.val,
        TrainConfig(epochs=20, learning_rate=1.5e-3, batch_size=128,
                    target_accuracy=0.97),
        seed=12,
    )
    return model


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
