import json
import os

import numpy as np
import pytest

from prunekit.checkpoint import load_model
from prunekit.cli import main
from prunekit.config import (
    RunConfig,
    load_config_file,
    set_key,
    tiny_preset,
    to_flat,
    write_config_file,
)
from prunekit.tensor import ContractError

# micro overrides shared by the CLI runs in this file: small enough that a
# command finishes in a couple of seconds
MICRO = [
    "--model.n_blocks", "2", "--model.d_model", "32", "--model.d_head", "8",
    "--model.d_ffn", "64", "--data.train_size", "500", "--data.test_size", "120",
    "--data.val_size", "96", "--data.gate_samples", "96",
    "--data.importance_samples", "128",
    "--train.epochs", "30", "--train.learning_rate", "0.003",
    "--train.batch_size", "64", "--train.target_accuracy", "0.95",
    "--stage.epochs", "1", "--stage.max_blocks", "1", "--stage.max_ffn", "16",
    "--stage.ffn_per_iter", "16", "--stage.max_att", "2", "--stage.att_per_iter", "2",
    "--stage.max_inout", "4", "--stage.inout_per_iter", "4",
    "--distill.batch_size", "64",
]


def read_metrics(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh]


@pytest.fixture(scope="module")
def teacher_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("teacher")
    rc = main(["train-teacher", "--preset", "tiny", "--seed", "9",
               "--out", str(out), *MICRO])
    assert rc == 0
    return out


# ---------------------------------------------------------------------------
# config handling


def test_config_file_roundtrip(tmp_path):
    cfg = tiny_preset()
    cfg.seed = 17
    path = tmp_path / "run.cfg"
    write_config_file(cfg, path)
    loaded = load_config_file(tiny_preset(), path)
    assert to_flat(loaded) == to_flat(cfg)


def test_set_key_types():
    cfg = tiny_preset()
    set_key(cfg, "model.d_model", "96")
    assert cfg.model.d_model == 96
    set_key(cfg, "stage.alpha", "0.2")
    assert cfg.stage.alpha == 0.2
    set_key(cfg, "distill.cosine_schedule", "false")
    assert cfg.distill.cosine_schedule is False
    set_key(cfg, "data.importance_samples", "none")
    assert cfg.data.importance_samples is None
    set_key(cfg, "seed", "3")
    assert cfg.seed == 3


def test_set_key_rejects_unknown_and_bad_values():
    cfg = tiny_preset()
    with pytest.raises(ContractError):
        set_key(cfg, "nonsense.key", "1")
    with pytest.raises(ContractError):
        set_key(cfg, "model.d_model", "abc")


def test_config_file_syntax_error(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("model.d_model 64\n")
    with pytest.raises(ContractError):
        load_config_file(tiny_preset(), path)


def test_unknown_config_key_is_usage_error(tmp_path):
    rc = main(["train-teacher", "--out", str(tmp_path / "x"),
               "--bogus.key", "1"])
    assert rc == 1


# ---------------------------------------------------------------------------
# commands


def test_train_teacher_outputs(teacher_run):
    assert (teacher_run / "teacher.pkpt").exists()
    assert (teacher_run / "config.resolved").exists()
    metrics = read_metrics(teacher_run / "metrics.jsonl")
    assert metrics[-1]["event"] == "summary"
    test_rec = [m for m in metrics if m.get("label") == "teacher_test"][0]
    assert test_rec["overall_accuracy"] > 0.5
    model = load_model(teacher_run / "teacher.pkpt")
    assert model.config.n_blocks == 2


def test_missing_output_dir_is_created(tmp_path):
    nested = tmp_path / "a" / "b" / "c"
    rc = main(["train-teacher", "--preset", "tiny", "--seed", "9",
               "--out", str(nested), *MICRO, "--train.epochs", "1"])
    assert rc == 0 and nested.exists()


def test_compress_then_evaluate_consistency(teacher_run, tmp_path):
    out = tmp_path / "compress"
    rc = main(["compress", "--preset", "tiny", "--seed", "9", "--out", str(out),
               "--teacher", str(teacher_run / "teacher.pkpt"), *MICRO])
    assert rc == 0
    metrics = read_metrics(out / "metrics.jsonl")
    summary = metrics[-1]
    assert summary["event"] == "summary"
    rows = [m for m in metrics if m["event"] == "evaluate"]
    assert [r["label"] for r in rows] == [
        "original", "after_block_pruning", "after_inter_module_pruning",
        "after_in_out_pruning",
    ]
    params = [r["param_count"] for r in rows]
    assert all(a > b for a, b in zip(params, params[1:]))
    assert (out / "summary.txt").exists()
    assert (out / "student.pkpt").exists()

    ev = tmp_path / "eval"
    rc = main(["evaluate", "--preset", "tiny", "--seed", "9", "--out", str(ev),
               "--checkpoint", str(out / "student.pkpt"), *MICRO])
    assert rc == 0
    ev_metrics = read_metrics(ev / "metrics.jsonl")
    assert ev_metrics[0]["overall_accuracy"] == summary["final_accuracy"]
    assert ev_metrics[0]["param_count"] == summary["final_params"]


def test_alpha_zero_stops_stages_immediately(teacher_run, tmp_path):
    out = tmp_path / "a0"
    rc = main(["compress", "--preset", "tiny", "--seed", "9", "--out", str(out),
               "--teacher", str(teacher_run / "teacher.pkpt"), *MICRO,
               "--stage.alpha", "0"])
    assert rc == 0
    with open(out / "runlog.jsonl") as fh:
        records = [json.loads(line) for line in fh]
    iters = [r for r in records if r.get("event") == "iteration"]
    per_stage = {}
    for r in iters:
        per_stage[r["stage"]] = per_stage.get(r["stage"], 0) + 1
    assert all(v <= 1 for v in per_stage.values())


def test_reproducibility_bitwise(tmp_path):
    """Same config and seed: identical checkpoints and metrics records."""
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        rc = main(["train-teacher", "--preset", "tiny", "--seed", "4",
                   "--out", str(out), *MICRO, "--train.epochs", "3"])
        assert rc == 0
        rc = main(["compress", "--preset", "tiny", "--seed", "4",
                   "--out", str(out / "c"), "--teacher", str(out / "teacher.pkpt"),
                   *MICRO])
        assert rc == 0
        outs.append(out)
    a, b = outs
    assert (a / "teacher.pkpt").read_bytes() == (b / "teacher.pkpt").read_bytes()
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    assert (a / "c" / "student.pkpt").read_bytes() == (b / "c" / "student.pkpt").read_bytes()
    assert (a / "c" / "metrics.jsonl").read_bytes() == (b / "c" / "metrics.jsonl").read_bytes()


def test_oneshot_and_single_stage(teacher_run, tmp_path):
    rc = main(["oneshot", "--preset", "tiny", "--seed", "9",
               "--out", str(tmp_path / "os"), "--scope", "blocks",
               "--teacher", str(teacher_run / "teacher.pkpt"), *MICRO])
    assert rc == 0
    metrics = read_metrics(tmp_path / "os" / "metrics.jsonl")
    assert metrics[-1]["scope"] == "blocks"

    rc = main(["single-stage", "--preset", "tiny", "--seed", "9",
               "--out", str(tmp_path / "ss"), "--stage", "ffn_inter",
               "--teacher", str(teacher_run / "teacher.pkpt"), *MICRO])
    assert rc == 0
    student = load_model(tmp_path / "ss" / "student.pkpt")
    assert student.config.d_ffn == 64 - 16
    assert student.config.n_blocks == 2  # other stages untouched


def test_evaluate_usage_errors(teacher_run, tmp_path):
    rc = main(["evaluate", "--preset", "tiny", "--out", str(tmp_path / "e1"),
               "--checkpoint", "/nonexistent.pkpt"])
    assert rc == 1
    rc = main(["evaluate", "--preset", "tiny", "--out", str(tmp_path / "e2"),
               "--checkpoint", str(teacher_run / "teacher.pkpt"),
               "--data.test_size", "0"])
    assert rc == 1


def test_corrupt_checkpoint_is_runtime_error(teacher_run, tmp_path):
    blob = bytearray((teacher_run / "teacher.pkpt").read_bytes())
    bad = tmp_path / "bad.pkpt"
    bad.write_bytes(bytes(blob[:50]))
    rc = main(["evaluate", "--preset", "tiny", "--out", str(tmp_path / "e3"),
               "--checkpoint", str(bad), *MICRO])
    assert rc == 2


def test_usage_error_on_bad_command_line():
    assert main(["no-such-command"]) == 1
    assert main(["compress"]) == 1  # missing --teacher


def test_output_lock_blocks_concurrent_runs(teacher_run, tmp_path):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").write_text("123")
    rc = main(["evaluate", "--preset", "tiny", "--seed", "9", "--out", str(out),
               "--checkpoint", str(teacher_run / "teacher.pkpt"), *MICRO])
    assert rc == 2
    (out / ".lock").unlink()
    rc = main(["evaluate", "--preset", "tiny", "--seed", "9", "--out", str(out),
               "--checkpoint", str(teacher_run / "teacher.pkpt"), *MICRO])
    assert rc == 0
    assert not (out / ".lock").exists()  # released


def test_ablate_distill_arms(teacher_run, tmp_path):
    out = tmp_path / "ad"
    rc = main(["ablate-distill", "--preset", "tiny", "--seed", "9",
               "--out", str(out), "--seeds", "0",
               "--teacher", str(teacher_run / "teacher.pkpt"), *MICRO])
    assert rc == 0
    metrics = read_metrics(out / "metrics.jsonl")
    arms = [m["arm"] for m in metrics if m.get("event") == "ablation_arm"]
    assert arms == ["kl_only", "hard_label", "kl_pairwise"]
    assert (out / "distill_ablation.txt").exists()


def test_ablate_prune_has_ten_arms(teacher_run, tmp_path):
    out = tmp_path / "ap"
    rc = main(["ablate-prune", "--preset", "tiny", "--seed", "9",
               "--out", str(out), "--seeds", "0",
               "--teacher", str(teacher_run / "teacher.pkpt"), *MICRO])
    assert rc == 0
    metrics = read_metrics(out / "metrics.jsonl")
    arms = [m["arm"] for m in metrics if m.get("event") == "ablation_arm"]
    assert len(arms) == 10
    assert arms == [
        "blocks_only", "ffn_inter_only", "att_inter_only", "in_out_only",
        "blocks_only_oneshot", "ffn_inter_only_oneshot",
        "att_inter_only_oneshot", "in_out_only_oneshot",
        "all_stages", "all_stages_oneshot",
    ]


def test_metrics_floats_round_trip_exactly(teacher_run):
    """Shortest round-trip decimal formatting: parsing a metrics file gives
    back bit-identical float values."""
    raw = (teacher_run / "metrics.jsonl").read_text().splitlines()
    for line in raw:
        rec = json.loads(line)
        assert json.loads(json.dumps(rec, sort_keys=True)) == rec
        for v in rec.values():
            if isinstance(v, float):
                assert float(repr(v)) == v


def test_ablation_reports_identical_across_invocations(teacher_run, tmp_path):
    outs = []
    for name in ("x", "y"):
        out = tmp_path / name
        rc = main(["ablate-distill", "--preset", "tiny", "--seed", "9",
                   "--out", str(out), "--seeds", "1",
                   "--teacher", str(teacher_run / "teacher.pkpt"), *MICRO,
                   "--stage.max_ffn", "0", "--stage.max_att", "0",
                   "--stage.max_inout", "0"])
        assert rc == 0
        outs.append(out)
    a = (outs[0] / "metrics.jsonl").read_bytes()
    b = (outs[1] / "metrics.jsonl").read_bytes()
    assert a == b
