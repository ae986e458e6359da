"""Operator surface: train the teacher, compress, ablate, evaluate.

Every command is reproducible from (config, seed): metrics records and
checkpoints are bitwise identical across re-runs. Wall-clock quantities
(timings, decode throughput) are real measurements and therefore live in
the run log and stdout, not in the metrics records.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import platform
import sys

import numpy as np

from . import checkpoint
from .checkpoint import CheckpointError
from .config import PRESETS, RunConfig, load_config_file, set_key, write_config_file
from .model import ModelState, init_model, param_count
from .pruner import (
    STAGE_ORDER,
    PipelineData,
    RunLog,
    gradual_epoch_budget,
    run_oneshot,
    run_pipeline,
    run_single_stage,
    split_for_pipeline,
)
from .taskgen import TASK_NAMES, accuracy, default_task_specs, generate_split, throughput
from .tensor import ContractError, NumericError
from .train import train_teacher

COMMANDS = (
    "train-teacher",
    "compress",
    "oneshot",
    "single-stage",
    "evaluate",
    "ablate-distill",
    "ablate-prune",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def build_config(args, overrides: list[tuple[str, str]]) -> RunConfig:
    cfg = PRESETS[args.preset]()
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        load_config_file(cfg, args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    for key, value in overrides:
        set_key(cfg, key, value)
    return cfg


def _extract_overrides(extras: list[str]) -> list[tuple[str, str]]:
    """Turn leftover ``--section.key value`` / ``--section.key=value`` args
    into override pairs."""
    out = []
    i = 0
    while i < len(extras):
        tok = extras[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, _, value = body.partition("=")
            out.append((key, value))
            i += 1
        else:
            if i + 1 >= len(extras):
                raise UsageError(f"flag {tok!r} needs a value")
            out.append((body, extras[i + 1]))
            i += 2
    return out


class OutputLock:
    """Guards an output directory against concurrent runs."""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, ".lock")
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory is locked by another run: {self.path}"
            ) from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, exc_type, exc, tb):
        if self.fd is not None:
            os.close(self.fd)
            os.remove(self.path)
        return False


def write_metrics(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def render_table(headers: list[str], rows: list[list]) -> str:
    cells = [headers] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for r, row in enumerate(cells):
        lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(row)).rstrip())
        if r == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _hardware() -> str:
    return f"{platform.machine()} {platform.system()}, {os.cpu_count()} cpus"


def _prepare_data(cfg: RunConfig):
    specs = default_task_specs(cfg.data.rule_seed)
    if cfg.data.train_size < 1 or cfg.data.test_size < 1:
        raise UsageError("data.train_size and data.test_size must be >= 1")
    d_p, d_d, d_t = generate_split(
        specs,
        {"train": cfg.data.train_size, "test": cfg.data.test_size},
        seed=cfg.seed,
        pruning_fraction=cfg.data.pruning_fraction,
    )
    return specs, d_p, d_d, d_t


def _pipeline_data(cfg: RunConfig, d_p, d_d) -> PipelineData:
    return split_for_pipeline(
        d_p, d_d,
        val_size=cfg.data.val_size,
        importance_samples=cfg.data.importance_samples,
        gate_samples=cfg.data.gate_samples,
    )


def _eval_record(model: ModelState, dataset, label: str) -> dict:
    rep = accuracy(model, dataset)
    return {
        "event": "evaluate",
        "label": label,
        "overall_accuracy": rep.overall,
        "per_task": {TASK_NAMES[t]: rep.per_task[t] for t in sorted(rep.per_task)},
        "param_count": param_count(model.config),
        "n_samples": rep.n,
    }


def _summary_rows(entries, d_t):
    """Table rows: label, params, decode rate, per-task + overall accuracy."""
    rows = []
    for label, model in entries:
        rec = _eval_record(model, d_t, label)
        rate = throughput(model, d_t, n_samples=32)
        rows.append(
            [
                label,
                rec["param_count"],
                f"{rate:.2f}",
                *(f"{rec['per_task'][TASK_NAMES[t]]:.3f}" for t in range(len(TASK_NAMES))),
                f"{rec['overall_accuracy']:.3f}",
            ]
        )
    return rows


def _write_run_outputs(out, cfg, log: RunLog, metrics: list[dict]):
    os.makedirs(out, exist_ok=True)
    write_config_file(cfg, os.path.join(out, "config.resolved"))
    log.write_jsonl(os.path.join(out, "runlog.jsonl"))
    write_metrics(os.path.join(out, "metrics.jsonl"), metrics)


# ---------------------------------------------------------------------------
# commands


def cmd_train_teacher(cfg: RunConfig, out: str) -> int:
    _, d_p, d_d, d_t = _prepare_data(cfg)
    data = _pipeline_data(cfg, d_p, d_d)
    model = init_model(cfg.model, seed=_derive_seed(cfg.seed, 2))
    result = train_teacher(model, data.d_d, data.val, cfg.train,
                           seed=_derive_seed(cfg.seed, 3))
    os.makedirs(out, exist_ok=True)
    with OutputLock(out):
        ckpt = os.path.join(out, "teacher.pkpt")
        checkpoint.save_model(result.model, ckpt)
        metrics = [
            {"event": "train_epoch", **h} for h in result.history
        ]
        metrics.append(_eval_record(result.model, d_t, "teacher_test"))
        metrics.append(
            {
                "event": "summary",
                "command": "train-teacher",
                "epochs_run": result.epochs_run,
                "param_count": param_count(result.model.config),
                "checkpoint": "teacher.pkpt",
            }
        )
        log = RunLog()
        log.append(event="train_teacher", epochs=result.epochs_run,
                   wall_time=round(result.wall_time, 3), hardware=_hardware())
        _write_run_outputs(out, cfg, log, metrics)
    final = metrics[-2]
    print(f"teacher trained: {result.epochs_run} epochs, "
          f"test accuracy {final['overall_accuracy']:.3f}, saved {ckpt}")
    return 0


def _load_teacher(path: str) -> ModelState:
    if not os.path.exists(path):
        raise UsageError(f"teacher checkpoint not found: {path}")
    return checkpoint.load_model(path)


def cmd_compress(cfg: RunConfig, out: str, teacher_path: str) -> int:
    teacher = _load_teacher(teacher_path)
    _, d_p, d_d, d_t = _prepare_data(cfg)
    data = _pipeline_data(cfg, d_p, d_d)
    os.makedirs(out, exist_ok=True)
    with OutputLock(out):
        log = RunLog()
        result = run_pipeline(teacher, cfg.stage, cfg.distill, data,
                              seed=cfg.seed, log=log)
        checkpoint.save_model(result.model, os.path.join(out, "student.pkpt"))
        for kind, model in result.stage_models.items():
            checkpoint.save_model(model, os.path.join(out, f"stage_{kind}.pkpt"))
        for kind, model in result.stage_rollbacks.items():
            checkpoint.save_model(model, os.path.join(out, f"rollback_{kind}.pkpt"))

        entries = [("original", teacher)]
        labels = {
            "blocks": "after_block_pruning",
            "att_inter": "after_inter_module_pruning",
            "in_out": "after_in_out_pruning",
        }
        for kind in STAGE_ORDER:
            if kind in labels and kind in result.stage_models:
                entries.append((labels[kind], result.stage_models[kind]))
        metrics = [_eval_record(m, d_t, label) for label, m in entries]
        metrics.append(
            {
                "event": "summary",
                "command": "compress",
                "final_params": param_count(result.model.config),
                "teacher_params": param_count(teacher.config),
                "reduction": param_count(teacher.config) / param_count(result.model.config),
                "final_accuracy": metrics[-1]["overall_accuracy"],
                "total_distill_epochs": result.total_epochs,
            }
        )
        table = render_table(
            ["model", "params", "decode/s", *TASK_NAMES, "overall"],
            _summary_rows(entries, d_t),
        )
        with open(os.path.join(out, "summary.txt"), "w", encoding="utf-8") as fh:
            fh.write(table)
            fh.write(f"\nhardware: {_hardware()}\n")
        _write_run_outputs(out, cfg, log, metrics)
    print(table, end="")
    return 0


def cmd_oneshot(cfg: RunConfig, out: str, teacher_path: str, scope: str,
                epochs: int | None) -> int:
    teacher = _load_teacher(teacher_path)
    _, d_p, d_d, d_t = _prepare_data(cfg)
    data = _pipeline_data(cfg, d_p, d_d)
    os.makedirs(out, exist_ok=True)
    with OutputLock(out):
        log = RunLog()
        result = run_oneshot(teacher, cfg.stage, cfg.distill, data, scope=scope,
                             seed=cfg.seed, matched_epochs=epochs, log=log)
        checkpoint.save_model(result.model, os.path.join(out, "student.pkpt"))
        metrics = [
            _eval_record(teacher, d_t, "original"),
            _eval_record(result.model, d_t, f"oneshot_{scope}"),
        ]
        metrics.append(
            {
                "event": "summary",
                "command": "oneshot",
                "scope": scope,
                "final_params": param_count(result.model.config),
                "final_accuracy": metrics[-1]["overall_accuracy"],
                "total_distill_epochs": result.total_epochs,
            }
        )
        _write_run_outputs(out, cfg, log, metrics)
    print(f"oneshot {scope}: params {param_count(result.model.config)}, "
          f"accuracy {metrics[-2]['overall_accuracy']:.3f}")
    return 0


def cmd_single_stage(cfg: RunConfig, out: str, teacher_path: str, kind: str) -> int:
    teacher = _load_teacher(teacher_path)
    _, d_p, d_d, d_t = _prepare_data(cfg)
    data = _pipeline_data(cfg, d_p, d_d)
    os.makedirs(out, exist_ok=True)
    with OutputLock(out):
        log = RunLog()
        result = run_single_stage(teacher, kind, cfg.stage, cfg.distill, data,
                                  seed=cfg.seed, log=log)
        checkpoint.save_model(result.model, os.path.join(out, "student.pkpt"))
        metrics = [
            _eval_record(teacher, d_t, "original"),
            _eval_record(result.model, d_t, f"single_stage_{kind}"),
            {
                "event": "summary",
                "command": "single-stage",
                "stage": kind,
                "final_params": param_count(result.model.config),
                "total_distill_epochs": result.total_epochs,
            },
        ]
        _write_run_outputs(out, cfg, log, metrics)
    print(f"single-stage {kind}: params {param_count(result.model.config)}, "
          f"accuracy {metrics[-2]['overall_accuracy']:.3f}")
    return 0


def cmd_evaluate(cfg: RunConfig, out: str, ckpt_path: str) -> int:
    if not os.path.exists(ckpt_path):
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    model = checkpoint.load_model(ckpt_path)
    _, _, _, d_t = _prepare_data(cfg)
    os.makedirs(out, exist_ok=True)
    with OutputLock(out):
        rec = _eval_record(model, d_t, "evaluate")
        metrics = [rec, {"event": "summary", "command": "evaluate", **{
            "overall_accuracy": rec["overall_accuracy"],
            "param_count": rec["param_count"],
        }}]
        rate = throughput(model, d_t, n_samples=64)
        log = RunLog()
        log.append(event="throughput", throughput=rate, hardware=_hardware())
        _write_run_outputs(out, cfg, log, metrics)
    print(f"accuracy {rec['overall_accuracy']:.4f} on {rec['n_samples']} samples; "
          f"params {rec['param_count']}; decode {rate:.2f} samples/s ({_hardware()})")
    return 0


def cmd_ablate_distill(cfg: RunConfig, out: str, teacher_path: str,
                       seeds: list[int]) -> int:
    teacher = _load_teacher(teacher_path)
    arms = ("kl_only", "hard_label", "kl_pairwise")
    os.makedirs(out, exist_ok=True)
    with OutputLock(out):
        metrics = []
        rows = []
        for arm in arms:
            for seed in seeds:
                run_cfg = copy.deepcopy(cfg)
                run_cfg.seed = seed
                run_cfg.distill.loss_variant = arm
                if arm == "kl_only":
                    run_cfg.distill.gamma = 0.0
                _, d_p, d_d, d_t = _prepare_data(run_cfg)
                data = _pipeline_data(run_cfg, d_p, d_d)
                try:
                    result = run_pipeline(teacher, run_cfg.stage, run_cfg.distill,
                                          data, seed=seed)
                    rec = _eval_record(result.model, d_t, f"{arm}_seed{seed}")
                    rec.update(event="ablation_arm", family="distill", arm=arm,
                               seed=seed, failed=False)
                except NumericError as exc:
                    rec = {"event": "ablation_arm", "family": "distill", "arm": arm,
                           "seed": seed, "failed": True, "error": str(exc)}
                metrics.append(rec)
                rows.append([arm, seed,
                             rec.get("param_count", "-"),
                             f"{rec['overall_accuracy']:.3f}" if not rec["failed"] else "FAILED"])
        table = render_table(["arm", "seed", "params", "accuracy"], rows)
        with open(os.path.join(out, "distill_ablation.txt"), "w", encoding="utf-8") as fh:
            fh.write(table)
        _write_run_outputs(out, cfg, RunLog(), metrics)
    print(table, end="")
    return 0


def cmd_ablate_prune(cfg: RunConfig, out: str, teacher_path: str,
                     seeds: list[int]) -> int:
    teacher = _load_teacher(teacher_path)
    os.makedirs(out, exist_ok=True)
    with OutputLock(out):
        metrics = []
        rows = []
        for seed in seeds:
            run_cfg = copy.deepcopy(cfg)
            run_cfg.seed = seed
            _, d_p, d_d, d_t = _prepare_data(run_cfg)
            data = _pipeline_data(run_cfg, d_p, d_d)
            arm_runs = []
            gradual_epochs = {}
            for kind in STAGE_ORDER:
                arm_runs.append((f"{kind}_only", lambda k=kind: run_single_stage(
                    teacher, k, run_cfg.stage, run_cfg.distill, data, seed=seed)))
            for kind in STAGE_ORDER:
                arm_runs.append((f"{kind}_only_oneshot", lambda k=kind: run_oneshot(
                    teacher, run_cfg.stage, run_cfg.distill, data, scope=k,
                    seed=seed, matched_epochs=gradual_epochs.get(k))))
            arm_runs.append(("all_stages", lambda: run_pipeline(
                teacher, run_cfg.stage, run_cfg.distill, data, seed=seed)))
            arm_runs.append(("all_stages_oneshot", lambda: run_oneshot(
                teacher, run_cfg.stage, run_cfg.distill, data, scope="all",
                seed=seed, matched_epochs=gradual_epochs.get("all"))))
            for name, runner in arm_runs:
                try:
                    result = runner()
                    if name.endswith("_only"):
                        gradual_epochs[name[: -len("_only")]] = result.total_epochs
                    if name == "all_stages":
                        gradual_epochs["all"] = result.total_epochs
                    rec = _eval_record(result.model, d_t, f"{name}_seed{seed}")
                    rec.update(event="ablation_arm", family="prune", arm=name,
                               seed=seed, failed=False,
                               distill_epochs=result.total_epochs)
                except NumericError as exc:
                    rec = {"event": "ablation_arm", "family": "prune", "arm": name,
                           "seed": seed, "failed": True, "error": str(exc)}
                metrics.append(rec)
                rows.append([name, seed,
                             rec.get("param_count", "-"),
                             f"{rec['overall_accuracy']:.3f}" if not rec["failed"] else "FAILED"])
        table = render_table(["arm", "seed", "params", "accuracy"], rows)
        with open(os.path.join(out, "prune_ablation.txt"), "w", encoding="utf-8") as fh:
            fh.write(table)
        _write_run_outputs(out, cfg, RunLog(), metrics)
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _parser() -> _Parser:
    p = _Parser(prog="prunekit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="key=value config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default="runs/" + name)
        sp.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        if name in ("compress", "oneshot", "single-stage", "ablate-distill", "ablate-prune"):
            sp.add_argument("--teacher", required=True, help="teacher checkpoint path")
        if name == "oneshot":
            sp.add_argument("--scope", default="all",
                            choices=("all",) + STAGE_ORDER)
            sp.add_argument("--epochs", type=int, default=None,
                            help="override the matched distill epoch budget")
        if name == "single-stage":
            sp.add_argument("--stage", required=True, choices=STAGE_ORDER)
        if name == "evaluate":
            sp.add_argument("--checkpoint", required=True)
        if name in ("ablate-distill", "ablate-prune"):
            sp.add_argument("--seeds", default="0,1,2",
                            help="comma-separated seed list")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extras = _parser().parse_known_args(argv)
        overrides = _extract_overrides(extras)
        cfg = build_config(args, overrides)
        if args.command == "train-teacher":
            return cmd_train_teacher(cfg, args.out)
        if args.command == "compress":
            return cmd_compress(cfg, args.out, args.teacher)
        if args.command == "oneshot":
            return cmd_oneshot(cfg, args.out, args.teacher, args.scope, args.epochs)
        if args.command == "single-stage":
            return cmd_single_stage(cfg, args.out, args.teacher, args.stage)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.out, args.checkpoint)
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        if args.command == "ablate-distill":
            return cmd_ablate_distill(cfg, args.out, args.teacher, seeds)
        return cmd_ablate_prune(cfg, args.out, args.teacher, seeds)
    except (UsageError, ContractError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, NumericError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
