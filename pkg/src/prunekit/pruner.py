"""Multi-stage structured pruning: tolerance-gated prune/distill loops.

The pipeline runs four stages in a fixed order — whole blocks (removed from
the end), FFN hidden units, attention head channels, then model-width
coordinates — each as a loop of: measure, check the tolerance gate, build a
plan, physically remove the structures, distill against the frozen teacher,
measure again. A stage stops once its accuracy drop since stage start
reaches ``alpha`` or its removal budget is spent. The iteration that first
breaches the gate stays applied; the pre-breach model is kept as a rollback
snapshot and reported alongside.

One-shot counterparts jump straight to the budget targets and then distill
with the same total epoch budget, for like-for-like comparisons.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .distill import DistillConfig, distill_epochs
from .importance import (
    ImportanceReport,
    accumulate_element_importance,
    compute_report,
)
from .model import ModelConfig, ModelState, clone_model, param_count, shape_audit
from .taskgen import Dataset, accuracy
from .tensor import ContractError, Tensor

STAGE_ORDER = ("blocks", "ffn_inter", "att_inter", "in_out")


class PlanError(ValueError):
    """A prune plan that cannot be applied to the given model."""


@dataclass
class StageConfig:
    """Knobs of the pruning loop: tolerance, distill epochs per iteration,
    and per-stage (step size, total budget) pairs."""

    alpha: float = 0.05
    epochs: int = 2
    blocks_per_iter: int = 1
    max_blocks: int = 4
    ffn_per_iter: int = 64
    max_ffn: int = 256
    att_per_iter: int = 4
    max_att: int = 16
    inout_per_iter: int = 16
    max_inout: int = 48
    refresh_importance: bool = True

    def validate(self):
        # The endpoints are degenerate but legal: alpha = 0 stops a stage at
        # its first gate check, alpha = 1 leaves the stage budget-limited.
        if not (0.0 <= self.alpha <= 1.0):
            raise ContractError("alpha must be in [0, 1]")
        for name in ("blocks_per_iter", "ffn_per_iter", "att_per_iter", "inout_per_iter"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        for name in ("epochs", "max_blocks", "max_ffn", "max_att", "max_inout"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")

    def step_and_budget(self, kind: str) -> tuple[int, int]:
        return {
            "blocks": (self.blocks_per_iter, self.max_blocks),
            "ffn_inter": (self.ffn_per_iter, self.max_ffn),
            "att_inter": (self.att_per_iter, self.max_att),
            "in_out": (self.inout_per_iter, self.max_inout),
        }[kind]


@dataclass(frozen=True)
class PrunePlan:
    """An explicit, checkable description of one iteration's removals.

    ``targets`` is a tuple of block indices for kind "blocks", a per-block
    tuple of sorted index tuples for the two inter-module kinds, and a
    single sorted index tuple for "in_out".
    """

    kind: str
    targets: tuple

    def summary(self) -> str:
        if self.kind == "blocks":
            return f"blocks {list(self.targets)}"
        if self.kind == "in_out":
            return f"in_out {len(self.targets)} dims"
        return f"{self.kind} {len(self.targets[0]) if self.targets else 0} dims/block"


def _check_indices(idx, limit, label):
    idx = tuple(int(i) for i in idx)
    if len(set(idx)) != len(idx):
        raise PlanError(f"duplicate {label} indices: {idx}")
    for i in idx:
        if not (0 <= i < limit):
            raise PlanError(f"{label} index {i} out of range [0, {limit})")
    return tuple(sorted(idx))


def validate_plan(plan: PrunePlan, config: ModelConfig) -> PrunePlan:
    """Normalize and range-check a plan against a config."""
    if plan.kind == "blocks":
        targets = _check_indices(plan.targets, config.n_blocks, "block")
        if len(targets) >= config.n_blocks:
            raise ContractError("plan would remove every block")
        return PrunePlan("blocks", targets)
    if plan.kind in ("ffn_inter", "att_inter"):
        limit = config.d_ffn if plan.kind == "ffn_inter" else config.d_head
        if len(plan.targets) != config.n_blocks:
            raise PlanError(
                f"{plan.kind} plan has {len(plan.targets)} block lists, "
                f"model has {config.n_blocks} blocks"
            )
        per_block = tuple(_check_indices(t, limit, plan.kind) for t in plan.targets)
        counts = {len(t) for t in per_block}
        if len(counts) > 1:
            raise PlanError(f"{plan.kind} plan removes unequal counts per block: {counts}")
        if per_block and len(per_block[0]) >= limit:
            raise ContractError(f"plan would remove every {plan.kind} dimension")
        return PrunePlan(plan.kind, per_block)
    if plan.kind == "in_out":
        targets = _check_indices(plan.targets, config.d_model, "in_out")
        if len(targets) >= config.d_model:
            raise ContractError("plan would remove every model-width dimension")
        return PrunePlan("in_out", targets)
    raise PlanError(f"unknown plan kind {plan.kind!r}")


def config_after(config: ModelConfig, plan: PrunePlan) -> ModelConfig:
    if plan.kind == "blocks":
        return replace(config, n_blocks=config.n_blocks - len(plan.targets))
    if plan.kind == "ffn_inter":
        drop = len(plan.targets[0]) if plan.targets else 0
        return replace(config, d_ffn=config.d_ffn - drop)
    if plan.kind == "att_inter":
        drop = len(plan.targets[0]) if plan.targets else 0
        return replace(config, d_head=config.d_head - drop)
    return replace(config, d_model=config.d_model - len(plan.targets))


def plan_param_delta(config: ModelConfig, plan: PrunePlan) -> int:
    """Exact closed-form parameter drop the plan will cause."""
    return param_count(config) - param_count(config_after(config, plan))


def apply_plan(model: ModelState, plan: PrunePlan) -> ModelState:
    """Physically remove the planned structures; returns a new model.

    Surviving weights are copied; the new model passes shape_audit and its
    parameter count drops by exactly plan_param_delta.
    """
    cfg = model.config
    plan = validate_plan(plan, cfg)
    new_cfg = config_after(cfg, plan)
    params: dict[str, Tensor] = {}

    if plan.kind == "blocks":
        keep = [b for b in range(cfg.n_blocks) if b not in set(plan.targets)]
        for name, p in model.params.items():
            if not name.startswith("blocks."):
                params[name] = p.copy()
        for new_b, old_b in enumerate(keep):
            old_pre, new_pre = f"blocks.{old_b}.", f"blocks.{new_b}."
            for name, p in model.params.items():
                if name.startswith(old_pre):
                    params[new_pre + name[len(old_pre):]] = p.copy()
    elif plan.kind == "ffn_inter":
        for name, p in model.params.items():
            params[name] = p.copy()
        for b in range(cfg.n_blocks):
            idx = list(plan.targets[b])
            pre = f"blocks.{b}.ffn."
            params[pre + "w_in"] = Tensor(np.delete(model.params[pre + "w_in"].data, idx, axis=0))
            params[pre + "w_out"] = Tensor(np.delete(model.params[pre + "w_out"].data, idx, axis=1))
    elif plan.kind == "att_inter":
        for name, p in model.params.items():
            params[name] = p.copy()
        for b in range(cfg.n_blocks):
            idx = list(plan.targets[b])
            pre = f"blocks.{b}.attn."
            for nm in ("wq", "wk", "wv"):
                params[pre + nm] = Tensor(np.delete(model.params[pre + nm].data, idx, axis=2))
            params[pre + "wo"] = Tensor(np.delete(model.params[pre + "wo"].data, idx, axis=1))
    else:  # in_out
        idx = list(plan.targets)
        for name, p in model.params.items():
            d = p.data
            if name in ("tok_emb", "pos_emb", "head"):
                d = np.delete(d, idx, axis=1)
            elif name.endswith((".scale", ".shift")):
                d = np.delete(d, idx, axis=0)
            elif name.endswith(("wq", "wk", "wv")):
                d = np.delete(d, idx, axis=1)
            elif name.endswith("wo"):
                d = np.delete(d, idx, axis=2)
            elif name.endswith("w_in"):
                d = np.delete(d, idx, axis=1)
            elif name.endswith("w_out"):
                d = np.delete(d, idx, axis=0)
            params[name] = Tensor(np.ascontiguousarray(d))

    new_model = ModelState(config=new_cfg, params=params)
    violations = shape_audit(new_model)
    if violations:
        raise PlanError(f"surgery left an inconsistent model: {violations[0]}")
    return new_model


def select_blocks(config: ModelConfig, count: int) -> PrunePlan:
    """Blocks are always removed from the end of the stack."""
    if count >= config.n_blocks:
        raise ContractError(
            f"cannot remove {count} of {config.n_blocks} blocks (must keep >= 1)"
        )
    return PrunePlan("blocks", tuple(range(config.n_blocks - count, config.n_blocks)))


def select_dims(report: ImportanceReport, kind: str, count: int) -> PrunePlan:
    """The ``count`` lowest-importance indices, per block for the
    inter-module kinds, globally for in_out. Ties break to the lower index."""

    def lowest(vec: np.ndarray) -> tuple:
        if count > len(vec) - 1:
            raise ContractError(
                f"cannot remove {count} of {len(vec)} {kind} dims (must keep >= 1)"
            )
        order = np.argsort(vec, kind="stable")
        return tuple(sorted(int(i) for i in order[:count]))

    if kind == "ffn_inter":
        return PrunePlan(kind, tuple(lowest(v) for v in report.ffn_inter))
    if kind == "att_inter":
        return PrunePlan(kind, tuple(lowest(v) for v in report.att_inter))
    if kind == "in_out":
        return PrunePlan(kind, lowest(report.in_out))
    raise PlanError(f"select_dims cannot build plans of kind {kind!r}")


# ---------------------------------------------------------------------------
# run log


class RunLog:
    """Append-only event log; one dict per event, rendered as JSON lines.

    ``wall_time`` and other timing fields are the only non-reproducible
    content; ``deterministic_records`` strips them for bitwise comparisons.
    """

    VOLATILE = ("wall_time", "throughput")

    def __init__(self):
        self.records: list[dict] = []

    def append(self, **fields) -> dict:
        self.records.append(fields)
        return fields

    def deterministic_records(self) -> list[dict]:
        return [
            {k: v for k, v in rec.items() if k not in self.VOLATILE}
            for rec in self.records
        ]

    def write_jsonl(self, path, deterministic: bool = False) -> None:
        records = self.deterministic_records() if deterministic else self.records
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# the gated loop


@dataclass
class PipelineData:
    """Datasets the pipeline touches: scoring set, distill set, and the
    validation split carved off the distill set for the tolerance gate."""

    d_p: Dataset
    d_d: Dataset
    val: Dataset
    importance_samples: int | None = None
    gate_samples: int = 1024


def split_for_pipeline(d_p: Dataset, d_d: Dataset, val_size: int,
                       importance_samples: int | None = None,
                       gate_samples: int = 1024) -> PipelineData:
    """Carve the last ``val_size`` rows of D_d off as the gate split."""
    if val_size < 1 or val_size >= d_d.n:
        raise ContractError("val_size must be in [1, len(d_d))")
    train_rows = np.arange(d_d.n - val_size)
    val_rows = np.arange(d_d.n - val_size, d_d.n)
    return PipelineData(
        d_p=d_p,
        d_d=d_d.subset(train_rows),
        val=d_d.subset(val_rows),
        importance_samples=importance_samples,
        gate_samples=gate_samples,
    )


def _measure(model: ModelState, data: PipelineData) -> tuple[float, float]:
    """(gate accuracy on the validation split, accuracy on a fixed slice of
    the distillation set — the latter is logged, never gated on)."""
    val_acc = accuracy(model, data.val).overall
    rows = np.arange(min(data.gate_samples, data.d_d.n))
    dd_acc = accuracy(model, data.d_d.subset(rows)).overall
    return val_acc, dd_acc


def _iter_seed(seed: int, stage: str, iteration: int) -> int:
    ss = np.random.SeedSequence([seed, STAGE_ORDER.index(stage), iteration])
    return int(ss.generate_state(1)[0])


@dataclass
class StageResult:
    model: ModelState
    rollback: ModelState | None
    perf_start: float | None
    perf_end: float | None
    records: list[dict] = field(default_factory=list)
    total_epochs: int = 0
    aborted: bool = False


def _available(config: ModelConfig, kind: str) -> int:
    return {
        "blocks": config.n_blocks,
        "ffn_inter": config.d_ffn,
        "att_inter": config.d_head,
        "in_out": config.d_model,
    }[kind]


def build_plan(model: ModelState, kind: str, count: int,
               data: PipelineData) -> PrunePlan:
    if kind == "blocks":
        return select_blocks(model.config, count)
    elem = accumulate_element_importance(
        model, data.d_p, max_samples=data.importance_samples
    )
    report = compute_report(model, elem)
    return select_dims(report, kind, count)


def run_stage(model: ModelState, kind: str, stage_cfg: StageConfig,
              distill_cfg: DistillConfig, teacher: ModelState,
              data: PipelineData, seed: int, log: RunLog) -> StageResult:
    """One tolerance-gated stage. Returns the final model (gate semantics:
    the breaching iteration stays applied) plus the pre-breach rollback."""
    stage_cfg.validate()
    per_iter, max_total = stage_cfg.step_and_budget(kind)
    budget = min(max_total, _available(model.config, kind) - 1)
    if budget <= 0:
        return StageResult(model, None, None, None, [], 0)
    if budget < max_total:
        log.append(event="budget_clip", stage=kind, requested=max_total, usable=budget)

    p_start, dd_start = _measure(model, data)
    log.append(event="stage_start", stage=kind, perf=p_start, dd_perf=dd_start,
               params=param_count(model.config))
    result = StageResult(model, None, p_start, p_start, [], 0)
    removed = 0
    iteration = 0
    p_cur = p_start

    while (p_start - p_cur < stage_cfg.alpha) and (removed < budget):
        t0 = time.perf_counter()
        step = min(per_iter, budget - removed)
        plan = build_plan(result.model, kind, step, data)
        prev = result.model
        params_before = param_count(prev.config)
        predicted = plan_param_delta(prev.config, plan)
        pruned = apply_plan(prev, plan)
        params_after = param_count(pruned.config)
        assert params_before - params_after == predicted

        dres = distill_epochs(
            pruned, teacher, data.d_d, distill_cfg,
            seed=_iter_seed(seed, kind, iteration),
        )
        result.total_epochs += dres.epochs_run
        if dres.diverged:
            log.append(event="distill_divergence", stage=kind, iteration=iteration,
                       epochs_completed=dres.epochs_run)
            result.aborted = True
            result.perf_end = p_cur
            return result  # last good model: the pre-iteration one

        p_new, dd_new = _measure(pruned, data)
        record = log.append(
            event="iteration", stage=kind, iteration=iteration,
            plan=plan.summary(), clipped=step < per_iter,
            params_before=params_before, params_after=params_after,
            predicted_delta=predicted,
            perf_before=p_cur, perf_after=p_new, dd_perf_after=dd_new,
            distill_epochs=dres.epochs_run,
            distill_loss=dres.epoch_losses[-1] if dres.epoch_losses else None,
            wall_time=round(time.perf_counter() - t0, 3),
        )
        result.records.append(record)
        if p_start - p_new >= stage_cfg.alpha and result.rollback is None:
            result.rollback = prev
            log.append(event="gate_breach", stage=kind, iteration=iteration,
                       perf_start=p_start, perf=p_new,
                       rollback_perf=p_cur)
        result.model = pruned
        removed += step
        iteration += 1
        p_cur = p_new

    result.perf_end = p_cur
    log.append(event="stage_end", stage=kind, perf=p_cur,
               params=param_count(result.model.config),
               iterations=iteration, removed=removed,
               epochs=result.total_epochs)
    return result


@dataclass
class PipelineResult:
    model: ModelState
    log: RunLog
    stage_models: dict[str, ModelState]
    stage_rollbacks: dict[str, ModelState]
    total_epochs: int


def run_pipeline(teacher: ModelState, stage_cfg: StageConfig,
                 distill_cfg: DistillConfig, data: PipelineData,
                 seed: int = 0, log: RunLog | None = None) -> PipelineResult:
    """All four stages in the fixed order; the teacher is never modified."""
    log = log if log is not None else RunLog()
    student = clone_model(teacher)
    stage_models: dict[str, ModelState] = {}
    rollbacks: dict[str, ModelState] = {}
    total_epochs = 0
    for kind in STAGE_ORDER:
        res = run_stage(student, kind, stage_cfg, distill_cfg, teacher, data, seed, log)
        student = res.model
        total_epochs += res.total_epochs
        stage_models[kind] = student
        if res.rollback is not None:
            rollbacks[kind] = res.rollback
        if res.aborted:
            break
    return PipelineResult(student, log, stage_models, rollbacks, total_epochs)


def gradual_epoch_budget(config: ModelConfig, stage_cfg: StageConfig,
                         scope: str = "all") -> int:
    """Distill epochs a budget-limited gradual run would use: one E-epoch
    burst per iteration, per included stage."""
    total = 0
    cfg = config
    for kind in STAGE_ORDER:
        if scope not in ("all", kind):
            continue
        per_iter, max_total = stage_cfg.step_and_budget(kind)
        budget = min(max_total, _available(cfg, kind) - 1)
        if budget > 0:
            iters = (budget + per_iter - 1) // per_iter
            total += iters * stage_cfg.epochs
    return total


def run_oneshot(teacher: ModelState, stage_cfg: StageConfig,
                distill_cfg: DistillConfig, data: PipelineData,
                scope: str = "all", seed: int = 0,
                matched_epochs: int | None = None,
                log: RunLog | None = None) -> PipelineResult:
    """Prune straight to the budget targets, then distill once with the
    same total epoch budget the gradual counterpart would use."""
    if scope not in STAGE_ORDER and scope != "all":
        raise ContractError(f"oneshot scope must be a stage kind or 'all', got {scope!r}")
    log = log if log is not None else RunLog()
    student = clone_model(teacher)
    stage_models: dict[str, ModelState] = {}

    def target(kind: str) -> int:
        per_iter, max_total = stage_cfg.step_and_budget(kind)
        return min(max_total, _available(student.config, kind) - 1)

    if scope in ("all", "blocks"):
        k = target("blocks")
        if k > 0:
            plan = select_blocks(student.config, k)
            log.append(event="oneshot_prune", stage="blocks", plan=plan.summary(),
                       params_before=param_count(student.config),
                       params_after=param_count(config_after(student.config, plan)))
            student = apply_plan(student, plan)
    dim_kinds = [k for k in ("ffn_inter", "att_inter", "in_out") if scope in ("all", k)]
    counts = {k: target(k) for k in dim_kinds}
    if any(counts.get(k, 0) > 0 for k in dim_kinds):
        elem = accumulate_element_importance(
            student, data.d_p, max_samples=data.importance_samples
        )
        report = compute_report(student, elem)
        for kind in dim_kinds:
            if counts[kind] <= 0:
                continue
            plan = select_dims(report, kind, counts[kind])
            log.append(event="oneshot_prune", stage=kind, plan=plan.summary(),
                       params_before=param_count(student.config),
                       params_after=param_count(config_after(student.config, plan)))
            student = apply_plan(student, plan)

    epochs = (
        matched_epochs if matched_epochs is not None
        else gradual_epoch_budget(teacher.config, stage_cfg, scope)
    )
    dres = distill_epochs(student, teacher, data.d_d, distill_cfg,
                          seed=_iter_seed(seed, "blocks", 10_000), epochs=epochs)
    if dres.diverged:
        log.append(event="distill_divergence", stage="oneshot",
                   epochs_completed=dres.epochs_run)
    perf, dd_perf = _measure(student, data)
    log.append(event="oneshot_end", scope=scope, perf=perf, dd_perf=dd_perf,
               params=param_count(student.config), epochs=dres.epochs_run)
    stage_models[scope] = student
    return PipelineResult(student, log, stage_models, {}, dres.epochs_run)


def run_single_stage(teacher: ModelState, kind: str, stage_cfg: StageConfig,
                     distill_cfg: DistillConfig, data: PipelineData,
                     seed: int = 0, log: RunLog | None = None) -> PipelineResult:
    """Gradual pruning of one stage only (ablation arm)."""
    if kind not in STAGE_ORDER:
        raise ContractError(f"unknown stage kind {kind!r}")
    log = log if log is not None else RunLog()
    student = clone_model(teacher)
    res = run_stage(student, kind, stage_cfg, distill_cfg, teacher, data, seed, log)
    rollbacks = {kind: res.rollback} if res.rollback is not None else {}
    return PipelineResult(res.model, log, {kind: res.model}, rollbacks, res.total_epochs)
