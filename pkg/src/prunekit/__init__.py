"""prunekit: multi-stage structured pruning + distillation for small
decoder-only transformers, built on a numpy reverse-mode tensor core."""

from .tensor import (
    ComputeGraph,
    ContractError,
    DimensionError,
    NumericError,
    Tensor,
)
from .model import (
    ModelConfig,
    ModelState,
    forward,
    init_model,
    param_count,
    shape_audit,
)
from .checkpoint import CheckpointError, load_model, save_model
from .taskgen import (
    Dataset,
    Sample,
    TaskSpec,
    accuracy,
    default_task_specs,
    generate_split,
    throughput,
)
from .importance import (
    ImportanceReport,
    accumulate_element_importance,
    aggregate_attention,
    aggregate_ffn,
    aggregate_in_out,
    compute_report,
)
from .distill import DistillConfig, distill_epochs, distill_loss, hard_label_loss
from .pruner import (
    PrunePlan,
    RunLog,
    StageConfig,
    apply_plan,
    plan_param_delta,
    run_oneshot,
    run_pipeline,
    run_single_stage,
    run_stage,
    select_blocks,
    select_dims,
    split_for_pipeline,
)
from .train import TrainConfig, train_teacher
from .config import RunConfig, desk_preset, paper_ratios_preset, tiny_preset

__version__ = "0.1.0"
