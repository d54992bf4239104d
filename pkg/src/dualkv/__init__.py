"""Shared-prompt two-region attention: a CPU-executable reference.

RL post-training packs N sampled responses that all condition on one
prompt.  Replicated-prompt packing recomputes that prompt N times per
step; this library implements the alternative as a pair of attention
calls over a single prompt copy -- context self-attention once, then a
two-region tiled online-softmax kernel whose decoded queries read the
shared context KV plus their own per-sequence decoded KV -- together with
the packing, gradient-accumulation, and data-pipeline machinery that make
the substitution exact, and analytic cost models quantifying when it pays.
"""

from .costmodel import (
    CostReport,
    Scenario,
    attention_flops,
    build_cost_report,
    kernel_memory_savings,
    memory_scaling_predict,
    speedup_attn,
    token_counts_vs_padded,
)
from .fa2 import VarlenBatch, fa2_varlen_bwd, fa2_varlen_fwd
from .kernel import (
    ContextGradScratch,
    DualKVInput,
    bf16_naive_accumulate,
    convert_dkv_context,
    dualkv_attention_varlen,
    dualkv_bwd,
    dualkv_fwd,
)
from .layer import ModelConfig, init_params, model_bwd, model_fwd, rmsnorm, rope
from .packing import (
    PackedBatch,
    RolloutGroup,
    RolloutResponse,
    compute_rho,
    pack_dualkv,
    pack_standard,
    token_reduction_ratio,
    unpack_batch,
    validate_grouping,
)
from .pipeline import (
    RolloutSample,
    StepPlan,
    aggregate_step_gradient,
    make_grouped_plan,
    simulate_balance_batch,
)
from .refattn import DenseAttentionCase, finite_diff_grad, ref_attention_bwd, ref_attention_fwd
from .tensor import Precision, Tensor, allclose, bf16_round, bf16_ulp, seeded_fill

__version__ = "0.1.0"
