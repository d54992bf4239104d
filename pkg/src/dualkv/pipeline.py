"""Training-step gradient aggregation over rollout multisets.

A training step holds a multiset of (prompt, response, advantage) samples.
The step gradient is the sum of per-sample gradients, evaluated here by
packing samples into micro-batch cells, running the toy model's backward
per cell, and summing the flattened gradients in a fixed order.

Two plan families are modeled:

* the default pipeline, which may reorder samples by length to balance
  ranks (`simulate_balance_batch`) and packs with replicated prompts;
* the grouped pipeline, which keeps same-prompt responses contiguous and
  co-located in one cell (`make_grouped_plan`) and packs with the shared
  prompt.

Both are permutations + partitions of the same multiset, so the aggregate
gradient is identical up to float64 reassociation -- that is the testable
no-systematic-bias property.  Ranks are simulated sequentially; advantages
arrive precomputed with the samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .layer import ModelConfig, ModelParams, model_bwd
from .packing import (
    MODE_DUALKV,
    MODE_STANDARD,
    RolloutGroup,
    RolloutResponse,
    pack_dualkv,
    pack_standard,
    validate_grouping,
)

__all__ = [
    "RolloutSample",
    "StepPlan",
    "aggregate_step_gradient",
    "simulate_balance_batch",
    "make_grouped_plan",
    "samples_to_groups",
    "groups_to_samples",
]

PLAN_DEFAULT = "default"
PLAN_DUALKV = "dualkv"


@dataclass
class RolloutSample:
    prompt_id: str
    prompt_tokens: List[int]
    response_tokens: List[int]
    advantage: float

    def __post_init__(self):
        if not np.isfinite(self.advantage):
            raise ValueError("advantage must be finite")

    @property
    def total_len(self) -> int:
        return len(self.prompt_tokens) + len(self.response_tokens)


@dataclass
class StepPlan:
    """Sample-index partition into (rank, micro-batch) cells."""

    partition: List[List[List[int]]]  # [rank][micro_batch] -> sample indices
    mode: str  # PLAN_DEFAULT or PLAN_DUALKV

    def cells(self) -> List[List[int]]:
        return [cell for rank in self.partition for cell in rank]

    def covered_indices(self) -> List[int]:
        return sorted(i for cell in self.cells() for i in cell)


def samples_to_groups(samples: Sequence[RolloutSample]) -> List[RolloutGroup]:
    """Group samples by prompt_id in first-appearance order."""
    order: List[str] = []
    by_id: Dict[str, List[RolloutSample]] = {}
    for s in samples:
        if s.prompt_id not in by_id:
            by_id[s.prompt_id] = []
            order.append(s.prompt_id)
        if by_id[s.prompt_id] and by_id[s.prompt_id][0].prompt_tokens != s.prompt_tokens:
            raise ValueError(f"prompt {s.prompt_id!r} has inconsistent prompt_tokens")
        by_id[s.prompt_id].append(s)
    return [
        RolloutGroup(
            pid,
            by_id[pid][0].prompt_tokens,
            [RolloutResponse(s.response_tokens, s.advantage) for s in by_id[pid]],
        )
        for pid in order
    ]


def groups_to_samples(groups: Sequence[RolloutGroup]) -> List[RolloutSample]:
    """Flatten rollout groups (e.g. parsed from a rollout file) into samples."""
    return [
        RolloutSample(g.prompt_id, g.prompt_tokens, resp.tokens, resp.advantage)
        for g in groups
        for resp in g.responses
    ]


def aggregate_step_gradient(
    samples: Sequence[RolloutSample],
    plan: StepPlan,
    config: ModelConfig,
    params: ModelParams,
) -> np.ndarray:
    """Sum of per-cell gradients over the plan, as a flat float64 vector.

    The plan must cover the sample multiset exactly.  Shared-prompt cells
    are checked against the co-location contract first: a cell holding only
    part of a prompt group is an error.
    """
    covered = plan.covered_indices()
    if covered != list(range(len(samples))):
        raise ValueError("plan does not cover the sample multiset exactly")

    if plan.mode == PLAN_DUALKV:
        group_sizes: Dict[str, int] = {}
        for s in samples:
            group_sizes[s.prompt_id] = group_sizes.get(s.prompt_id, 0) + 1
        cells_as_samples = [[samples[i] for i in cell] for cell in plan.cells()]
        report = validate_grouping(cells_as_samples)
        for cell in cells_as_samples:
            counts: Dict[str, int] = {}
            for s in cell:
                counts[s.prompt_id] = counts.get(s.prompt_id, 0) + 1
            for pid, n in counts.items():
                if n != group_sizes[pid]:
                    report.ok = False
                    report.violations.append(f"prompt {pid!r} is incomplete in its micro-batch")
        if not report.ok:
            raise ValueError("grouping contract violated: " + "; ".join(report.violations))

    total: Optional[np.ndarray] = None
    for cell in plan.cells():
        if not cell:
            continue
        groups = samples_to_groups([samples[i] for i in cell])
        if plan.mode == PLAN_DUALKV:
            batch, backend = pack_dualkv(groups), MODE_DUALKV
        else:
            batch, backend = pack_standard(groups), MODE_STANDARD
        grads, _ = model_bwd(config, params, batch, backend)
        vec = grads.flatten()
        total = vec if total is None else total + vec
    if total is None:
        num = sum(p.size for p in _param_arrays(params))
        total = np.zeros(num, dtype=np.float64)
    return total


def _param_arrays(params: ModelParams):
    yield params.embedding
    for layer in params.layers:
        yield layer.w_q
        yield layer.w_k
        yield layer.w_v
        yield layer.w_o
        yield layer.gain1
        yield layer.gain2
        yield layer.w_gate
        yield layer.w_up
        yield layer.w_down
    yield params.final_gain
    yield params.w_head


def _chunk(indices: List[int], size: int) -> List[List[int]]:
    return [indices[i : i + size] for i in range(0, len(indices), size)] or [[]]


def simulate_balance_batch(
    samples: Sequence[RolloutSample],
    seed: Optional[int] = None,
    num_ranks: int = 2,
    mb_size: int = 4,
) -> StepPlan:
    """Representative length-balancing policy: sort then round-robin ranks.

    Samples are stably sorted by total sequence length (ties broken by
    original index), dealt round-robin across ranks, and chunked into
    micro-batches of ``mb_size`` per rank.  The output is a pure
    permutation + partition of the input multiset.  When ``seed`` is given
    the input order is pre-permuted first (modeling upstream shuffling);
    tie-breaking then follows the permuted order.

    This policy typically scatters same-prompt responses across ranks, so
    plans it produces fail the shared-prompt co-location contract.
    """
    order = list(range(len(samples)))
    if seed is not None:
        order = [int(i) for i in np.random.default_rng(seed).permutation(len(samples))]
    order = sorted(order, key=lambda i: samples[i].total_len)  # stable: ties keep prior order
    ranks: List[List[int]] = [[] for _ in range(num_ranks)]
    for pos, idx in enumerate(order):
        ranks[pos % num_ranks].append(idx)
    return StepPlan([_chunk(r, mb_size) for r in ranks], PLAN_DEFAULT)


def make_grouped_plan(
    samples: Sequence[RolloutSample],
    num_ranks: int = 1,
    mb_capacity: int = 8,
) -> StepPlan:
    """Prompt-grouped plan: whole groups per cell, input order preserved.

    Groups are assigned greedily to cells of at most ``mb_capacity``
    responses; a single group larger than the capacity is an error (it
    cannot be co-located).
    """
    groups: Dict[str, List[int]] = {}
    order: List[str] = []
    for i, s in enumerate(samples):
        if s.prompt_id not in groups:
            groups[s.prompt_id] = []
            order.append(s.prompt_id)
        groups[s.prompt_id].append(i)

    cells: List[List[int]] = []
    current: List[int] = []
    for pid in order:
        members = groups[pid]
        if len(members) > mb_capacity:
            raise ValueError(
                f"prompt {pid!r} has {len(members)} responses, exceeding micro-batch "
                f"capacity {mb_capacity}; the group cannot be co-located"
            )
        if current and len(current) + len(members) > mb_capacity:
            cells.append(current)
            current = []
        current.extend(members)
    if current:
        cells.append(current)

    ranks: List[List[List[int]]] = [[] for _ in range(num_ranks)]
    for ci, cell in enumerate(cells):
        ranks[ci % num_ranks].append(cell)
    for r in ranks:
        if not r:
            r.append([])
    return StepPlan(ranks, PLAN_DUALKV)
