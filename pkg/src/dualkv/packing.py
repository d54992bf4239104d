"""Micro-batch packing for rollout groups, plus the token-reduction ratio.

Two layouts are produced from the same rollout groups:

* ``standard``: every response carries its own copy of the group's prompt,
  ``[prompt ; resp_1], [prompt ; resp_2], ...`` -- N(P+R) tokens per group.
* ``dualkv``: one shared prompt followed by the responses,
  ``[prompt ; resp_1 ; ... ; resp_N]`` -- P+NR tokens per group, with the
  context span and per-response offsets recorded for the two-region kernel.

Group ordering within a batch is preserved from the input (no length
balancing, no shuffling), so downstream gradient-aggregation comparisons
have a defined canonical order.  Token ids are opaque integers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "RolloutResponse",
    "RolloutGroup",
    "GroupLayout",
    "PackedBatch",
    "pack_standard",
    "pack_dualkv",
    "unpack_batch",
    "compute_rho",
    "token_reduction_ratio",
    "validate_grouping",
    "GroupingReport",
]

MODE_STANDARD = "standard"
MODE_DUALKV = "dualkv"


@dataclass
class RolloutResponse:
    tokens: List[int]
    advantage: float


@dataclass
class RolloutGroup:
    """All rollouts sampled from one prompt: N >= 1 responses sharing it."""

    prompt_id: str
    prompt_tokens: List[int]
    responses: List[RolloutResponse]

    def __post_init__(self):
        if not self.responses:
            raise ValueError(f"group {self.prompt_id!r} has no responses")

    @property
    def num_responses(self) -> int:
        return len(self.responses)

    @property
    def prompt_len(self) -> int:
        return len(self.prompt_tokens)


@dataclass
class GroupLayout:
    """Where one group's tokens live inside a packed batch.

    Standard mode fills ``seq_cu``: global offsets of the group's N
    ``[prompt ; response_i]`` sequences.  Two-region mode fills
    ``context_start``/``context_span`` (the single prompt copy) plus
    ``resp_start`` and the group-local ``resp_cu`` response offsets.
    """

    prompt_id: str
    prompt_len: int
    advantages: List[float]
    seq_cu: Optional[np.ndarray] = None
    context_start: Optional[int] = None
    context_span: Optional[int] = None
    resp_start: Optional[int] = None
    resp_cu: Optional[np.ndarray] = None


@dataclass
class PackedBatch:
    mode: str
    token_ids: np.ndarray  # [T] int64
    groups: List[GroupLayout]
    total_tokens: int

    def all_cu_seqlens(self) -> np.ndarray:
        """Global per-sequence offsets (standard mode only)."""
        if self.mode != MODE_STANDARD:
            raise ValueError("all_cu_seqlens applies to standard-mode batches")
        cu = [0]
        for g in self.groups:
            cu.extend(int(x) for x in g.seq_cu[1:])
        return np.asarray(cu, dtype=np.int64)

    def position_ids(self) -> np.ndarray:
        """Logical position of every packed token (prompt j -> j, response r -> P + r)."""
        pos = np.zeros(self.total_tokens, dtype=np.int64)
        if self.mode == MODE_STANDARD:
            for g in self.groups:
                for i in range(len(g.advantages)):
                    s, e = int(g.seq_cu[i]), int(g.seq_cu[i + 1])
                    pos[s:e] = np.arange(e - s)
        else:
            for g in self.groups:
                pos[g.context_start : g.context_start + g.context_span] = np.arange(g.context_span)
                for i in range(len(g.advantages)):
                    s = g.resp_start + int(g.resp_cu[i])
                    e = g.resp_start + int(g.resp_cu[i + 1])
                    pos[s:e] = g.prompt_len + np.arange(e - s)
        return pos

    def prompt_rows(self, g_idx: int, copy_idx: int = 0) -> np.ndarray:
        """Global rows of one prompt copy (standard has N copies, shared has one)."""
        g = self.groups[g_idx]
        if self.mode == MODE_STANDARD:
            s = int(g.seq_cu[copy_idx])
            return np.arange(s, s + g.prompt_len, dtype=np.int64)
        if copy_idx != 0:
            raise IndexError("shared-prompt batches hold a single prompt copy")
        return np.arange(g.context_start, g.context_start + g.context_span, dtype=np.int64)

    def response_rows(self, g_idx: int, r_idx: int) -> np.ndarray:
        """Global rows of one response's tokens."""
        g = self.groups[g_idx]
        if self.mode == MODE_STANDARD:
            s = int(g.seq_cu[r_idx]) + g.prompt_len
            e = int(g.seq_cu[r_idx + 1])
        else:
            s = g.resp_start + int(g.resp_cu[r_idx])
            e = g.resp_start + int(g.resp_cu[r_idx + 1])
        return np.arange(s, e, dtype=np.int64)

    def loss_rows(self) -> Tuple[np.ndarray, np.ndarray]:
        """(row indices, advantage weights) of all response tokens."""
        rows, weights = [], []
        for g in self.groups:
            for i, adv in enumerate(g.advantages):
                if self.mode == MODE_STANDARD:
                    s = int(g.seq_cu[i]) + g.prompt_len
                    e = int(g.seq_cu[i + 1])
                else:
                    s = g.resp_start + int(g.resp_cu[i])
                    e = g.resp_start + int(g.resp_cu[i + 1])
                rows.extend(range(s, e))
                weights.extend([adv] * (e - s))
        return np.asarray(rows, dtype=np.int64), np.asarray(weights, dtype=np.float64)


def pack_standard(groups: Sequence[RolloutGroup]) -> PackedBatch:
    """Replicated-prompt packing: [prompt ; resp_i] per response."""
    if not groups:
        raise ValueError("cannot pack an empty group list")
    tokens: List[int] = []
    layouts = []
    for g in groups:
        cu = [len(tokens)]
        for resp in g.responses:
            tokens.extend(g.prompt_tokens)
            tokens.extend(resp.tokens)
            cu.append(len(tokens))
        layouts.append(
            GroupLayout(
                prompt_id=g.prompt_id,
                prompt_len=g.prompt_len,
                advantages=[r.advantage for r in g.responses],
                seq_cu=np.asarray(cu, dtype=np.int64),
            )
        )
    return PackedBatch(MODE_STANDARD, np.asarray(tokens, dtype=np.int64), layouts, len(tokens))


def pack_dualkv(groups: Sequence[RolloutGroup]) -> PackedBatch:
    """Shared-prompt packing: [prompt ; resp_1 ; ... ; resp_N] per group.

    Every group must arrive whole: the same prompt_id appearing twice in
    one batch means the caller scattered a group's responses, which breaks
    the co-location contract.
    """
    if not groups:
        raise ValueError("cannot pack an empty group list")
    seen: Dict[str, int] = {}
    for g in groups:
        if g.prompt_id in seen:
            raise ValueError(
                f"group {g.prompt_id!r} is split: all responses of a prompt must be "
                "packed together in one batch"
            )
        seen[g.prompt_id] = 1
    tokens: List[int] = []
    layouts = []
    for g in groups:
        context_start = len(tokens)
        tokens.extend(g.prompt_tokens)
        resp_start = len(tokens)
        resp_cu = [0]
        for resp in g.responses:
            tokens.extend(resp.tokens)
            resp_cu.append(len(tokens) - resp_start)
        layouts.append(
            GroupLayout(
                prompt_id=g.prompt_id,
                prompt_len=g.prompt_len,
                advantages=[r.advantage for r in g.responses],
                context_start=context_start,
                context_span=g.prompt_len,
                resp_start=resp_start,
                resp_cu=np.asarray(resp_cu, dtype=np.int64),
            )
        )
    return PackedBatch(MODE_DUALKV, np.asarray(tokens, dtype=np.int64), layouts, len(tokens))


def unpack_batch(batch: PackedBatch) -> List[RolloutGroup]:
    """Recover the (prompt, response) pairs; inverse of both pack functions."""
    ids = batch.token_ids
    groups = []
    for g in batch.groups:
        if batch.mode == MODE_STANDARD:
            first_s = int(g.seq_cu[0])
            prompt = [int(t) for t in ids[first_s : first_s + g.prompt_len]]
            responses = [
                RolloutResponse(
                    [int(t) for t in ids[int(g.seq_cu[i]) + g.prompt_len : int(g.seq_cu[i + 1])]],
                    g.advantages[i],
                )
                for i in range(len(g.advantages))
            ]
        else:
            prompt = [int(t) for t in ids[g.context_start : g.context_start + g.context_span]]
            responses = [
                RolloutResponse(
                    [
                        int(t)
                        for t in ids[
                            g.resp_start + int(g.resp_cu[i]) : g.resp_start + int(g.resp_cu[i + 1])
                        ]
                    ],
                    g.advantages[i],
                )
                for i in range(len(g.advantages))
            ]
        groups.append(RolloutGroup(g.prompt_id, prompt, responses))
    return groups


def compute_rho(n: int, p: int, r: int) -> Fraction:
    """Token reduction ratio N(P+R)/(P+NR), exact rational."""
    if n < 1 or p < 0 or r < 0:
        raise ValueError("need N >= 1, P >= 0, R >= 0")
    denom = p + n * r
    if denom == 0:
        raise ZeroDivisionError("P + N*R must be positive")
    return Fraction(n * (p + r), denom)


def token_reduction_ratio(groups: Sequence[RolloutGroup]) -> Fraction:
    """Exact T_standard / T_dualkv over real groups with heterogeneous R_i."""
    t_std = sum(g.num_responses * g.prompt_len + sum(len(r.tokens) for r in g.responses)
                for g in groups)
    t_dk = sum(g.prompt_len + sum(len(r.tokens) for r in g.responses) for g in groups)
    if t_dk == 0:
        raise ZeroDivisionError("packed batch has no tokens")
    return Fraction(t_std, t_dk)


@dataclass
class GroupingReport:
    ok: bool
    violations: List[str] = field(default_factory=list)


def validate_grouping(batches) -> GroupingReport:
    """Check the same-prompt co-location contract across batches.

    Each entry is either a shared-prompt `PackedBatch` (its groups are
    whole by construction) or a raw assignment: a list of objects carrying
    ``prompt_id``, for which same-prompt entries must also be contiguous.
    A prompt_id spread over more than one batch is a violation.
    Standard-mode batches pass vacuously: replicated packing has no
    co-location contract.
    """
    report = GroupingReport(ok=True)
    owner: Dict[str, int] = {}

    def _claim(pid: str, b_idx: int) -> None:
        if pid in owner and owner[pid] != b_idx:
            report.ok = False
            report.violations.append(
                f"prompt {pid!r} split across batches {owner[pid]} and {b_idx}"
            )
        owner[pid] = b_idx

    for b_idx, batch in enumerate(batches):
        if isinstance(batch, PackedBatch):
            if batch.mode == MODE_STANDARD:
                continue
            for g in batch.groups:
                _claim(g.prompt_id, b_idx)
        else:  # raw assignment: ordered samples with .prompt_id
            run_order = []
            for sample in batch:
                pid = sample.prompt_id
                if not run_order or run_order[-1] != pid:
                    run_order.append(pid)
                _claim(pid, b_idx)
            if len(run_order) != len(set(run_order)):
                report.ok = False
                dup = next(p for p in run_order if run_order.count(p) > 1)
                report.violations.append(
                    f"prompt {dup!r} responses are not contiguous within batch {b_idx}"
                )
    return report
