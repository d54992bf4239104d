"""Analytic token / FLOP / memory calculators for the two packings.

Conventions, chosen so the numbers are exactly checkable:

* Attention FLOPs count 2 FLOPs per multiply-accumulate across the two
  matmuls (QK^T and PV), i.e. 4 * visible_pairs * H * d.  Causal masking
  is accounted by exact visible-pair counting, not the S^2/2 approximation,
  so a brute-force pair enumeration reproduces the numbers bit for bit.
* The closed-form attention speedup ratio N*S^2 / (P^2 + N*R*S) is
  evaluated verbatim (no causal halving) and reported *alongside* the
  exact pair-count ratio; the two disagree, which analysis output flags.
* Memory-savings rows are bytes with MB = 1e6 bytes.
* The peak-memory scaling law takes fitted coefficients (GB, GB/Ktoken
  with Ktoken = 1000 tokens) as inputs; the defaults were fitted on one
  specific 16-GPU training setup and are defaults only, not ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple, Union

__all__ = [
    "Scenario",
    "CostReport",
    "MemoryCoefficients",
    "DEFAULT_MEMORY_COEFFICIENTS",
    "visible_pairs",
    "attention_flops",
    "flops_per_token_ops",
    "speedup_attn",
    "exact_attention_speedup",
    "kernel_memory_savings",
    "memory_scaling_predict",
    "token_counts_vs_padded",
    "build_cost_report",
    "SPEEDUP_FORMULA_NOTE",
]

MODE_STANDARD = "standard"
MODE_DUALKV = "dualkv"

SPEEDUP_FORMULA_NOTE = (
    "note: the closed-form attention speedup N*S^2/(P^2+N*R*S) ignores causal "
    "halving and exceeds the exact visible-pair ratio; both are reported"
)


@dataclass
class Scenario:
    """One (rollout, model-dims) configuration for the calculators."""

    n: int                      # rollout factor N (sequences sharing the prompt)
    p: int                      # shared prompt length, tokens
    r: Union[int, Sequence[int]]  # response length(s)
    mb: Optional[int] = None    # micro-batch size for memory-law projections
    dim: int = 4096             # D
    heads: int = 32             # H
    kv_heads: int = 8           # H_k
    head_dim: int = 128         # d
    ffn_dim: int = 12288        # d_ff
    layers: int = 36            # L
    bytes_per_elem: int = 2     # bf16 storage

    def __post_init__(self):
        if self.n < 1 or self.p < 0:
            raise ValueError("need N >= 1 and P >= 0")
        if self.mb is None:
            self.mb = self.n

    @property
    def r_list(self) -> List[int]:
        if isinstance(self.r, (list, tuple)):
            if len(self.r) != self.n:
                raise ValueError(f"expected {self.n} response lengths, got {len(self.r)}")
            return [int(x) for x in self.r]
        return [int(self.r)] * self.n

    @property
    def r_scalar(self) -> int:
        rs = self.r_list
        if len(set(rs)) != 1:
            raise ValueError("scalar-R formulas need homogeneous response lengths")
        return rs[0]

    @property
    def t_std(self) -> int:
        return sum(self.p + r for r in self.r_list)

    @property
    def t_dk(self) -> int:
        return self.p + sum(self.r_list)


@dataclass
class CostReport:
    t_std: int
    t_dk: int
    rho: Fraction
    attn_flops_std: int
    attn_flops_dk: int
    speedup_attn: float
    speedup_attn_exact_pairs: float
    kv_mem_saved: int
    q_mem_saved: int
    lse_mem_saved: int
    total_kernel_mem_saved_per_layer: int
    mem_dualkv_pred: Optional[float]
    mem_fa2_pred: Optional[float]


def _pairs_causal(s: int) -> int:
    # row r of a self-causal sequence sees r+1 keys
    return s * (s + 1) // 2


def visible_pairs(scn: Scenario, mode: str) -> int:
    """Exact count of unmasked (query, key) pairs for one prompt group."""
    if mode == MODE_STANDARD:
        return sum(_pairs_causal(scn.p + r) for r in scn.r_list)
    if mode == MODE_DUALKV:
        # context self-attention once, then each decoded row r sees P + r + 1 keys
        return _pairs_causal(scn.p) + sum(r * scn.p + _pairs_causal(r) for r in scn.r_list)
    raise ValueError(f"unknown mode {mode!r}")


def attention_flops(scn: Scenario, mode: str) -> int:
    """4 * visible_pairs * H * d (two matmuls, 2 FLOPs per MAC)."""
    return 4 * visible_pairs(scn, mode) * scn.heads * scn.head_dim


def flops_per_token_ops(scn: Scenario, mode: str) -> int:
    """FLOPs of the per-token operations (norms, projections, MLP) per layer.

    Linear layers at 2 FLOPs/MAC: QKV projections, output projection, and
    the three MLP matmuls; norms counted at 4 FLOPs per element.  Exactly
    linear in the packed token count, so the standard/dualkv ratio equals
    the token reduction ratio.
    """
    d_model, h, h_k, d, d_ff = scn.dim, scn.heads, scn.kv_heads, scn.head_dim, scn.ffn_dim
    per_token = (
        2 * d_model * (h * d)          # Q projection
        + 4 * d_model * (h_k * d)      # K and V projections
        + 2 * (h * d) * d_model        # output projection
        + 6 * d_model * d_ff           # gate, up, down
        + 8 * d_model                  # two rmsnorms
    )
    tokens = scn.t_std if mode == MODE_STANDARD else scn.t_dk
    return per_token * tokens


def speedup_attn(scn: Scenario) -> float:
    """Closed-form attention speedup N*S^2 / (P^2 + N*R*S), S = P + R."""
    n, p, r = scn.n, scn.p, scn.r_scalar
    s = p + r
    denom = p * p + n * r * s
    if denom == 0:
        raise ZeroDivisionError("P^2 + N*R*S must be positive")
    return n * s * s / denom


def exact_attention_speedup(scn: Scenario) -> float:
    """Visible-pair ratio standard/dualkv: the causal-exact counterpart."""
    return visible_pairs(scn, MODE_STANDARD) / visible_pairs(scn, MODE_DUALKV)


def kernel_memory_savings(scn: Scenario) -> Tuple[int, int, int, int]:
    """Per-layer bytes the shared-context kernel avoids materializing.

    Relative to an N-copy baseline over the same batch: N-1 redundant
    copies of the prompt KV pair, the prompt-position queries, and the
    prompt-position softmax statistics (always 4 bytes per entry).
    Returns (kv_bytes, q_bytes, lse_bytes, total_bytes).
    """
    n, p, h, h_k, d, e = scn.n, scn.p, scn.heads, scn.kv_heads, scn.head_dim, scn.bytes_per_elem
    kv = 2 * (n - 1) * p * h_k * d * e
    q = (n - 1) * p * h * d * e
    lse = (n - 1) * p * h * 4
    return kv, q, lse, kv + q + lse


@dataclass
class MemoryCoefficients:
    """Fitted peak-memory law coefficients (hardware-specific defaults)."""

    base_gb: float = 41.1       # model + optimizer + framework
    per_prompt_ktok: float = 0.475   # GB per Ktoken of prompt, paid once
    per_mb_resp_ktok: float = 0.122  # GB per Ktoken of response per micro-batch lane


DEFAULT_MEMORY_COEFFICIENTS = MemoryCoefficients()


def memory_scaling_predict(
    p_tokens: int,
    mb: int,
    r_tokens: int,
    mode: str,
    coeffs: MemoryCoefficients = DEFAULT_MEMORY_COEFFICIENTS,
) -> float:
    """Predicted peak memory (GB) under the fitted scaling law.

    Shared-prompt packing pays the prompt once: M0 + c_P*P + c_mbR*mb*R.
    Replicated packing carries the prompt per micro-batch lane:
    M0 + c_P*mb*(P+R).  P and R are in tokens; the law's coefficients are
    per Ktoken (1000 tokens).
    """
    p_k, r_k = p_tokens / 1000.0, r_tokens / 1000.0
    if mode == MODE_DUALKV:
        return coeffs.base_gb + coeffs.per_prompt_ktok * p_k + coeffs.per_mb_resp_ktok * mb * r_k
    if mode == MODE_STANDARD:
        return coeffs.base_gb + coeffs.per_prompt_ktok * mb * (p_k + r_k)
    raise ValueError(f"unknown mode {mode!r}")


def token_counts_vs_padded(
    p: int, responses: Sequence[int], mb: int, pad_to: Optional[int] = None
) -> Tuple[int, int, int]:
    """(T_dualkv, T_replicated, T_padded) for one micro-batch.

    The padded layout models framework-level prefix sharing on dense 2D
    tensors: mb rows, each padded to ``pad_to`` response tokens (default:
    the longest response present).
    """
    if mb != len(responses):
        raise ValueError("mb must equal the number of responses")
    responses = [int(x) for x in responses]
    pad = max(responses) if pad_to is None else int(pad_to)
    if pad < max(responses):
        raise ValueError("pad_to must cover the longest response")
    t_dk = p + sum(responses)
    t_fa2 = sum(p + r for r in responses)
    t_padded = mb * (p + pad)
    return t_dk, t_fa2, t_padded


def build_cost_report(
    scn: Scenario, coeffs: MemoryCoefficients = DEFAULT_MEMORY_COEFFICIENTS
) -> CostReport:
    """Assemble every calculator into one record for a scenario."""
    kv, q, lse, total = kernel_memory_savings(scn)
    rs = scn.r_list
    homogeneous = len(set(rs)) == 1
    mem_dk = mem_fa2 = None
    if homogeneous:
        mem_dk = memory_scaling_predict(scn.p, scn.mb, rs[0], MODE_DUALKV, coeffs)
        mem_fa2 = memory_scaling_predict(scn.p, scn.mb, rs[0], MODE_STANDARD, coeffs)
    return CostReport(
        t_std=scn.t_std,
        t_dk=scn.t_dk,
        rho=Fraction(scn.t_std, scn.t_dk),
        attn_flops_std=attention_flops(scn, MODE_STANDARD),
        attn_flops_dk=attention_flops(scn, MODE_DUALKV),
        speedup_attn=speedup_attn(scn) if homogeneous else float("nan"),
        speedup_attn_exact_pairs=exact_attention_speedup(scn),
        kv_mem_saved=kv,
        q_mem_saved=q,
        lse_mem_saved=lse,
        total_kernel_mem_saved_per_layer=total,
        mem_dualkv_pred=mem_dk,
        mem_fa2_pred=mem_fa2,
    )
