"""Brute-force dense causal attention in float64: the ground-truth oracle.

The forward materializes the full score matrix; the backward applies the
textbook softmax-attention gradient formulas.  Both run entirely in float64
regardless of input precision so that oracle error is negligible against the
half-precision tolerances used in kernel comparisons.  A central
finite-difference gradient checker validates the analytic backward itself.

``causal_offset`` generalizes the mask: key ``j`` is visible to query row
``r`` iff ``j <= causal_offset + r``.  With offset 0 and square Q/K this is
ordinary causal self-attention; with offset P and K = [context; decoded] it
is the decoded-query attention pattern of the two-region kernel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import Tensor

__all__ = [
    "DenseAttentionCase",
    "ref_attention_fwd",
    "ref_attention_bwd",
    "finite_diff_grad",
]


@dataclass
class DenseAttentionCase:
    """One dense attention problem: Q [S_q,H,d], K/V [S_k,H_k,d]."""

    q: Tensor
    k: Tensor
    v: Tensor
    softmax_scale: Optional[float] = None
    causal_offset: int = 0

    def __post_init__(self):
        s_q, h, d = self.q.shape
        s_k, h_k, d_k = self.k.shape
        if self.k.shape != self.v.shape:
            raise ValueError(f"K/V shape mismatch: {self.k.shape} vs {self.v.shape}")
        if d != d_k:
            raise ValueError(f"head dim mismatch: q has {d}, k has {d_k}")
        if h_k == 0 or h % h_k != 0:
            raise ValueError(f"H={h} must be a positive multiple of H_k={h_k}")
        if self.causal_offset < 0:
            raise ValueError("causal_offset must be non-negative")
        if self.softmax_scale is None:
            self.softmax_scale = 1.0 / np.sqrt(d)

    @property
    def group_size(self) -> int:
        return self.q.shape[1] // self.k.shape[1]


def _expand_kv(arr: np.ndarray, group: int) -> np.ndarray:
    # Query head h reads kv head h // group.
    return np.repeat(arr, group, axis=1)


def ref_attention_fwd(case: DenseAttentionCase):
    """Dense masked-softmax attention.  Returns (O [S_q,H,d], lse [H,S_q])."""
    q = case.q.as_f64()
    k = _expand_kv(case.k.as_f64(), case.group_size)
    v = _expand_kv(case.v.as_f64(), case.group_size)
    s_q, h, d = q.shape
    s_k = k.shape[0]

    rows = np.arange(s_q)
    visible = np.arange(s_k)[None, :] <= (case.causal_offset + rows)[:, None]  # [S_q, S_k]
    if s_q and not visible.any(axis=1).all():
        bad = int(np.argmin(visible.any(axis=1)))
        raise ValueError(f"query row {bad} has no visible keys; cannot normalize")

    # scores[h, r, j] over the full matrix, masked then softmaxed in f64
    scores = np.einsum("rhd,jhd->hrj", q, k) * case.softmax_scale
    scores = np.where(visible[None, :, :], scores, -np.inf)
    row_max = scores.max(axis=2, keepdims=True)
    p = np.exp(scores - row_max)
    denom = p.sum(axis=2, keepdims=True)
    lse = (row_max + np.log(denom))[:, :, 0]  # [H, S_q]
    weights = p / denom
    out = np.einsum("hrj,jhd->rhd", weights, v)
    return Tensor(out), Tensor(lse)


def _recompute_weights(case: DenseAttentionCase, lse: Tensor):
    q = case.q.as_f64()
    k = _expand_kv(case.k.as_f64(), case.group_size)
    s_q = q.shape[0]
    s_k = k.shape[0]
    visible = np.arange(s_k)[None, :] <= (case.causal_offset + np.arange(s_q))[:, None]
    scores = np.einsum("rhd,jhd->hrj", q, k) * case.softmax_scale
    weights = np.where(visible[None, :, :], np.exp(scores - lse.as_f64()[:, :, None]), 0.0)
    return weights


def ref_attention_bwd(case: DenseAttentionCase, out: Tensor, lse: Tensor, d_out: Tensor):
    """Analytic gradients (dQ, dK, dV) for `ref_attention_fwd`.

    Dense form of the attention backward: with P the softmax weights,
    D = rowsum(dO * O), dV = P^T dO, dP = dO V^T, dS = P * (dP - D),
    dK = dS^T Q * scale, dQ = dS K * scale.  GQA sums dK/dV over the
    query heads sharing each kv head; rows beyond every query's causal
    horizon stay exactly zero.
    """
    if d_out.shape != case.q.shape:
        raise ValueError(f"dO shape {d_out.shape} != Q shape {case.q.shape}")
    if out.shape != case.q.shape:
        raise ValueError(f"O shape {out.shape} != Q shape {case.q.shape}")
    q = case.q.as_f64()
    group = case.group_size
    k = _expand_kv(case.k.as_f64(), group)
    v = _expand_kv(case.v.as_f64(), group)
    o = out.as_f64()
    do = d_out.as_f64()
    h_k = case.k.shape[1]

    weights = _recompute_weights(case, lse)                      # [H, S_q, S_k]
    d_row = np.einsum("rhd,rhd->hr", do, o)                      # D = rowsum(dO * O)
    dv_full = np.einsum("hrj,rhd->jhd", weights, do)
    dp = np.einsum("rhd,jhd->hrj", do, v)
    ds = weights * (dp - d_row[:, :, None]) * case.softmax_scale
    dk_full = np.einsum("hrj,rhd->jhd", ds, q)
    dq = np.einsum("hrj,jhd->rhd", ds, k)

    # Fold the per-query-head dK/dV back onto the kv heads.
    s_k = k.shape[0]
    dk = dk_full.reshape(s_k, h_k, group, -1).sum(axis=2)
    dv = dv_full.reshape(s_k, h_k, group, -1).sum(axis=2)
    return Tensor(dq), Tensor(dk), Tensor(dv)


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar loss, elementwise in f64."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn(base)
        flat[i] = orig - step
        down = loss_fn(base)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad
