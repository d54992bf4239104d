"""Tiled online-softmax varlen causal attention (forward + backward).

This is the standard-packing baseline: N independent causal self-attention
passes over sequences delimited by ``cu_seqlens``, computed tile by tile
with running (m, l, o) softmax state.  The tile iteration core defined here
(`_forward_rows` / `_backward_rows`) walks an ordered list of KV *regions*,
each with its own logical base position; the baseline passes a single
region per sequence, and the two-region kernel in `kernel.py` reuses the
same core with a shared-context region in front.  Sharing the core makes
the empty-context degeneracy a structural bit-for-bit match rather than a
numerical coincidence.

Conventions:

* K-tiles are iterated in reverse order (highest logical base first).
* Every tile load is bounds-checked and masked; there is no unmasked
  fast path, so partial tiles in any region cost nothing extra to handle.
* Compute runs in f32 when storage is F32/BF16EMU and in f64 for F64.
  dQ accumulates in compute precision across K-tiles and is cast to the
  output precision once per row; dK/dV accumulate per K-tile and are cast
  once at the tile epilogue (equivalently, once per element).
* Precision emulation boundary: the kernel's input tensors and its
  returned gradients carry the declared storage precision (bf16 grid for
  BF16EMU), while the saved-for-backward products -- the attention output
  and the softmax statistics -- stay in compute precision, like the fp32
  accumulators they come from.  Re-rounding the saved output would inject
  storage-grid noise into D = rowsum(dO*O) and swamp the accumulation
  effects this artifact exists to measure.
* Execution is single-threaded and sequence-major / tile-major, so results
  are bit-reproducible run to run.  A parallel schedule would make dQ
  accumulation order-dependent at f32 rounding scale; this implementation
  is always in its deterministic order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from .tensor import Precision, Tensor

__all__ = ["VarlenBatch", "fa2_varlen_fwd", "fa2_varlen_bwd"]

_QUERY_BLOCK = 128  # rows per query block; results are row-independent


class KVRegion(NamedTuple):
    """One physically contiguous KV span with its logical start position."""

    k: np.ndarray  # [S, H_k, d], compute dtype
    v: np.ndarray  # [S, H_k, d], compute dtype
    logical_base: int


@dataclass
class VarlenBatch:
    """Packed variable-length batch: q/k/v over T_total tokens, N sequences."""

    q: Tensor  # [T, H, d]
    k: Tensor  # [T, H_k, d]
    v: Tensor  # [T, H_k, d]
    cu_seqlens: np.ndarray  # [N+1] monotone offsets, cu[0] = 0, cu[N] = T
    max_seqlen: Optional[int] = None
    softmax_scale: Optional[float] = None
    tile_size: int = 64

    def __post_init__(self):
        self.cu_seqlens = np.asarray(self.cu_seqlens, dtype=np.int64)
        cu = self.cu_seqlens
        t_total, h, d = self.q.shape
        if cu.ndim != 1 or cu.size < 2 or cu[0] != 0 or cu[-1] != t_total:
            raise ValueError(f"malformed cu_seqlens {cu!r} for T={t_total}")
        if np.any(np.diff(cu) < 0):
            raise ValueError("cu_seqlens must be non-decreasing")
        if self.k.shape != self.v.shape or self.k.shape[0] != t_total or self.k.shape[2] != d:
            raise ValueError(f"K/V shape {self.k.shape} inconsistent with Q {self.q.shape}")
        h_k = self.k.shape[1]
        if h_k == 0 or h % h_k != 0:
            raise ValueError(f"H={h} must be a positive multiple of H_k={h_k}")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if self.softmax_scale is None:
            self.softmax_scale = 1.0 / np.sqrt(d)
        if self.max_seqlen is None:
            self.max_seqlen = int(np.max(np.diff(cu))) if cu.size > 1 else 0

    @property
    def num_sequences(self) -> int:
        return self.cu_seqlens.size - 1


def _tile_list(regions: List[KVRegion], block_n: int):
    """All (region_index, start, stop, logical_start) tiles, region order."""
    tiles = []
    for ri, region in enumerate(regions):
        length = region.k.shape[0]
        for start in range(0, length, block_n):
            stop = min(start + block_n, length)
            tiles.append((ri, start, stop, region.logical_base + start))
    return tiles


def _expand_heads(arr: np.ndarray, group: int) -> np.ndarray:
    """[T, H_k, d] -> [H, T, d] with query head h reading kv head h//group."""
    if group == 1:
        return arr.transpose(1, 0, 2)
    return np.repeat(arr, group, axis=1).transpose(1, 0, 2)


def _forward_rows(
    q: np.ndarray,           # [M, H, d] compute dtype
    regions: List[KVRegion],
    row_pos: np.ndarray,     # [M] logical positions of the query rows
    scale: float,
    block_n: int,
    cdtype: np.dtype,
) -> Tuple[np.ndarray, np.ndarray]:
    """Online-softmax forward over the region tiles.  Returns (o, lse)."""
    m_rows, h, d = q.shape
    h_k = regions[0].k.shape[1] if regions else h
    group = h // h_k
    scale_c = cdtype.type(scale)
    neg_inf = cdtype.type(-np.inf)

    out = np.empty((m_rows, h, d), dtype=cdtype)
    lse = np.empty((h, m_rows), dtype=cdtype)
    tiles = _tile_list(regions, block_n)

    for q0 in range(0, m_rows, _QUERY_BLOCK):
        q1 = min(q0 + _QUERY_BLOCK, m_rows)
        q_blk = q[q0:q1].transpose(1, 0, 2)            # [H, M, d]
        pos = row_pos[q0:q1]
        max_pos = int(pos[-1])

        m_run = np.full((h, q1 - q0), neg_inf, dtype=cdtype)
        l_run = np.zeros((h, q1 - q0), dtype=cdtype)
        acc = np.zeros((h, q1 - q0, d), dtype=cdtype)

        for ri, start, stop, logical in reversed(tiles):
            if logical > max_pos:
                continue  # tile entirely beyond this block's causal horizon
            region = regions[ri]
            k_exp = _expand_heads(region.k[start:stop], group)  # [H, T, d]
            v_exp = _expand_heads(region.v[start:stop], group)

            scores = q_blk @ k_exp.transpose(0, 2, 1)           # [H, M, T]
            scores *= scale_c
            visible = (logical + np.arange(stop - start))[None, :] <= pos[:, None]
            scores = np.where(visible[None, :, :], scores, neg_inf)

            # Online softmax update with rescale factor alpha = e^{m - m_new}
            m_new = np.maximum(m_run, scores.max(axis=2))
            m_safe = np.where(np.isneginf(m_new), cdtype.type(0.0), m_new)
            p = np.exp(scores - m_safe[:, :, None])
            alpha = np.exp(m_run - m_safe)
            l_run = alpha * l_run + p.sum(axis=2)
            acc = alpha[:, :, None] * acc + p @ v_exp
            m_run = m_new

        out[q0:q1] = (acc / l_run[:, :, None]).transpose(1, 0, 2)
        lse[:, q0:q1] = m_run + np.log(l_run)

    return out, lse


def _backward_rows(
    q: np.ndarray,            # [M, H, d] compute dtype
    d_out: np.ndarray,        # [M, H, d] compute dtype
    lse: np.ndarray,          # [H, M] compute dtype
    d_row: np.ndarray,        # [H, M] rowsum(dO * O), compute dtype
    regions: List[KVRegion],
    row_pos: np.ndarray,
    scale: float,
    block_n: int,
    cdtype: np.dtype,
):
    """Tiled attention backward.  Returns (dq, [(dk, dv) per region]).

    All returned arrays are uncast compute-precision accumulators; the
    caller performs the single cast to the output precision.
    """
    m_rows, h, d = q.shape
    h_k = regions[0].k.shape[1] if regions else h
    group = h // h_k
    scale_c = cdtype.type(scale)

    dq = np.zeros((m_rows, h, d), dtype=cdtype)
    region_grads = [
        (np.zeros_like(r.k, dtype=cdtype), np.zeros_like(r.v, dtype=cdtype)) for r in regions
    ]
    tiles = _tile_list(regions, block_n)

    for ri, start, stop, logical in tiles:
        region = regions[ri]
        k_exp = _expand_heads(region.k[start:stop], group)  # [H, T, d]
        v_exp = _expand_heads(region.v[start:stop], group)
        t_len = stop - start
        acc_dk = np.zeros((h, t_len, d), dtype=cdtype)
        acc_dv = np.zeros((h, t_len, d), dtype=cdtype)

        for q0 in range(0, m_rows, _QUERY_BLOCK):
            q1 = min(q0 + _QUERY_BLOCK, m_rows)
            pos = row_pos[q0:q1]
            if logical > int(pos[-1]):
                continue  # no row in this block sees the tile
            q_blk = q[q0:q1].transpose(1, 0, 2)       # [H, M, d]
            do_blk = d_out[q0:q1].transpose(1, 0, 2)  # [H, M, d]

            scores = q_blk @ k_exp.transpose(0, 2, 1)
            scores *= scale_c
            visible = (logical + np.arange(t_len))[None, :] <= pos[:, None]
            # Recompute P from the saved lse; masked lanes contribute 0.
            p = np.where(visible[None, :, :], np.exp(scores - lse[:, q0:q1, None]), cdtype.type(0.0))

            acc_dv += p.transpose(0, 2, 1) @ do_blk
            dp = do_blk @ v_exp.transpose(0, 2, 1)
            ds = p * (dp - d_row[:, q0:q1, None])
            ds *= scale_c
            acc_dk += ds.transpose(0, 2, 1) @ q_blk
            dq[q0:q1] += (ds @ k_exp).transpose(1, 0, 2)

        # Fold the per-query-head accumulators onto kv heads at tile epilogue.
        dk_region, dv_region = region_grads[ri]
        dk_region[start:stop] += acc_dk.reshape(h_k, group, t_len, d).sum(axis=1).transpose(1, 0, 2)
        dv_region[start:stop] += acc_dv.reshape(h_k, group, t_len, d).sum(axis=1).transpose(1, 0, 2)

    return dq, region_grads


def _rowsum_do_o(d_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    """D[h, r] = sum_d dO[r, h, d] * O[r, h, d]  (precomputed once)."""
    return np.einsum("rhd,rhd->hr", d_out, out)


def fa2_varlen_fwd(batch: VarlenBatch) -> Tuple[Tensor, Tensor]:
    """Per-sequence causal attention over a packed batch.

    Returns (O [T,H,d], lse [H,T]), both in the compute precision (these
    are saved tensors the backward consumes).  Zero-length sequences
    produce no output rows.
    """
    prec = batch.q.precision
    cdtype = prec.compute_dtype
    t_total, h, d = batch.q.shape
    q = batch.q.data.astype(cdtype, copy=False)
    k = batch.k.data.astype(cdtype, copy=False)
    v = batch.v.data.astype(cdtype, copy=False)

    out = np.zeros((t_total, h, d), dtype=cdtype)
    lse = np.zeros((h, t_total), dtype=cdtype)
    for i in range(batch.num_sequences):
        start, stop = int(batch.cu_seqlens[i]), int(batch.cu_seqlens[i + 1])
        if start == stop:
            continue
        regions = [KVRegion(k[start:stop], v[start:stop], 0)]
        row_pos = np.arange(stop - start, dtype=np.int64)
        o_i, lse_i = _forward_rows(q[start:stop], regions, row_pos, batch.softmax_scale,
                                   batch.tile_size, cdtype)
        out[start:stop] = o_i
        lse[:, start:stop] = lse_i

    saved_prec = Precision.F64 if prec is Precision.F64 else Precision.F32
    return Tensor(out, saved_prec), Tensor(lse, saved_prec)


def fa2_varlen_bwd(
    batch: VarlenBatch, out: Tensor, lse: Tensor, d_out: Tensor
) -> Tuple[Tensor, Tensor, Tensor]:
    """Backward of `fa2_varlen_fwd`: (dQ, dK, dV) in the storage precision."""
    if d_out.shape != batch.q.shape or out.shape != batch.q.shape:
        raise ValueError(
            f"O/dO shape {out.shape}/{d_out.shape} inconsistent with Q {batch.q.shape}"
        )
    prec = batch.q.precision
    cdtype = prec.compute_dtype
    q = batch.q.data.astype(cdtype, copy=False)
    k = batch.k.data.astype(cdtype, copy=False)
    v = batch.v.data.astype(cdtype, copy=False)
    o = out.data.astype(cdtype, copy=False)
    do = d_out.data.astype(cdtype, copy=False)
    lse_arr = lse.data.astype(cdtype, copy=False)
    d_row = _rowsum_do_o(do, o)

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for i in range(batch.num_sequences):
        start, stop = int(batch.cu_seqlens[i]), int(batch.cu_seqlens[i + 1])
        if start == stop:
            continue
        regions = [KVRegion(k[start:stop], v[start:stop], 0)]
        row_pos = np.arange(stop - start, dtype=np.int64)
        dq_i, region_grads = _backward_rows(
            q[start:stop], do[start:stop], lse_arr[:, start:stop], d_row[:, start:stop],
            regions, row_pos, batch.softmax_scale, batch.tile_size, cdtype,
        )
        dq[start:stop] = dq_i
        dk[start:stop], dv[start:stop] = region_grads[0]

    return (
        Tensor(prec.quantize(dq), prec),
        Tensor(prec.quantize(dk), prec),
        Tensor(prec.quantize(dv), prec),
    )
