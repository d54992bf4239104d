"""Two-region shared-context attention kernel (forward + backward).

Decoded queries attend to a single shared context KV buffer plus their own
per-sequence decoded KV, in one pass.  The kernel extends the tiled
online-softmax core of `fa2` with a second KV region: physical block index
is decoupled from logical key position, so block ``n`` has logical start
``n*B_N`` while it lies in the context and ``P + (n - n_ctx)*B_N`` once it
crosses into the decoded region.  The causal mask therefore sees the two
physically disjoint buffers as one contiguous causal sequence, and the
online-softmax state simply carries across the region boundary.  Up to two
tiles per sequence can be partial (last context tile, last decoded tile);
every tile load is bounds-checked, so this costs nothing special.

The backward writes five gradients.  dK_d/dV_d land in per-sequence
regions with no cross-sequence interaction.  dK_c/dV_c are a sum over all
sequences: each sequence's contribution is accumulated into a shared
float32 scratch buffer (`ContextGradScratch`), and only after all
contributions are in does `convert_dkv_context` cast the scratch to the
output precision -- exactly one rounding step per element, the same
precision profile as a single-sequence baseline.  The rejected alternative
(casting each contribution to bf16 and accumulating in bf16) is provided
as `bf16_naive_accumulate` for precision studies only.

Deterministic mode folds contributions in a fixed sequence-major,
tile-major order and is bit-reproducible; non-deterministic mode permutes
the per-sequence fold order, modeling unordered concurrent accumulation,
which perturbs results only at accumulator rounding scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .fa2 import KVRegion, _backward_rows, _forward_rows, _rowsum_do_o
from .tensor import Precision, Tensor, bf16_round

__all__ = [
    "DualKVInput",
    "ContextGradScratch",
    "dualkv_fwd",
    "dualkv_bwd",
    "convert_dkv_context",
    "bf16_naive_accumulate",
    "dualkv_attention_varlen",
    "context_grad_contributions",
]


@dataclass
class DualKVInput:
    """Five-tensor input contract for the two-region kernel.

    ``q``, ``k_decoded``, ``v_decoded`` are varlen-packed over the N decoded
    sequences and share ``cu_seqlens_q`` (the context is shared, so there is
    no separate decoded offset table).  ``k_context``/``v_context`` hold the
    single shared context copy.  The decoded query at local index r has
    logical position ``context_seqlen + r`` for causal masking.
    """

    q: Tensor  # [sum R_i, H, d]
    k_context: Tensor  # [P, H_k, d]
    v_context: Tensor  # [P, H_k, d]
    k_decoded: Tensor  # [sum R_i, H_k, d]
    v_decoded: Tensor  # [sum R_i, H_k, d]
    cu_seqlens_q: np.ndarray  # [N+1]
    context_seqlen: Optional[int] = None  # P; defaults to k_context length
    max_seqlen_q: Optional[int] = None
    softmax_scale: Optional[float] = None
    causal: bool = True
    tile_size: int = 64

    def __post_init__(self):
        self.cu_seqlens_q = np.asarray(self.cu_seqlens_q, dtype=np.int64)
        cu = self.cu_seqlens_q
        t_dec, h, d = self.q.shape
        if cu.ndim != 1 or cu.size < 2 or cu[0] != 0 or cu[-1] != t_dec:
            raise ValueError(f"malformed cu_seqlens_q {cu!r} for sum R_i = {t_dec}")
        if np.any(np.diff(cu) < 0):
            raise ValueError("cu_seqlens_q must be non-decreasing")
        if self.k_context.shape != self.v_context.shape:
            raise ValueError("k_context / v_context shape mismatch")
        if self.k_decoded.shape != self.v_decoded.shape:
            raise ValueError("k_decoded / v_decoded shape mismatch")
        if self.context_seqlen is None:
            self.context_seqlen = self.k_context.shape[0]
        if self.context_seqlen < 0:
            raise ValueError("context_seqlen must be non-negative")
        if self.context_seqlen != self.k_context.shape[0]:
            raise ValueError(
                f"context_seqlen={self.context_seqlen} != k_context length "
                f"{self.k_context.shape[0]}"
            )
        if self.k_decoded.shape[0] != t_dec:
            raise ValueError("k_decoded must share q's packed token count")
        h_k = self.k_context.shape[1]
        if self.k_decoded.shape[1] != h_k or self.k_context.shape[2] != d:
            raise ValueError("context/decoded KV head layout mismatch")
        if h_k == 0 or h % h_k != 0:
            raise ValueError(f"H={h} must be a positive multiple of H_k={h_k}")
        if not self.causal:
            raise ValueError("only causal=True is supported")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if self.softmax_scale is None:
            self.softmax_scale = 1.0 / np.sqrt(d)
        if self.max_seqlen_q is None:
            self.max_seqlen_q = int(np.max(np.diff(cu))) if cu.size > 1 else 0

    @property
    def num_sequences(self) -> int:
        return self.cu_seqlens_q.size - 1


@dataclass
class ContextGradScratch:
    """Zero-initialized accumulators for the shared-context gradients.

    Written only by `add`; read only by `convert_dkv_context` after all
    accumulation has completed.  The accumulator dtype is float32 for
    F32/BF16EMU pipelines and float64 for F64 (oracle-grade) runs.
    """

    dk_acc: np.ndarray
    dv_acc: np.ndarray

    @staticmethod
    def zeros(p: int, h_k: int, d: int, dtype=np.float32) -> "ContextGradScratch":
        return ContextGradScratch(
            np.zeros((p, h_k, d), dtype=dtype), np.zeros((p, h_k, d), dtype=dtype)
        )

    def add(self, dk_contrib: np.ndarray, dv_contrib: np.ndarray) -> None:
        self.dk_acc += dk_contrib
        self.dv_acc += dv_contrib


def convert_dkv_context(scratch: ContextGradScratch, out_precision: Precision):
    """Cast the finished scratch accumulators to the output precision.

    Exactly one rounding step per element; must run strictly after all
    accumulation into the scratch has completed.
    """
    dk = Tensor(out_precision.quantize(scratch.dk_acc), out_precision)
    dv = Tensor(out_precision.quantize(scratch.dv_acc), out_precision)
    return dk, dv


def bf16_naive_accumulate(contributions) -> Tensor:
    """Left-fold contributions entirely in bf16: acc = bf16(acc + bf16(c)).

    This is the rejected accumulation strategy kept as a precision-study
    foil: each of the N-1 folds compounds another bf16 rounding step, while
    the scratch path rounds exactly once.
    """
    acc = None
    for c in contributions:
        arr = c.data if isinstance(c, Tensor) else np.asarray(c)
        arr32 = bf16_round(np.asarray(arr, dtype=np.float32))
        acc = arr32 if acc is None else bf16_round(acc + arr32)
    if acc is None:
        raise ValueError("need at least one contribution")
    return Tensor(np.asarray(acc, dtype=np.float32), Precision.BF16EMU)


def _regions_for_sequence(inp: DualKVInput, k_ctx, v_ctx, k_dec, v_dec, start, stop):
    # context tiles first (logical base 0), then the sequence's own decoded
    # tiles starting at logical position P
    return [
        KVRegion(k_ctx, v_ctx, 0),
        KVRegion(k_dec[start:stop], v_dec[start:stop], inp.context_seqlen),
    ]


def dualkv_fwd(inp: DualKVInput) -> Tuple[Tensor, Tensor]:
    """Two-region forward.  Returns (O_d [sum R_i, H, d], lse [H, sum R_i]).

    Per sequence i and local row r, the output equals dense causal attention
    of q_r against [k_context ; k_decoded^(i)] with causal offset P.  With
    P = 0 the context region contributes no tiles and the computation is
    bit-identical to `fa2_varlen_fwd` on the decoded tensors alone.
    """
    prec = inp.q.precision
    cdtype = prec.compute_dtype
    t_dec, h, d = inp.q.shape
    q = inp.q.data.astype(cdtype, copy=False)
    k_ctx = inp.k_context.data.astype(cdtype, copy=False)
    v_ctx = inp.v_context.data.astype(cdtype, copy=False)
    k_dec = inp.k_decoded.data.astype(cdtype, copy=False)
    v_dec = inp.v_decoded.data.astype(cdtype, copy=False)

    out = np.zeros((t_dec, h, d), dtype=cdtype)
    lse = np.zeros((h, t_dec), dtype=cdtype)
    for i in range(inp.num_sequences):
        start, stop = int(inp.cu_seqlens_q[i]), int(inp.cu_seqlens_q[i + 1])
        if start == stop:
            continue  # R_i = 0 contributes no rows
        regions = _regions_for_sequence(inp, k_ctx, v_ctx, k_dec, v_dec, start, stop)
        row_pos = inp.context_seqlen + np.arange(stop - start, dtype=np.int64)
        o_i, lse_i = _forward_rows(q[start:stop], regions, row_pos, inp.softmax_scale,
                                   inp.tile_size, cdtype)
        out[start:stop] = o_i
        lse[:, start:stop] = lse_i

    # Saved tensors (consumed by the backward) stay in compute precision;
    # only inputs and returned gradients carry the storage grid.
    saved_prec = Precision.F64 if prec is Precision.F64 else Precision.F32
    return Tensor(out, saved_prec), Tensor(lse, saved_prec)


def _per_sequence_backward(inp: DualKVInput, out: Tensor, lse: Tensor, d_out: Tensor):
    """Run the tiled backward per sequence; yields raw accumulators."""
    if d_out.shape != inp.q.shape or out.shape != inp.q.shape:
        raise ValueError(
            f"O/dO shape {out.shape}/{d_out.shape} inconsistent with q {inp.q.shape}"
        )
    prec = inp.q.precision
    cdtype = prec.compute_dtype
    q = inp.q.data.astype(cdtype, copy=False)
    k_ctx = inp.k_context.data.astype(cdtype, copy=False)
    v_ctx = inp.v_context.data.astype(cdtype, copy=False)
    k_dec = inp.k_decoded.data.astype(cdtype, copy=False)
    v_dec = inp.v_decoded.data.astype(cdtype, copy=False)
    o = out.data.astype(cdtype, copy=False)
    do = d_out.data.astype(cdtype, copy=False)
    lse_arr = lse.data.astype(cdtype, copy=False)
    d_row = _rowsum_do_o(do, o)

    for i in range(inp.num_sequences):
        start, stop = int(inp.cu_seqlens_q[i]), int(inp.cu_seqlens_q[i + 1])
        if start == stop:
            continue
        regions = _regions_for_sequence(inp, k_ctx, v_ctx, k_dec, v_dec, start, stop)
        row_pos = inp.context_seqlen + np.arange(stop - start, dtype=np.int64)
        dq_i, region_grads = _backward_rows(
            q[start:stop], do[start:stop], lse_arr[:, start:stop], d_row[:, start:stop],
            regions, row_pos, inp.softmax_scale, inp.tile_size, cdtype,
        )
        (dkc_i, dvc_i), (dkd_i, dvd_i) = region_grads
        yield i, start, stop, dq_i, dkc_i, dvc_i, dkd_i, dvd_i


def dualkv_bwd(
    inp: DualKVInput,
    out: Tensor,
    lse: Tensor,
    d_out: Tensor,
    deterministic: bool = True,
    fold_seed: Optional[int] = None,
) -> Tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
    """Two-region backward.  Returns (dQ_d, dK_c, dV_c, dK_d, dV_d).

    dK_d/dV_d are written per sequence into disjoint regions.  dK_c/dV_c
    accumulate every sequence's contribution into a shared scratch and are
    cast exactly once by `convert_dkv_context`.  With ``deterministic`` the
    fold runs in sequence index order and is bit-reproducible; otherwise
    the fold order is permuted (seeded by ``fold_seed``), emulating the
    unordered completion of concurrent accumulation.
    """
    prec = inp.q.precision
    cdtype = prec.compute_dtype
    p_len, h_k, d = inp.k_context.shape

    dq = np.zeros(inp.q.shape, dtype=cdtype)
    dkd = np.zeros(inp.k_decoded.shape, dtype=cdtype)
    dvd = np.zeros(inp.v_decoded.shape, dtype=cdtype)
    contributions: List[Tuple[np.ndarray, np.ndarray]] = []

    for i, start, stop, dq_i, dkc_i, dvc_i, dkd_i, dvd_i in _per_sequence_backward(
        inp, out, lse, d_out
    ):
        dq[start:stop] = dq_i
        dkd[start:stop] = dkd_i
        dvd[start:stop] = dvd_i
        contributions.append((dkc_i, dvc_i))

    scratch = ContextGradScratch.zeros(p_len, h_k, d, dtype=cdtype)
    order = np.arange(len(contributions))
    if not deterministic:
        order = np.random.default_rng(fold_seed).permutation(order)
    for idx in order:
        scratch.add(*contributions[idx])  # each contribution added exactly once
    dkc, dvc = convert_dkv_context(scratch, prec)

    return (
        Tensor(prec.quantize(dq), prec),
        dkc,
        dvc,
        Tensor(prec.quantize(dkd), prec),
        Tensor(prec.quantize(dvd), prec),
    )


def context_grad_contributions(inp: DualKVInput, out: Tensor, lse: Tensor, d_out: Tensor):
    """Per-sequence (dK_c, dV_c) contributions before any accumulation.

    Instrumentation hook: the shared-context gradient equals the sum of
    these terms over sequences, which is what the scratch accumulates.
    """
    return [
        (dkc_i, dvc_i)
        for _, _, _, _, dkc_i, dvc_i, _, _ in _per_sequence_backward(inp, out, lse, d_out)
    ]


def dualkv_attention_varlen(
    q: Tensor,
    k_context: Tensor,
    v_context: Tensor,
    k_decoded: Tensor,
    v_decoded: Tensor,
    cu_seqlens_q,
    cu_seqlens_k_decoded=None,
    max_seqlen_q: Optional[int] = None,
    context_seqlen: Optional[int] = None,
    max_seqlen_k_decoded: Optional[int] = None,
    softmax_scale: Optional[float] = None,
    causal: bool = True,
    tile_size: int = 64,
) -> Tensor:
    """Five-tensor call surface for the two-region kernel.

    ``cu_seqlens_k_decoded``, when given, must equal ``cu_seqlens_q`` (the
    context is shared, so decoded KV uses the same offsets).  Returns the
    attention output; the softmax statistics stay internal.
    """
    if cu_seqlens_k_decoded is not None and not np.array_equal(
        np.asarray(cu_seqlens_k_decoded), np.asarray(cu_seqlens_q)
    ):
        raise ValueError("cu_seqlens_k_decoded must equal cu_seqlens_q")
    del max_seqlen_k_decoded  # decoded KV shares q's offsets; kept for interface parity
    inp = DualKVInput(
        q=q,
        k_context=k_context,
        v_context=v_context,
        k_decoded=k_decoded,
        v_decoded=v_decoded,
        cu_seqlens_q=cu_seqlens_q,
        context_seqlen=context_seqlen,
        max_seqlen_q=max_seqlen_q,
        softmax_scale=softmax_scale,
        causal=causal,
        tile_size=tile_size,
    )
    out, _ = dualkv_fwd(inp)
    return out
