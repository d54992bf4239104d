"""Toy decoder-only transformer with swappable attention backends.

Per layer: RMSNorm -> GQA attention with rotary embeddings -> residual ->
RMSNorm -> SwiGLU MLP -> residual; then a final norm and a logit head.
No biases, no dropout, no weight tying -- the minimal structure in which
every non-attention operation is per-token.

Two backends consume the two packings:

* ``standard``: one varlen causal attention call over the replicated-prompt
  layout (every sequence is [prompt ; response_i]).
* ``dualkv``: per group, split Q/K/V at the prompt boundary; context
  self-attention runs once over the prompt, decoded attention runs through
  the two-region kernel against the shared context plus per-sequence
  decoded KV, and the outputs are reassembled.  In the backward the shared
  context KV receives gradient from both calls, summed.

Rotary positions are logical in both backends: prompt token j sits at
position j, response token r at position P + r.  The whole stack runs in
float64; it exists to execute equivalence and invariance checks, not to be
fast.

The training loss is an advantage-weighted negative log-likelihood over
response-token rows only: each response row contributes
``-advantage * log softmax(logits_row)[token_row]``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from .fa2 import VarlenBatch, fa2_varlen_fwd, fa2_varlen_bwd
from .kernel import DualKVInput, dualkv_fwd, dualkv_bwd
from .packing import MODE_DUALKV, MODE_STANDARD, PackedBatch
from .tensor import Precision, Tensor, seeded_fill

__all__ = [
    "ModelConfig",
    "LayerParams",
    "LayerGrads",
    "ModelParams",
    "ModelGrads",
    "init_params",
    "rmsnorm",
    "rmsnorm_bwd",
    "rope",
    "rope_bwd",
    "model_fwd",
    "model_loss",
    "model_bwd",
]

BACKEND_STANDARD = MODE_STANDARD
BACKEND_DUALKV = MODE_DUALKV


@dataclass
class ModelConfig:
    num_layers: int
    dim: int          # D, residual width
    heads: int        # H, query heads
    kv_heads: int     # H_k
    head_dim: int     # d
    ffn_dim: int      # d_ff
    vocab: int
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    tile_size: int = 16

    def __post_init__(self):
        if self.heads % self.kv_heads != 0:
            raise ValueError("heads must be a multiple of kv_heads")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even (rotary pairs dimensions)")


@dataclass
class LayerParams:
    w_q: np.ndarray      # [D, H*d]
    w_k: np.ndarray      # [D, H_k*d]
    w_v: np.ndarray      # [D, H_k*d]
    w_o: np.ndarray      # [H*d, D]
    gain1: np.ndarray    # [D]
    gain2: np.ndarray    # [D]
    w_gate: np.ndarray   # [D, d_ff]
    w_up: np.ndarray     # [D, d_ff]
    w_down: np.ndarray   # [d_ff, D]


LayerGrads = LayerParams  # same field layout, gradient values


@dataclass
class ModelParams:
    embedding: np.ndarray  # [vocab, D]
    layers: List[LayerParams]
    final_gain: np.ndarray  # [D]
    w_head: np.ndarray      # [D, vocab]


@dataclass
class ModelGrads:
    embedding: np.ndarray
    layers: List[LayerGrads]
    final_gain: np.ndarray
    w_head: np.ndarray

    def flatten(self) -> np.ndarray:
        parts = [self.embedding.ravel()]
        for layer in self.layers:
            parts.extend(getattr(layer, f.name).ravel() for f in fields(LayerParams))
        parts.append(self.final_gain.ravel())
        parts.append(self.w_head.ravel())
        return np.concatenate(parts)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Seeded random weights; norm gains start near 1 so gradients flow."""
    counter = [seed]

    def draw(shape, std):
        counter[0] += 1
        return seeded_fill(shape, counter[0], dist="normal", std=std).data.copy()

    d_model, h, h_k, d = config.dim, config.heads, config.kv_heads, config.head_dim
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerParams(
                w_q=draw((d_model, h * d), d_model**-0.5),
                w_k=draw((d_model, h_k * d), d_model**-0.5),
                w_v=draw((d_model, h_k * d), d_model**-0.5),
                w_o=draw((h * d, d_model), (h * d) ** -0.5),
                gain1=1.0 + 0.1 * draw((d_model,), 1.0),
                gain2=1.0 + 0.1 * draw((d_model,), 1.0),
                w_gate=draw((d_model, config.ffn_dim), d_model**-0.5),
                w_up=draw((d_model, config.ffn_dim), d_model**-0.5),
                w_down=draw((config.ffn_dim, d_model), config.ffn_dim**-0.5),
            )
        )
    return ModelParams(
        embedding=draw((config.vocab, d_model), 1.0),
        layers=layers,
        final_gain=1.0 + 0.1 * draw((d_model,), 1.0),
        w_head=draw((d_model, config.vocab), d_model**-0.5),
    )


def zeros_like_params(params: ModelParams) -> ModelGrads:
    return ModelGrads(
        embedding=np.zeros_like(params.embedding),
        layers=[
            LayerParams(**{f.name: np.zeros_like(getattr(layer, f.name)) for f in fields(LayerParams)})
            for layer in params.layers
        ],
        final_gain=np.zeros_like(params.final_gain),
        w_head=np.zeros_like(params.w_head),
    )


# --- per-token primitives -------------------------------------------------


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    """x / sqrt(mean(x^2) + eps) * gain, per token row."""
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv * gain


def rmsnorm_bwd(x: np.ndarray, gain: np.ndarray, eps: float, dy: np.ndarray):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    dgain = np.sum(dy * x * inv, axis=0)
    gdy = dy * gain
    dot = np.sum(gdy * x, axis=-1, keepdims=True)
    dx = gdy * inv - x * (inv**3) * dot / x.shape[-1]
    return dx, dgain


def _rope_angles(positions: np.ndarray, head_dim: int, base: float):
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles)[:, None, :], np.sin(angles)[:, None, :]  # [T, 1, d/2]


def rope(x: np.ndarray, positions, base: float = 10000.0) -> np.ndarray:
    """Rotary embedding: pair (2k, 2k+1) rotated by pos * base^(-2k/d)."""
    cos, sin = _rope_angles(positions, x.shape[-1], base)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_bwd(dy: np.ndarray, positions, base: float = 10000.0) -> np.ndarray:
    """Adjoint of `rope`: the inverse rotation (rotations are orthogonal)."""
    cos, sin = _rope_angles(positions, dy.shape[-1], base)
    deven, dodd = dy[..., 0::2], dy[..., 1::2]
    out = np.empty_like(dy)
    out[..., 0::2] = deven * cos + dodd * sin
    out[..., 1::2] = -deven * sin + dodd * cos
    return out


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _silu_grad(x: np.ndarray) -> np.ndarray:
    sig = 1.0 / (1.0 + np.exp(-x))
    return sig * (1.0 + x * (1.0 - sig))


# --- attention backends ----------------------------------------------------


def _t(arr: np.ndarray) -> Tensor:
    return Tensor(arr, Precision.F64)


def _attn_standard_fwd(config: ModelConfig, batch: PackedBatch, q, k, v):
    vb = VarlenBatch(_t(q), _t(k), _t(v), batch.all_cu_seqlens(), tile_size=config.tile_size)
    out, lse = fa2_varlen_fwd(vb)
    return out.data, ("standard", vb, out, lse)


def _attn_standard_bwd(saved, d_out):
    _, vb, out, lse = saved
    dq, dk, dv = fa2_varlen_bwd(vb, out, lse, _t(d_out))
    return dq.data, dk.data, dv.data, None


def _attn_dualkv_fwd(config: ModelConfig, batch: PackedBatch, q, k, v):
    out = np.zeros_like(q)
    saved_groups = []
    for g in batch.groups:
        c0, c1 = g.context_start, g.context_start + g.context_span
        r0, r1 = g.resp_start, g.resp_start + int(g.resp_cu[-1])
        # Call 1: context self-attention over the single prompt copy.
        vb_ctx = VarlenBatch(
            _t(q[c0:c1]), _t(k[c0:c1]), _t(v[c0:c1]),
            np.array([0, c1 - c0], dtype=np.int64), tile_size=config.tile_size,
        )
        o_ctx, lse_ctx = fa2_varlen_fwd(vb_ctx)
        # Call 2: decoded attention over shared context + own decoded KV.
        inp = DualKVInput(
            q=_t(q[r0:r1]),
            k_context=_t(k[c0:c1]), v_context=_t(v[c0:c1]),
            k_decoded=_t(k[r0:r1]), v_decoded=_t(v[r0:r1]),
            cu_seqlens_q=g.resp_cu, tile_size=config.tile_size,
        )
        o_dec, lse_dec = dualkv_fwd(inp)
        out[c0:c1] = o_ctx.data
        out[r0:r1] = o_dec.data
        saved_groups.append((g, vb_ctx, o_ctx, lse_ctx, inp, o_dec, lse_dec))
    return out, ("dualkv", saved_groups)


def _attn_dualkv_bwd(saved, d_out):
    _, saved_groups = saved
    dq = np.zeros_like(d_out)
    some_group = saved_groups[0][4]
    dk = np.zeros((d_out.shape[0],) + some_group.k_context.shape[1:], dtype=np.float64)
    dv = np.zeros_like(dk)
    breakdown = []
    for g, vb_ctx, o_ctx, lse_ctx, inp, o_dec, lse_dec in saved_groups:
        c0, c1 = g.context_start, g.context_start + g.context_span
        r0, r1 = g.resp_start, g.resp_start + int(g.resp_cu[-1])
        do_ctx, do_dec = d_out[c0:c1], d_out[r0:r1]
        # Call 2 backward first, then Call 1; the shared context KV sums both.
        dq_d, dk_c2, dv_c2, dk_d, dv_d = dualkv_bwd(inp, o_dec, lse_dec, _t(do_dec))
        dq_c, dk_c1, dv_c1 = fa2_varlen_bwd(vb_ctx, o_ctx, lse_ctx, _t(do_ctx))
        dq[c0:c1] = dq_c.data
        dq[r0:r1] = dq_d.data
        dk[c0:c1] = dk_c1.data + dk_c2.data
        dv[c0:c1] = dv_c1.data + dv_c2.data
        dk[r0:r1] = dk_d.data
        dv[r0:r1] = dv_d.data
        breakdown.append(
            {
                "d_out_context_max": float(np.max(np.abs(do_ctx))) if do_ctx.size else 0.0,
                "dk_context_call1": dk_c1.data,
                "dk_context_call2": dk_c2.data,
                "dk_context_total": dk[c0:c1].copy(),
            }
        )
    return dq, dk, dv, breakdown


_BACKENDS = {
    BACKEND_STANDARD: (_attn_standard_fwd, _attn_standard_bwd),
    BACKEND_DUALKV: (_attn_dualkv_fwd, _attn_dualkv_bwd),
}


# --- model ------------------------------------------------------------------


def model_fwd(
    config: ModelConfig, params: ModelParams, batch: PackedBatch, backend: str
) -> Tuple[np.ndarray, Dict]:
    """Full forward pass.  Returns (logits [T, vocab], cache for backward)."""
    if backend not in _BACKENDS:
        raise ValueError(f"unknown backend {backend!r}")
    if batch.mode != backend:
        raise ValueError(f"batch mode {batch.mode!r} does not match backend {backend!r}")
    attn_fwd, _ = _BACKENDS[backend]
    h, h_k, d = config.heads, config.kv_heads, config.head_dim
    t_total = batch.total_tokens
    positions = batch.position_ids()

    x = params.embedding[batch.token_ids].astype(np.float64)
    layer_caches = []
    for layer in params.layers:
        n1 = rmsnorm(x, layer.gain1, config.norm_eps)
        q = (n1 @ layer.w_q).reshape(t_total, h, d)
        k = (n1 @ layer.w_k).reshape(t_total, h_k, d)
        v = (n1 @ layer.w_v).reshape(t_total, h_k, d)
        q_rot = rope(q, positions, config.rope_base)
        k_rot = rope(k, positions, config.rope_base)
        o_attn, attn_saved = attn_fwd(config, batch, q_rot, k_rot, v)
        attn_flat = o_attn.reshape(t_total, h * d)
        x_mid = x + attn_flat @ layer.w_o
        n2 = rmsnorm(x_mid, layer.gain2, config.norm_eps)
        gate_pre = n2 @ layer.w_gate
        up = n2 @ layer.w_up
        act = _silu(gate_pre) * up
        x_next = x_mid + act @ layer.w_down
        layer_caches.append(
            dict(x_in=x, n1=n1, attn_saved=attn_saved, attn_flat=attn_flat,
                 x_mid=x_mid, n2=n2, gate_pre=gate_pre, up=up, act=act)
        )
        x = x_next

    n_final = rmsnorm(x, params.final_gain, config.norm_eps)
    logits = n_final @ params.w_head
    cache = dict(layers=layer_caches, x_final=x, n_final=n_final,
                 positions=positions, backend=backend)
    return logits, cache


def _loss_and_dlogits(batch: PackedBatch, logits: np.ndarray, advantages_override=None):
    rows, weights = batch.loss_rows()
    if advantages_override is not None:
        weights = np.asarray(advantages_override, dtype=np.float64)
        if weights.shape != rows.shape:
            raise ValueError("advantage override must provide one weight per response token")
    tokens = batch.token_ids[rows]
    lrows = logits[rows]
    m = lrows.max(axis=1, keepdims=True)
    log_z = m + np.log(np.exp(lrows - m).sum(axis=1, keepdims=True))
    log_probs = lrows - log_z
    loss = -float(np.sum(weights * log_probs[np.arange(rows.size), tokens]))
    probs = np.exp(log_probs)
    dlrows = probs * weights[:, None]
    dlrows[np.arange(rows.size), tokens] -= weights
    dlogits = np.zeros_like(logits)
    dlogits[rows] = dlrows
    return loss, dlogits


def model_loss(
    config: ModelConfig, params: ModelParams, batch: PackedBatch, backend: str,
    advantages_override=None,
) -> float:
    """Advantage-weighted response NLL; the scalar the backward differentiates."""
    logits, _ = model_fwd(config, params, batch, backend)
    loss, _ = _loss_and_dlogits(batch, logits, advantages_override)
    return loss


def model_bwd(
    config: ModelConfig,
    params: ModelParams,
    batch: PackedBatch,
    backend: str,
    advantages_override=None,
    record: Optional[Dict] = None,
) -> Tuple[ModelGrads, float]:
    """Manual backward through the full stack.  Returns (grads, loss).

    When ``record`` is a dict it receives per-layer attention diagnostics
    (for the shared-prompt backend: the upstream context gradient magnitude
    and the two summed context-KV gradient contributions).
    """
    logits, cache = model_fwd(config, params, batch, backend)
    loss, dlogits = _loss_and_dlogits(batch, logits, advantages_override)
    _, attn_bwd = _BACKENDS[backend]
    h, h_k, d = config.heads, config.kv_heads, config.head_dim
    t_total = batch.total_tokens
    positions = cache["positions"]
    grads = zeros_like_params(params)

    grads.w_head = cache["n_final"].T @ dlogits
    d_nf = dlogits @ params.w_head.T
    dx, grads.final_gain = rmsnorm_bwd(cache["x_final"], params.final_gain, config.norm_eps, d_nf)

    if record is not None:
        record["attn"] = [None] * config.num_layers

    for li in reversed(range(config.num_layers)):
        layer, g = params.layers[li], grads.layers[li]
        c = cache["layers"][li]
        # MLP branch
        d_act = dx @ layer.w_down.T
        g.w_down = c["act"].T @ dx
        d_gate_pre = d_act * c["up"] * _silu_grad(c["gate_pre"])
        d_up = d_act * _silu(c["gate_pre"])
        g.w_gate = c["n2"].T @ d_gate_pre
        g.w_up = c["n2"].T @ d_up
        d_n2 = d_gate_pre @ layer.w_gate.T + d_up @ layer.w_up.T
        d_xmid_norm, g.gain2 = rmsnorm_bwd(c["x_mid"], layer.gain2, config.norm_eps, d_n2)
        d_xmid = dx + d_xmid_norm
        # Attention branch
        d_attn_flat = d_xmid @ layer.w_o.T
        g.w_o = c["attn_flat"].T @ d_xmid
        d_o_attn = d_attn_flat.reshape(t_total, h, d)
        dq_rot, dk_rot, dv, breakdown = attn_bwd(c["attn_saved"], d_o_attn)
        if record is not None:
            record["attn"][li] = breakdown
        dq = rope_bwd(dq_rot, positions, config.rope_base)
        dk = rope_bwd(dk_rot, positions, config.rope_base)
        dq_flat = dq.reshape(t_total, h * d)
        dk_flat = dk.reshape(t_total, h_k * d)
        dv_flat = dv.reshape(t_total, h_k * d)
        g.w_q = c["n1"].T @ dq_flat
        g.w_k = c["n1"].T @ dk_flat
        g.w_v = c["n1"].T @ dv_flat
        d_n1 = dq_flat @ layer.w_q.T + dk_flat @ layer.w_k.T + dv_flat @ layer.w_v.T
        d_x_norm, g.gain1 = rmsnorm_bwd(c["x_in"], layer.gain1, config.norm_eps, d_n1)
        dx = d_xmid + d_x_norm

    np.add.at(grads.embedding, batch.token_ids, dx)
    return grads, loss
