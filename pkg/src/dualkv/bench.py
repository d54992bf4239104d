"""Wall-clock micro-benchmark: baseline varlen vs two-region attention.

Times the forward and backward of the replicated-prompt baseline against
the shared-prompt pair (context self-attention + two-region kernel) on the
same rollout shape, and reports the measured speedup next to the analytic
predictions (token-reduction ratio and exact visible-pair ratio).  CPU
numbers demonstrate direction and mechanism only; absolute magnitudes are
obviously not comparable to accelerator results.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from statistics import median
import numpy as np

from .costmodel import Scenario, exact_attention_speedup
from .fa2 import VarlenBatch, fa2_varlen_bwd, fa2_varlen_fwd
from .kernel import DualKVInput, dualkv_bwd, dualkv_fwd
from .packing import compute_rho
from .tensor import Precision, Tensor

__all__ = ["BenchConfig", "BenchReport", "run_bench"]

_PRECISIONS = {"f64": Precision.F64, "f32": Precision.F32, "bf16": Precision.BF16EMU}

# Refuse configurations whose packed tensors alone would exceed this.
_MEMORY_BUDGET_BYTES = 8 << 30


@dataclass
class BenchConfig:
    n: int = 28
    p: int = 4096
    r: int = 2048
    tile: int = 512
    heads: int = 2
    kv_heads: int = 1
    head_dim: int = 16
    reps: int = 5
    warmup: int = 2
    precision: str = "f32"
    seed: int = 0


@dataclass
class BenchReport:
    config: BenchConfig
    std_fwd_ms: float
    std_bwd_ms: float
    dk_fwd_ms: float
    dk_bwd_ms: float
    speedup_fwd: float
    speedup_bwd: float
    speedup_total: float
    bwd_fwd_ratio_std: float
    bwd_fwd_ratio_dk: float
    predicted_rho: float
    predicted_pair_ratio: float

    @property
    def std_total_ms(self) -> float:
        return self.std_fwd_ms + self.std_bwd_ms

    @property
    def dk_total_ms(self) -> float:
        return self.dk_fwd_ms + self.dk_bwd_ms


def _estimate_bytes(cfg: BenchConfig) -> int:
    itemsize = 8 if cfg.precision == "f64" else 4
    t_std = cfg.n * (cfg.p + cfg.r)
    per_row = (cfg.heads + 2 * cfg.kv_heads) * cfg.head_dim
    # q/k/v + out + d_out + three gradients, for the larger (standard) layout
    return 8 * t_std * per_row * itemsize


def _timed(fn, warmup: int, reps: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return median(samples)


def run_bench(cfg: BenchConfig) -> BenchReport:
    """Build both packings once, then time fwd and bwd of each kernel."""
    if cfg.precision not in _PRECISIONS:
        raise ValueError(f"unknown precision {cfg.precision!r}")
    est = _estimate_bytes(cfg)
    if est > _MEMORY_BUDGET_BYTES:
        raise MemoryError(
            f"configuration needs ~{est / 2**30:.1f} GiB of tensors, over the "
            f"{_MEMORY_BUDGET_BYTES / 2**30:.0f} GiB benchmark budget"
        )
    prec = _PRECISIONS[cfg.precision]
    rng = np.random.default_rng(cfg.seed)
    n, p, r, h, h_k, d = cfg.n, cfg.p, cfg.r, cfg.heads, cfg.kv_heads, cfg.head_dim

    # Replicated-prompt layout: N sequences of P+R tokens.
    s = p + r
    t_std = n * s
    std = VarlenBatch(
        Tensor(rng.normal(size=(t_std, h, d)), prec),
        Tensor(rng.normal(size=(t_std, h_k, d)), prec),
        Tensor(rng.normal(size=(t_std, h_k, d)), prec),
        np.arange(0, t_std + 1, s, dtype=np.int64),
        tile_size=cfg.tile,
    )
    std_dout = Tensor(rng.normal(size=(t_std, h, d)), prec)

    # Shared-prompt layout: one prompt copy + N decoded sequences.
    t_dec = n * r
    ctx = VarlenBatch(
        Tensor(rng.normal(size=(p, h, d)), prec),
        Tensor(rng.normal(size=(p, h_k, d)), prec),
        Tensor(rng.normal(size=(p, h_k, d)), prec),
        np.array([0, p], dtype=np.int64),
        tile_size=cfg.tile,
    )
    dec = DualKVInput(
        q=Tensor(rng.normal(size=(t_dec, h, d)), prec),
        k_context=ctx.k,
        v_context=ctx.v,
        k_decoded=Tensor(rng.normal(size=(t_dec, h_k, d)), prec),
        v_decoded=Tensor(rng.normal(size=(t_dec, h_k, d)), prec),
        cu_seqlens_q=np.arange(0, t_dec + 1, r, dtype=np.int64),
        tile_size=cfg.tile,
    )
    ctx_dout = Tensor(rng.normal(size=(p, h, d)), prec)
    dec_dout = Tensor(rng.normal(size=(t_dec, h, d)), prec)

    std_saved = {}
    dk_saved = {}

    def std_fwd():
        std_saved["out"], std_saved["lse"] = fa2_varlen_fwd(std)

    def std_bwd():
        fa2_varlen_bwd(std, std_saved["out"], std_saved["lse"], std_dout)

    def dk_fwd():
        dk_saved["ctx"] = fa2_varlen_fwd(ctx)          # context pass, once
        dk_saved["dec"] = dualkv_fwd(dec)              # decoded pass, two regions

    def dk_bwd():
        dualkv_bwd(dec, dk_saved["dec"][0], dk_saved["dec"][1], dec_dout)
        fa2_varlen_bwd(ctx, dk_saved["ctx"][0], dk_saved["ctx"][1], ctx_dout)

    std_fwd_ms = _timed(std_fwd, cfg.warmup, cfg.reps)
    std_bwd_ms = _timed(std_bwd, cfg.warmup, cfg.reps)
    dk_fwd_ms = _timed(dk_fwd, cfg.warmup, cfg.reps)
    dk_bwd_ms = _timed(dk_bwd, cfg.warmup, cfg.reps)

    scn = Scenario(n=n, p=p, r=r, heads=h, kv_heads=h_k, head_dim=d)
    return BenchReport(
        config=cfg,
        std_fwd_ms=std_fwd_ms,
        std_bwd_ms=std_bwd_ms,
        dk_fwd_ms=dk_fwd_ms,
        dk_bwd_ms=dk_bwd_ms,
        speedup_fwd=std_fwd_ms / dk_fwd_ms,
        speedup_bwd=std_bwd_ms / dk_bwd_ms,
        speedup_total=(std_fwd_ms + std_bwd_ms) / (dk_fwd_ms + dk_bwd_ms),
        bwd_fwd_ratio_std=std_bwd_ms / std_fwd_ms,
        bwd_fwd_ratio_dk=dk_bwd_ms / dk_fwd_ms,
        predicted_rho=float(compute_rho(n, p, r)),
        predicted_pair_ratio=exact_attention_speedup(scn),
    )
