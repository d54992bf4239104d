"""Acceptance gate: one test per criterion, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one pass/fail
line per criterion.  Criteria marked "desk scale" substitute analytically
checkable properties for accelerator-scale measurements; criterion 11
documents exactly which reported quantities are out of the artifact's
reach and what it demonstrates instead.
"""

import numpy as np
import pytest

from dualkv.bench import BenchConfig, run_bench
from dualkv.costmodel import (
    MODE_DUALKV,
    MODE_STANDARD,
    Scenario,
    attention_flops,
    kernel_memory_savings,
)
from dualkv.packing import compute_rho
from dualkv.verify import (
    check_backward_exactness_f64,
    check_backward_finite_diff,
    check_forward_bf16_allclose,
    check_forward_exactness_f64,
    check_gradient_equivalence,
    check_n1_degeneracy,
    check_naive_strictly_worse,
    check_p0_degeneracy,
    check_pipeline_theorem,
    check_plan_permutation_invariance,
    check_prompt_invariance,
    check_single_cast_ulp,
    check_tile_independence,
)

from test_costmodel import RHO_TABLE, enumerate_visible_pairs


def _report(criterion, result):
    print(f"criterion {criterion}: {'PASS' if result.passed else 'FAIL'} "
          f"[{result.name}] observed={result.observed:.3e} bound={result.bound:.3e}")
    assert result.passed, result


def test_criterion_01_forward_exactness():
    # >= 50 randomized configurations: N<=8, P<=33, R_i<=17, B_N in {1,3,4,8},
    # GQA ratios {1,2,4}, d in {1,4,8}; f64 max-abs <= 1e-12 vs the dense
    # concatenated-KV oracle, and allclose(1e-3, 1e-3) in bf16 emulation.
    _report("1a", check_forward_exactness_f64(seed=101, cases=50))
    _report("1b", check_forward_bf16_allclose(seed=102, cases=50))


def test_criterion_02_backward_exactness():
    # five gradients vs the oracle (context grads as the explicit
    # per-sequence sum) to 1e-10 in f64, plus central differences to 1e-6
    _report("2a", check_backward_exactness_f64(seed=103, cases=50))
    _report("2b", check_backward_finite_diff(seed=104, cases=5))


def test_criterion_03_gradient_equivalence_theorem():
    # 2-layer toy model, >= 20 seeds: standard-packing and shared-prompt
    # backends produce parameter gradients within 1e-9 in f64
    _report("3", check_gradient_equivalence(seed=105, seeds=20))


def test_criterion_04_prompt_hidden_state_invariant():
    # prompt rows identical across all sequences at every layer, <= 1e-12
    _report("4", check_prompt_invariance(seed=106))


def test_criterion_05_pipeline_theorem():
    # default-plan/replicated vs grouped-plan/shared aggregate gradients
    # within 1e-9 over >= 10 instances; same-mode plans within 1e-12
    _report("5a", check_pipeline_theorem(seed=107, instances=10))
    _report("5b", check_plan_permutation_invariance(seed=108))


def test_criterion_06_precision_contract():
    # fp32-accumulate-then-single-cast within 1 bf16 ulp of the f64 sum
    # cast once; repeated-bf16 folding strictly worse in >= 99% of elements
    # over 1e4 trials at N=32
    _report("6a", check_single_cast_ulp(seed=109, cases=15))
    _report("6b", check_naive_strictly_worse(seed=110, trials=10_000, n=32))


def test_criterion_07_reference_tables():
    # all 8 token-reduction rows at the printed one-decimal values, and the
    # per-layer memory-savings row within MB rounding of 469/940/14/1423
    for n, p, r, printed in RHO_TABLE:
        assert f"{float(compute_rho(n, p, r)):.1f}" == printed, (n, p, r)
    scn = Scenario(n=8, p=16384, r=2048, heads=32, kv_heads=8, head_dim=128)
    kv, q, lse, total = kernel_memory_savings(scn)
    for got_bytes, printed_mb in ((kv, 469), (q, 940), (lse, 14), (total, 1423)):
        assert abs(got_bytes / 1e6 - printed_mb) <= 1.0
    print("criterion 7: PASS [rho table 8/8 rows; memory row 469/940/14/1423 MB]")


def test_criterion_08_flop_oracle():
    # formula equals 4x brute-force visible-pair enumeration for all
    # N<=4, P<=8, R<=6 in both modes; shared <= standard with equality
    # iff N=1 or P=0
    checked = 0
    for n in range(1, 5):
        for p in range(0, 9):
            for r in range(0, 7):
                scn = Scenario(n=n, p=p, r=r, heads=1, kv_heads=1, head_dim=1)
                std = attention_flops(scn, MODE_STANDARD)
                dk = attention_flops(scn, MODE_DUALKV)
                assert std == 4 * enumerate_visible_pairs(n, p, [r] * n, MODE_STANDARD)
                assert dk == 4 * enumerate_visible_pairs(n, p, [r] * n, MODE_DUALKV)
                assert dk <= std
                assert (dk == std) == (n == 1 or p == 0)
                checked += 1
    print(f"criterion 8: PASS [flop formula == 4x pair enumeration, {checked} configs]")


def test_criterion_09_degeneracies():
    # empty context: bitwise match with the baseline kernel (deterministic
    # mode, same tile size); single rollout: cross-backend logits <= 1e-12
    _report("9a", check_p0_degeneracy(seed=111))
    _report("9b", check_n1_degeneracy(seed=112))


def test_criterion_10_tile_independence():
    # outputs invariant across B_N in {1,2,4,8,full} within f32
    # reassociation tolerance (<= 1e-5 max-abs on unit-scale inputs)
    _report("10", check_tile_independence(seed=113))


def test_criterion_11_cpu_speedup_and_scope():
    # Accelerator-scale results (wall-clock tables, MFU, HBM peaks, OOM
    # boundaries, training reward curves) are out of reach on a desk CPU
    # and are not reproduced here.  What must hold on CPU: the measured
    # two-call speedup over replicated packing exceeds 1 at N=28, P=4096,
    # R=2048, reported beside the analytic predictions.
    rep = run_bench(BenchConfig(n=28, p=4096, r=2048, reps=1, warmup=0, seed=114))
    print(
        f"criterion 11: measured f+b speedup {rep.speedup_total:.2f}x "
        f"(fwd {rep.speedup_fwd:.2f}x, bwd {rep.speedup_bwd:.2f}x) vs predictions "
        f"rho={rep.predicted_rho:.2f}x pair-ratio={rep.predicted_pair_ratio:.2f}x; "
        f"bwd/fwd ratio standard={rep.bwd_fwd_ratio_std:.2f} shared={rep.bwd_fwd_ratio_dk:.2f} "
        "(reported, not asserted)"
    )
    assert rep.speedup_total > 1.0
    print("criterion 11: PASS [CPU two-call speedup > 1; GPU-scale metrics documented out of scope]")
