"""Verification suites: randomized oracle sweeps, equivalence theorems,
degeneracies, and precision contracts.

Each check returns a `CheckResult` with the observed worst value and its
bound, so the CLI can print one pass/fail line per check and the test
suite can assert the same conditions.  All randomness is derived from an
explicit seed; repeated runs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .fa2 import VarlenBatch, fa2_varlen_bwd, fa2_varlen_fwd
from .kernel import (
    ContextGradScratch,
    DualKVInput,
    bf16_naive_accumulate,
    context_grad_contributions,
    convert_dkv_context,
    dualkv_bwd,
    dualkv_fwd,
)
from .layer import ModelConfig, init_params, model_bwd, model_fwd
from .packing import RolloutGroup, RolloutResponse, pack_dualkv, pack_standard
from .pipeline import (
    RolloutSample,
    StepPlan,
    aggregate_step_gradient,
    make_grouped_plan,
    simulate_balance_batch,
)
from .refattn import DenseAttentionCase, ref_attention_bwd, ref_attention_fwd
from .tensor import Precision, Tensor, bf16_round, bf16_ulp, max_abs_diff

__all__ = ["CheckResult", "SUITES", "run_suite", "suite_names"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    observed: float
    bound: float
    detail: str = ""


# --- randomized kernel configurations ---------------------------------------


def _draw_config(rng: np.random.Generator) -> Dict:
    n = int(rng.integers(1, 9))
    p = int(rng.integers(0, 34))
    r_list = rng.integers(0, 18, size=n)
    if r_list.sum() == 0:
        r_list[int(rng.integers(0, n))] = int(rng.integers(1, 18))
    h_k = int(rng.choice([1, 2]))
    group = int(rng.choice([1, 2, 4]))
    return dict(
        n=n,
        p=p,
        r_list=[int(r) for r in r_list],
        tile=int(rng.choice([1, 3, 4, 8])),
        h_k=h_k,
        h=h_k * group,
        d=int(rng.choice([1, 4, 8])),
    )


def _build_inputs(cfg: Dict, rng: np.random.Generator, precision: Precision):
    sum_r = sum(cfg["r_list"])
    shapes = dict(
        q=(sum_r, cfg["h"], cfg["d"]),
        k_context=(cfg["p"], cfg["h_k"], cfg["d"]),
        v_context=(cfg["p"], cfg["h_k"], cfg["d"]),
        k_decoded=(sum_r, cfg["h_k"], cfg["d"]),
        v_decoded=(sum_r, cfg["h_k"], cfg["d"]),
    )
    tensors = {name: Tensor(rng.normal(size=shape), precision) for name, shape in shapes.items()}
    cu = np.concatenate([[0], np.cumsum(cfg["r_list"])]).astype(np.int64)
    inp = DualKVInput(cu_seqlens_q=cu, tile_size=cfg["tile"], **tensors)
    d_out = Tensor(rng.normal(size=shapes["q"]), precision)
    return inp, d_out


def _oracle_cases(inp: DualKVInput) -> List[DenseAttentionCase]:
    """Per-sequence dense cases over [k_context ; k_decoded^(i)]."""
    cases = []
    kc, vc = inp.k_context.as_f64(), inp.v_context.as_f64()
    kd, vd = inp.k_decoded.as_f64(), inp.v_decoded.as_f64()
    q = inp.q.as_f64()
    for i in range(inp.num_sequences):
        s, e = int(inp.cu_seqlens_q[i]), int(inp.cu_seqlens_q[i + 1])
        cases.append(
            DenseAttentionCase(
                Tensor(q[s:e]),
                Tensor(np.concatenate([kc, kd[s:e]], axis=0)),
                Tensor(np.concatenate([vc, vd[s:e]], axis=0)),
                softmax_scale=inp.softmax_scale,
                causal_offset=inp.context_seqlen,
            )
        )
    return cases


# --- kernel suite ------------------------------------------------------------


def check_forward_exactness_f64(seed: int = 0, cases: int = 50) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases_ok = 0
    for _ in range(cases):
        cfg = _draw_config(rng)
        inp, _ = _build_inputs(cfg, rng, Precision.F64)
        out, lse = dualkv_fwd(inp)
        case_worst = 0.0
        for i, case in enumerate(_oracle_cases(inp)):
            s, e = int(inp.cu_seqlens_q[i]), int(inp.cu_seqlens_q[i + 1])
            if s == e:
                continue
            o_ref, lse_ref = ref_attention_fwd(case)
            case_worst = max(case_worst, max_abs_diff(out.data[s:e], o_ref))
            case_worst = max(case_worst, max_abs_diff(lse.data[:, s:e], lse_ref))
        cases_ok += case_worst <= 1e-12
        worst = max(worst, case_worst)
    return CheckResult(
        "forward_exactness_f64", worst <= 1e-12, worst, 1e-12,
        f"{cases_ok}/{cases} cases within bound vs dense oracle",
    )


def check_forward_bf16_allclose(seed: int = 0, cases: int = 50) -> CheckResult:
    atol = rtol = 1e-3
    rng = np.random.default_rng(seed)
    worst_ratio = 0.0
    for _ in range(cases):
        cfg = _draw_config(rng)
        inp, _ = _build_inputs(cfg, rng, Precision.BF16EMU)
        out, _ = dualkv_fwd(inp)
        for i, case in enumerate(_oracle_cases(inp)):
            s, e = int(inp.cu_seqlens_q[i]), int(inp.cu_seqlens_q[i + 1])
            if s == e:
                continue
            o_ref, _ = ref_attention_fwd(case)
            got = out.data[s:e].astype(np.float64)
            ratio = np.abs(got - o_ref.data) / (atol + rtol * np.abs(o_ref.data))
            if ratio.size:
                worst_ratio = max(worst_ratio, float(ratio.max()))
    return CheckResult(
        "forward_bf16_allclose",
        worst_ratio <= 1.0,
        worst_ratio,
        1.0,
        f"max |a-b|/(atol+rtol|b|) vs dense oracle over {cases} bf16 cases, atol=rtol=1e-3",
    )


def check_backward_exactness_f64(seed: int = 0, cases: int = 50) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases_ok = 0
    for _ in range(cases):
        cfg = _draw_config(rng)
        inp, d_out = _build_inputs(cfg, rng, Precision.F64)
        out, lse = dualkv_fwd(inp)
        dq, dkc, dvc, dkd, dvd = dualkv_bwd(inp, out, lse, d_out)
        dkc_sum = np.zeros_like(inp.k_context.as_f64())
        dvc_sum = np.zeros_like(dkc_sum)
        case_worst = 0.0
        for i, case in enumerate(_oracle_cases(inp)):
            s, e = int(inp.cu_seqlens_q[i]), int(inp.cu_seqlens_q[i + 1])
            if s == e:
                continue
            o_ref, lse_ref = ref_attention_fwd(case)
            dq_ref, dk_ref, dv_ref = ref_attention_bwd(
                case, o_ref, lse_ref, Tensor(d_out.data[s:e])
            )
            p = inp.context_seqlen
            case_worst = max(case_worst, max_abs_diff(dq.data[s:e], dq_ref))
            case_worst = max(case_worst, max_abs_diff(dkd.data[s:e], dk_ref.data[p:]))
            case_worst = max(case_worst, max_abs_diff(dvd.data[s:e], dv_ref.data[p:]))
            dkc_sum += dk_ref.data[:p]
            dvc_sum += dv_ref.data[:p]
        case_worst = max(case_worst, max_abs_diff(dkc, dkc_sum))
        case_worst = max(case_worst, max_abs_diff(dvc, dvc_sum))
        cases_ok += case_worst <= 1e-10
        worst = max(worst, case_worst)
    return CheckResult(
        "backward_exactness_f64",
        worst <= 1e-10,
        worst,
        1e-10,
        f"five gradients vs dense oracle, context grads as explicit per-sequence sum; "
        f"{cases_ok}/{cases} cases within bound",
    )


def check_backward_finite_diff(seed: int = 0, cases: int = 5) -> CheckResult:
    """Central differences (step 1e-5) against the kernel backward.

    Runs on small configurations (the full loss samples every element of
    all five inputs twice per element); validates the analytic gradient
    chain end to end.
    """
    rng = np.random.default_rng(seed)
    step = 1e-5
    worst = 0.0
    for _ in range(cases):
        cfg = _draw_config(rng)
        cfg.update(
            n=min(cfg["n"], 3),
            p=min(cfg["p"], 9),
            r_list=[min(r, 5) for r in cfg["r_list"][: min(cfg["n"], 3)]],
            d=min(cfg["d"], 4),
            h_k=1,
            h=min(cfg["h"], 2),
        )
        if sum(cfg["r_list"]) == 0:
            cfg["r_list"][0] = 2
        inp, d_out = _build_inputs(cfg, rng, Precision.F64)
        out, lse = dualkv_fwd(inp)
        grads = dualkv_bwd(inp, out, lse, d_out)
        do64 = d_out.as_f64()

        arrays = dict(
            q=inp.q.as_f64(), k_context=inp.k_context.as_f64(), v_context=inp.v_context.as_f64(),
            k_decoded=inp.k_decoded.as_f64(), v_decoded=inp.v_decoded.as_f64(),
        )

        def loss(fields: Dict[str, np.ndarray]) -> float:
            total = 0.0
            for i in range(inp.num_sequences):
                s, e = int(inp.cu_seqlens_q[i]), int(inp.cu_seqlens_q[i + 1])
                if s == e:
                    continue
                case = DenseAttentionCase(
                    Tensor(fields["q"][s:e]),
                    Tensor(np.concatenate([fields["k_context"], fields["k_decoded"][s:e]])),
                    Tensor(np.concatenate([fields["v_context"], fields["v_decoded"][s:e]])),
                    softmax_scale=inp.softmax_scale,
                    causal_offset=inp.context_seqlen,
                )
                o_ref, _ = ref_attention_fwd(case)
                total += float(np.sum(do64[s:e] * o_ref.data))
            return total

        for field_name, analytic in zip(
            ["q", "k_context", "v_context", "k_decoded", "v_decoded"], grads
        ):
            arr = arrays[field_name]
            fd = np.zeros_like(arr)
            flat, fd_flat = arr.reshape(-1), fd.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                up = loss(arrays)
                flat[j] = orig - step
                down = loss(arrays)
                flat[j] = orig
                fd_flat[j] = (up - down) / (2 * step)
            worst = max(worst, max_abs_diff(analytic, fd))
    return CheckResult(
        "backward_finite_diff", worst <= 1e-6, worst, 1e-6,
        f"all five gradients vs central differences on {cases} small configs",
    )


def check_p0_degeneracy(seed: int = 0) -> CheckResult:
    """Empty context must reduce to the baseline bit for bit (fwd and bwd)."""
    rng = np.random.default_rng(seed)
    exact = True
    for _ in range(5):
        cfg = _draw_config(rng)
        cfg["p"] = 0
        inp, d_out = _build_inputs(cfg, rng, Precision.F64)
        base = VarlenBatch(
            inp.q, inp.k_decoded, inp.v_decoded, inp.cu_seqlens_q, tile_size=inp.tile_size
        )
        o_dk, lse_dk = dualkv_fwd(inp)
        o_fa, lse_fa = fa2_varlen_fwd(base)
        g_dk = dualkv_bwd(inp, o_dk, lse_dk, d_out)
        g_fa = fa2_varlen_bwd(base, o_fa, lse_fa, d_out)
        exact &= np.array_equal(o_dk.data, o_fa.data) and np.array_equal(lse_dk.data, lse_fa.data)
        exact &= np.array_equal(g_dk[0].data, g_fa[0].data)
        exact &= np.array_equal(g_dk[3].data, g_fa[1].data)
        exact &= np.array_equal(g_dk[4].data, g_fa[2].data)
        exact &= float(np.abs(g_dk[1].data).max(initial=0.0)) == 0.0
    observed = 0.0 if exact else 1.0
    return CheckResult("p0_bitwise_degeneracy", exact, observed, 0.0,
                       "P=0 forward/backward bit-match the baseline kernel")


def check_tile_independence(seed: int = 0) -> CheckResult:
    """Outputs must agree across tile sizes {1,2,4,8,full} in f32."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(4):
        cfg = _draw_config(rng)
        cfg["d"] = max(cfg["d"], 4)
        data_seed = seed * 100 + trial + 1
        full = cfg["p"] + max(cfg["r_list"]) + 1
        two_region, baseline = [], []
        for tile in [1, 2, 4, 8, full]:
            cfg["tile"] = tile
            inp, _ = _build_inputs(cfg, np.random.default_rng(data_seed), Precision.F32)
            out, _ = dualkv_fwd(inp)
            two_region.append(out.data.astype(np.float64))
            base = VarlenBatch(inp.q, inp.k_decoded, inp.v_decoded, inp.cu_seqlens_q,
                               tile_size=tile)
            o_fa, _ = fa2_varlen_fwd(base)
            baseline.append(o_fa.data.astype(np.float64))
        for outs in (two_region, baseline):
            for a in range(len(outs)):
                for b in range(a + 1, len(outs)):
                    if outs[a].size:
                        worst = max(worst, float(np.max(np.abs(outs[a] - outs[b]))))
    return CheckResult("tile_size_independence", worst <= 1e-5, worst, 1e-5,
                       "two-region and baseline outputs across B_N in {1,2,4,8,full}, f32")


def check_order_independence(seed: int = 0) -> CheckResult:
    """Permuted context-gradient fold order vs deterministic: <= 4 f32 ulp.

    Reordering a float32 sum perturbs it at the rounding scale of the
    summed magnitudes, so the ulp is anchored per element at the sum of
    contribution magnitudes (a near-cancelled result has no meaningful
    ulp of its own).
    """
    rng = np.random.default_rng(seed)
    worst_ulp = 0.0
    for trial in range(4):
        cfg = _draw_config(rng)
        cfg["n"] = max(cfg["n"], 4)
        cfg["p"] = max(cfg["p"], 8)
        cfg["r_list"] = [max(r, 2) for r in rng.integers(0, 18, size=cfg["n"])]
        inp, d_out = _build_inputs(cfg, rng, Precision.F32)
        out, lse = dualkv_fwd(inp)
        det = dualkv_bwd(inp, out, lse, d_out, deterministic=True)
        contribs = context_grad_contributions(inp, out, lse, d_out)
        scale_k = sum(np.abs(c[0]) for c in contribs)
        scale_v = sum(np.abs(c[1]) for c in contribs)
        ulp_k = np.spacing(scale_k.astype(np.float32)).astype(np.float64)
        ulp_v = np.spacing(scale_v.astype(np.float32)).astype(np.float64)
        for fold_seed in range(3):
            perm = dualkv_bwd(inp, out, lse, d_out, deterministic=False, fold_seed=fold_seed)
            for idx, ulp in ((1, ulp_k), (2, ulp_v)):
                diff = np.abs(perm[idx].data.astype(np.float64) - det[idx].data.astype(np.float64))
                if diff.size:
                    worst_ulp = max(worst_ulp, float((diff / ulp).max()))
    return CheckResult("context_fold_order_independence", worst_ulp <= 4.0, worst_ulp, 4.0,
                       "permuted vs deterministic fold, ulps at accumulation scale")


def check_mask_shift(seed: int = 0) -> CheckResult:
    """Decoded keys beyond a row's horizon are invisible; context is global."""
    rng = np.random.default_rng(seed)
    cfg = dict(n=2, p=6, r_list=[5, 4], tile=4, h_k=1, h=2, d=4)
    inp, _ = _build_inputs(cfg, rng, Precision.F64)
    out, _ = dualkv_fwd(inp)

    # Perturb the last decoded key of sequence 0: rows 0..3 of that sequence
    # must stay bit-identical, and sequence 1 must be untouched.
    kd = inp.k_decoded.as_f64()
    kd[4] += 1.0
    inp2 = DualKVInput(inp.q, inp.k_context, inp.v_context, Tensor(kd), inp.v_decoded,
                       inp.cu_seqlens_q, tile_size=cfg["tile"])
    out2, _ = dualkv_fwd(inp2)
    ok = np.array_equal(out.data[:4], out2.data[:4]) and np.array_equal(out.data[5:], out2.data[5:])
    ok &= not np.array_equal(out.data[4], out2.data[4])

    # Perturb one context element: every decoded row changes in general.
    kc = inp.k_context.as_f64()
    kc[0] += 1.0
    inp3 = DualKVInput(inp.q, Tensor(kc), inp.v_context, inp.k_decoded, inp.v_decoded,
                       inp.cu_seqlens_q, tile_size=cfg["tile"])
    out3, _ = dualkv_fwd(inp3)
    changed = np.abs(out3.data - out.data).reshape(out.data.shape[0], -1).max(axis=1)
    ok &= bool((changed > 0).all())
    return CheckResult("causal_mask_shift", bool(ok), 0.0 if ok else 1.0, 0.0,
                       "per-sequence horizon respected; context visible to every row")


# --- layer suite -------------------------------------------------------------


_TOY = ModelConfig(num_layers=2, dim=16, heads=4, kv_heads=2, head_dim=4, ffn_dim=32, vocab=29)


def _toy_batches(seed: int, config: ModelConfig = _TOY, groups: int = 1):
    rng = np.random.default_rng(seed)
    gs = []
    for gi in range(groups):
        p = int(rng.integers(2, 7))
        n = int(rng.integers(2, 5))
        prompt = [int(t) for t in rng.integers(0, config.vocab, p)]
        responses = [
            RolloutResponse(
                [int(t) for t in rng.integers(0, config.vocab, int(rng.integers(1, 5)))],
                float(rng.normal()),
            )
            for _ in range(n)
        ]
        gs.append(RolloutGroup(f"g{gi}", prompt, responses))
    return gs, pack_standard(gs), pack_dualkv(gs)


def check_gradient_equivalence(seed: int = 0, seeds: int = 20) -> CheckResult:
    worst = 0.0
    for k in range(seeds):
        _, bs, bd = _toy_batches(seed * 1000 + k, groups=1 + k % 2)
        params = init_params(_TOY, seed * 77 + k)
        gs, _ = model_bwd(_TOY, params, bs, "standard")
        gd, _ = model_bwd(_TOY, params, bd, "dualkv")
        worst = max(worst, float(np.max(np.abs(gs.flatten() - gd.flatten()))))
    return CheckResult("gradient_equivalence", worst <= 1e-9, worst, 1e-9,
                       f"standard vs shared-prompt parameter gradients, {seeds} seeds")


def check_prompt_invariance(seed: int = 0) -> CheckResult:
    worst = 0.0
    for k in range(5):
        _, bs, _ = _toy_batches(seed * 31 + k)
        params = init_params(_TOY, seed + k)
        _, cache = model_fwd(_TOY, params, bs, "standard")
        states = [c["x_in"] for c in cache["layers"]] + [cache["x_final"]]
        g = bs.groups[0]
        for x in states:
            base = x[bs.prompt_rows(0, 0)]
            for copy in range(1, len(g.advantages)):
                worst = max(worst, float(np.max(np.abs(base - x[bs.prompt_rows(0, copy)]))))
    return CheckResult("prompt_hidden_state_invariance", worst <= 1e-12, worst, 1e-12,
                       "prompt rows identical across sequences at every layer")


def check_n1_degeneracy(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    prompt = [int(t) for t in rng.integers(0, _TOY.vocab, 5)]
    resp = RolloutResponse([int(t) for t in rng.integers(0, _TOY.vocab, 4)], 0.7)
    group = RolloutGroup("solo", prompt, [resp])
    bs, bd = pack_standard([group]), pack_dualkv([group])
    params = init_params(_TOY, seed + 5)
    ls, _ = model_fwd(_TOY, params, bs, "standard")
    ld, _ = model_fwd(_TOY, params, bd, "dualkv")
    worst = float(np.max(np.abs(ls - ld)))  # same token stream when N = 1
    return CheckResult("n1_cross_backend_logits", worst <= 1e-12, worst, 1e-12,
                       "single-rollout groups produce identical logits in both backends")


def check_layer_finite_diff(seed: int = 0) -> CheckResult:
    from .layer import model_loss

    config = ModelConfig(num_layers=1, dim=8, heads=2, kv_heads=1, head_dim=4, ffn_dim=12, vocab=13)
    rng = np.random.default_rng(seed)
    prompt = [int(t) for t in rng.integers(0, config.vocab, 3)]
    group = RolloutGroup(
        "fd", prompt,
        [RolloutResponse([int(t) for t in rng.integers(0, config.vocab, r)], float(rng.normal()))
         for r in (2, 3)],
    )
    batch = pack_dualkv([group])
    params = init_params(config, seed + 1)
    grads, _ = model_bwd(config, params, batch, "dualkv")
    step = 1e-5
    worst = 0.0
    targets = [
        (params.embedding, grads.embedding),
        (params.layers[0].w_q, grads.layers[0].w_q),
        (params.layers[0].w_k, grads.layers[0].w_k),
        (params.layers[0].w_v, grads.layers[0].w_v),
        (params.layers[0].w_o, grads.layers[0].w_o),
        (params.layers[0].gain1, grads.layers[0].gain1),
        (params.layers[0].gain2, grads.layers[0].gain2),
        (params.layers[0].w_gate, grads.layers[0].w_gate),
        (params.layers[0].w_up, grads.layers[0].w_up),
        (params.layers[0].w_down, grads.layers[0].w_down),
        (params.final_gain, grads.final_gain),
        (params.w_head, grads.w_head),
    ]
    for arr, analytic in targets:
        flat = arr.reshape(-1)
        fd = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = model_loss(config, params, batch, "dualkv")
            flat[j] = orig - step
            down = model_loss(config, params, batch, "dualkv")
            flat[j] = orig
            fd[j] = (up - down) / (2 * step)
        worst = max(worst, float(np.max(np.abs(fd - analytic.reshape(-1)))))
    return CheckResult("layer_finite_diff", worst <= 1e-6, worst, 1e-6,
                       "all parameter gradients vs central differences, single layer")


# --- pipeline suite ----------------------------------------------------------


_PIPE_CFG = ModelConfig(num_layers=2, dim=12, heads=2, kv_heads=1, head_dim=4, ffn_dim=16, vocab=17)


def _random_samples(seed: int, groups: int = 3):
    rng = np.random.default_rng(seed)
    samples = []
    for gi in range(groups):
        p = int(rng.integers(2, 6))
        prompt = [int(t) for t in rng.integers(0, _PIPE_CFG.vocab, p)]
        for _ in range(int(rng.integers(2, 4))):
            samples.append(
                RolloutSample(
                    f"p{gi}", prompt,
                    [int(t) for t in rng.integers(0, _PIPE_CFG.vocab, int(rng.integers(1, 5)))],
                    float(rng.normal()),
                )
            )
    return samples


def check_pipeline_theorem(seed: int = 0, instances: int = 10) -> CheckResult:
    worst = 0.0
    for k in range(instances):
        samples = _random_samples(seed * 101 + k)
        params = init_params(_PIPE_CFG, seed + k)
        default_plan = simulate_balance_batch(samples, seed=None, num_ranks=2, mb_size=3)
        grouped_plan = make_grouped_plan(samples, num_ranks=1, mb_capacity=8)
        g_def = aggregate_step_gradient(samples, default_plan, _PIPE_CFG, params)
        g_dk = aggregate_step_gradient(samples, grouped_plan, _PIPE_CFG, params)
        worst = max(worst, float(np.max(np.abs(g_def - g_dk))))
    return CheckResult("pipeline_no_systematic_bias", worst <= 1e-9, worst, 1e-9,
                       f"default/replicated vs grouped/shared aggregate gradients, {instances} instances")


def check_plan_permutation_invariance(seed: int = 0) -> CheckResult:
    worst = 0.0
    for k in range(4):
        samples = _random_samples(seed * 13 + k)
        params = init_params(_PIPE_CFG, seed + 3 * k)
        plans = [
            simulate_balance_batch(samples, seed=None, num_ranks=1, mb_size=2),
            simulate_balance_batch(samples, seed=123, num_ranks=3, mb_size=4),
            simulate_balance_batch(samples, seed=7, num_ranks=2, mb_size=1),
        ]
        vecs = [aggregate_step_gradient(samples, plan, _PIPE_CFG, params) for plan in plans]
        for a in range(len(vecs)):
            for b in range(a + 1, len(vecs)):
                worst = max(worst, float(np.max(np.abs(vecs[a] - vecs[b]))))
        dk_plans = [
            make_grouped_plan(samples, num_ranks=1, mb_capacity=8),
            make_grouped_plan(samples, num_ranks=2, mb_capacity=3),
        ]
        dk_vecs = [aggregate_step_gradient(samples, plan, _PIPE_CFG, params) for plan in dk_plans]
        worst = max(worst, float(np.max(np.abs(dk_vecs[0] - dk_vecs[1]))))
    return CheckResult("plan_permutation_invariance", worst <= 1e-12, worst, 1e-12,
                       "same-mode plans over the same multiset agree")


# --- precision suite ---------------------------------------------------------


def check_single_cast_ulp(seed: int = 0, cases: int = 15) -> CheckResult:
    """fp32-scratch accumulation must reproduce single-cast precision.

    Per bf16 case, the kernel's per-sequence context-gradient contributions
    are summed two ways: through the f32 scratch with one final cast (the
    shipped path, equal to dualkv_bwd's dK_c/dV_c), and in f64 with one
    final cast (the accumulation oracle).  The two must agree within one
    bf16 ulp per element -- the scratch adds no compounded rounding.  The
    end-to-end gradient fidelity of the bf16 kernel against the dense f64
    oracle is a separate, allclose-grade check; saved bf16 activations
    bound it away from ulp scale regardless of accumulation strategy.
    """
    rng = np.random.default_rng(seed)
    worst_ulp = 0.0
    for _ in range(cases):
        cfg = _draw_config(rng)
        cfg["n"] = max(cfg["n"], 2)
        cfg["p"] = max(cfg["p"], 4)
        cfg["r_list"] = [max(r, 1) for r in cfg["r_list"]]
        inp, d_out = _build_inputs(cfg, rng, Precision.BF16EMU)
        out, lse = dualkv_fwd(inp)
        _, dkc, dvc, _, _ = dualkv_bwd(inp, out, lse, d_out)

        contribs = context_grad_contributions(inp, out, lse, d_out)
        dkc_ref = sum(c[0].astype(np.float64) for c in contribs)
        dvc_ref = sum(c[1].astype(np.float64) for c in contribs)
        for got, ref in ((dkc, dkc_ref), (dvc, dvc_ref)):
            target = bf16_round(ref.astype(np.float32)).astype(np.float64)
            diff = np.abs(got.data.astype(np.float64) - target)
            ulp = bf16_ulp(target)
            if diff.size:
                worst_ulp = max(worst_ulp, float((diff / ulp).max()))
    return CheckResult("single_cast_within_1_bf16_ulp", worst_ulp <= 1.0, worst_ulp, 1.0,
                       f"f32 scratch + one cast vs f64 sum + one cast, {cases} bf16 cases")


def check_naive_strictly_worse(seed: int = 0, trials: int = 10000, n: int = 32) -> CheckResult:
    """Monte-Carlo: repeated-bf16 folding vs fp32-accumulate-then-cast.

    Contributions are zero-mean across the group with a small net sum --
    the cancellation profile of group-normalized advantage weighting, where
    accumulation precision matters most.  The fp32 path rounds once onto
    the bf16 grid and can never be farther from the exact sum; the naive
    fold compounds n-1 extra roundings and must land strictly farther in
    at least 99% of elements.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 1.0, size=(trials, n))
    contributions = x - x.mean(axis=1, keepdims=True) + rng.normal(0.0, 0.02, (trials, 1)) / n
    exact = contributions.sum(axis=1)

    acc32 = np.zeros(trials, dtype=np.float32)
    for j in range(n):
        acc32 = acc32 + contributions[:, j].astype(np.float32)
    fp32_cast = np.asarray(bf16_round(acc32), dtype=np.float64)

    naive = np.zeros(trials, dtype=np.float32)
    for j in range(n):
        naive = np.asarray(
            bf16_round(naive + bf16_round(contributions[:, j].astype(np.float32))),
            dtype=np.float32,
        )
    naive64 = naive.astype(np.float64)

    err_fp32 = np.abs(fp32_cast - exact)
    err_naive = np.abs(naive64 - exact)
    frac_not_worse = float(np.mean(err_fp32 <= err_naive))
    frac_strict = float(np.mean(err_fp32 < err_naive))
    passed = frac_strict >= 0.99 and frac_not_worse >= 0.99
    return CheckResult(
        "naive_bf16_fold_strictly_worse", passed, frac_strict, 0.99,
        f"fp32-then-cast strictly better in {frac_strict:.2%}, never worse in "
        f"{frac_not_worse:.2%} of {trials} trials at N={n}",
    )


def check_stagnation_foil(seed: int = 0) -> CheckResult:
    """acc=1.0 plus 256 copies of 2^-9: the naive fold absorbs nothing."""
    del seed  # fully deterministic
    contributions = [np.array([1.0], dtype=np.float32)] + [
        np.array([2.0**-9], dtype=np.float32) for _ in range(256)
    ]
    exact = 1.0 + 256 * 2.0**-9  # = 1.5
    naive = float(bf16_naive_accumulate(contributions).data[0])

    scratch = ContextGradScratch.zeros(1, 1, 1)
    for c in contributions:
        scratch.add(c.reshape(1, 1, 1), np.zeros((1, 1, 1), dtype=np.float32))
    fp32_cast = float(convert_dkv_context(scratch, Precision.BF16EMU)[0].data[0, 0, 0])

    passed = naive < exact and fp32_cast == exact
    return CheckResult("bf16_stagnation_foil", passed, naive, exact,
                       f"naive fold keeps {naive}, fp32-then-cast keeps {fp32_cast}, exact {exact}")


def check_convert_identity(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    scratch = ContextGradScratch.zeros(3, 2, 4)
    scratch.add(rng.normal(size=(3, 2, 4)).astype(np.float32),
                rng.normal(size=(3, 2, 4)).astype(np.float32))
    dk32, dv32 = convert_dkv_context(scratch, Precision.F32)
    ok = np.array_equal(dk32.data, scratch.dk_acc) and np.array_equal(dv32.data, scratch.dv_acc)
    dkb, _ = convert_dkv_context(scratch, Precision.BF16EMU)
    ok &= np.array_equal(dkb.data, np.asarray(bf16_round(scratch.dk_acc)))
    return CheckResult("convert_cast_semantics", bool(ok), 0.0 if ok else 1.0, 0.0,
                       "f32 output bit-identical; bf16 output single-rounded")


# --- suite registry ----------------------------------------------------------

SUITES = {
    "kernel": [
        check_forward_exactness_f64,
        check_forward_bf16_allclose,
        check_backward_exactness_f64,
        check_backward_finite_diff,
        check_p0_degeneracy,
        check_tile_independence,
        check_order_independence,
        check_mask_shift,
    ],
    "layer": [
        check_gradient_equivalence,
        check_prompt_invariance,
        check_n1_degeneracy,
        check_layer_finite_diff,
    ],
    "pipeline": [
        check_pipeline_theorem,
        check_plan_permutation_invariance,
    ],
    "precision": [
        check_single_cast_ulp,
        check_naive_strictly_worse,
        check_stagnation_foil,
        check_convert_identity,
    ],
}


def suite_names() -> List[str]:
    return list(SUITES) + ["all"]


def run_suite(name: str, seed: int = 0, cases: int = 50) -> List[CheckResult]:
    """Run one named suite (or ``all``) and return its check results."""
    if name == "all":
        results = []
        for suite in SUITES:
            results.extend(run_suite(suite, seed, cases))
        return results
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}")
    results = []
    for check in SUITES[name]:
        if check is check_forward_exactness_f64 or check is check_forward_bf16_allclose \
                or check is check_backward_exactness_f64:
            results.append(check(seed, cases))
        else:
            results.append(check(seed))
    return results
