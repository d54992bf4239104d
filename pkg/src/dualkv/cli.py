"""Command-line surface: verification suites, analytic reports, wall-clock
micro-benchmarks, and rollout packing.

Exit codes: 0 all checks/operations succeeded, 1 a check or input-contract
failure, 2 usage error.  Every command is deterministic given --seed
(timings excluded).  ``--format records`` emits one self-describing JSON
object per result line instead of the human tables.

Rollout files are newline-delimited JSON records, one per response:

    {"prompt_id": "q1", "prompt_tokens": [1,2], "response_tokens": [3], "advantage": 0.5}

Records sharing a prompt_id must carry identical prompt_tokens.  Packing
manifests are also newline-delimited JSON, one micro-batch per line.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Dict, List, Optional

import numpy as np

from . import bench as bench_mod
from . import verify as verify_mod
from .costmodel import (
    MODE_DUALKV,
    MODE_STANDARD,
    SPEEDUP_FORMULA_NOTE,
    Scenario,
    build_cost_report,
)
from .packing import (
    RolloutGroup,
    RolloutResponse,
    compute_rho,
    pack_dualkv,
    pack_standard,
    token_reduction_ratio,
)

__all__ = ["main"]

DIM_PRESETS = {
    # H, H_k, d, D, d_ff, L
    "qwen3-8b": dict(heads=32, kv_heads=8, head_dim=128, dim=4096, ffn_dim=12288, layers=36),
    "tiny": dict(heads=2, kv_heads=1, head_dim=16, dim=64, ffn_dim=128, layers=2),
}


def _emit(records: List[Dict], fmt: str, table_lines: List[str]) -> None:
    if fmt == "records":
        for rec in records:
            print(json.dumps(rec))
    else:
        for line in table_lines:
            print(line)


# --- verify ------------------------------------------------------------------


def cmd_verify(args) -> int:
    results = verify_mod.run_suite(args.suite, seed=args.seed, cases=args.cases)
    records, lines = [], []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(
            f"{status} {r.name}: max_err={r.observed:.3e} bound={r.bound:.3e}  [{r.detail}]"
        )
        records.append(
            dict(kind="check", name=r.name, passed=r.passed, observed=r.observed,
                 bound=r.bound, detail=r.detail)
        )
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    records.append(dict(kind="summary", total=len(results), failed=failed))
    _emit(records, args.format, lines)
    return 0 if failed == 0 else 1


# --- analyze -----------------------------------------------------------------


def cmd_analyze(args) -> int:
    if args.n < 1 or args.p < 1 or args.r < 1:
        print("analyze: --n, --p, --r must be positive", file=sys.stderr)
        return 2
    dims = DIM_PRESETS[args.dims]
    scn = Scenario(
        n=args.n, p=args.p, r=args.r, mb=args.mb,
        dim=dims["dim"], heads=dims["heads"], kv_heads=dims["kv_heads"],
        head_dim=dims["head_dim"], ffn_dim=dims["ffn_dim"], layers=dims["layers"],
    )
    rep = build_cost_report(scn)
    rho = float(rep.rho)
    mb = 1e6
    lines = [
        f"configuration: N={args.n} P={args.p} R={args.r} mb={scn.mb} dims={args.dims}",
        f"tokens: standard={rep.t_std} shared={rep.t_dk} saved={rep.t_std - rep.t_dk}",
        f"token reduction ratio rho = {rho:.4f} (~{rho:.1f}x, exact {rep.rho})",
        f"attention speedup: formula={rep.speedup_attn:.2f}x "
        f"exact-pair-ratio={rep.speedup_attn_exact_pairs:.2f}x",
        f"  {SPEEDUP_FORMULA_NOTE}",
        f"attention FLOPs: standard={rep.attn_flops_std:.3e} shared={rep.attn_flops_dk:.3e}",
        "kernel memory saved per layer: "
        f"kv={int(rep.kv_mem_saved / mb)} MB q={int(rep.q_mem_saved / mb)} MB "
        f"lse={int(rep.lse_mem_saved / mb)} MB total={int(rep.total_kernel_mem_saved_per_layer / mb)} MB",
        f"peak-memory law (fitted defaults, mb={scn.mb}): "
        f"standard={rep.mem_fa2_pred:.1f} GB shared={rep.mem_dualkv_pred:.1f} GB",
    ]
    records = [
        dict(kind="tokens", t_std=rep.t_std, t_dk=rep.t_dk),
        dict(kind="rho", value=rho, exact=str(rep.rho)),
        dict(kind="speedup_attn", formula=rep.speedup_attn,
             exact_pairs=rep.speedup_attn_exact_pairs, note=SPEEDUP_FORMULA_NOTE),
        dict(kind="attention_flops", standard=rep.attn_flops_std, dualkv=rep.attn_flops_dk),
        dict(kind="kernel_memory_saved_bytes", kv=rep.kv_mem_saved, q=rep.q_mem_saved,
             lse=rep.lse_mem_saved, total=rep.total_kernel_mem_saved_per_layer),
        dict(kind="memory_law_gb", standard=rep.mem_fa2_pred, dualkv=rep.mem_dualkv_pred,
             mb=scn.mb),
    ]
    _emit(records, args.format, lines)
    return 0


# --- bench -------------------------------------------------------------------


def cmd_bench(args) -> int:
    cfg = bench_mod.BenchConfig(
        n=args.n, p=args.p, r=args.r, tile=args.bn, heads=args.heads,
        kv_heads=args.kvheads, head_dim=args.dim, reps=args.reps,
        warmup=args.warmup, precision=args.precision, seed=args.seed,
    )
    try:
        rep = bench_mod.run_bench(cfg)
    except MemoryError as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 1
    lines = [
        f"configuration: N={cfg.n} P={cfg.p} R={cfg.r} B_N={cfg.tile} H={cfg.heads} "
        f"H_k={cfg.kv_heads} d={cfg.head_dim} precision={cfg.precision} "
        f"reps={cfg.reps} (+{cfg.warmup} warmup)",
        f"standard packing : fwd={rep.std_fwd_ms:9.1f} ms  bwd={rep.std_bwd_ms:9.1f} ms  "
        f"f+b={rep.std_total_ms:9.1f} ms",
        f"shared prompt    : fwd={rep.dk_fwd_ms:9.1f} ms  bwd={rep.dk_bwd_ms:9.1f} ms  "
        f"f+b={rep.dk_total_ms:9.1f} ms",
        f"measured speedup : fwd={rep.speedup_fwd:.2f}x bwd={rep.speedup_bwd:.2f}x "
        f"f+b={rep.speedup_total:.2f}x",
        f"predicted        : token-ratio rho={rep.predicted_rho:.2f}x "
        f"attention-pair ratio={rep.predicted_pair_ratio:.2f}x",
        f"bwd/fwd ratio    : standard={rep.bwd_fwd_ratio_std:.2f} "
        f"shared={rep.bwd_fwd_ratio_dk:.2f} (reported, hardware-dependent)",
    ]
    records = [
        dict(kind="bench_config", **cfg.__dict__),
        dict(kind="timing_ms", std_fwd=rep.std_fwd_ms, std_bwd=rep.std_bwd_ms,
             dk_fwd=rep.dk_fwd_ms, dk_bwd=rep.dk_bwd_ms),
        dict(kind="speedup", fwd=rep.speedup_fwd, bwd=rep.speedup_bwd,
             total=rep.speedup_total),
        dict(kind="predicted", rho=rep.predicted_rho, pair_ratio=rep.predicted_pair_ratio),
        dict(kind="bwd_fwd_ratio", standard=rep.bwd_fwd_ratio_std, shared=rep.bwd_fwd_ratio_dk),
    ]
    _emit(records, args.format, lines)
    return 0


# --- pack --------------------------------------------------------------------


def read_rollouts(path: str) -> List[RolloutGroup]:
    """Parse a rollout file into groups, first-appearance order.

    Raises ValueError (naming the prompt_id) when records sharing a
    prompt_id disagree on prompt_tokens.
    """
    order: List[str] = []
    prompts: Dict[str, List[int]] = {}
    responses: Dict[str, List[RolloutResponse]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            pid = str(rec["prompt_id"])
            ptoks = [int(t) for t in rec["prompt_tokens"]]
            if pid not in prompts:
                prompts[pid] = ptoks
                responses[pid] = []
                order.append(pid)
            elif prompts[pid] != ptoks:
                raise ValueError(
                    f"prompt {pid!r}: inconsistent prompt_tokens at line {line_no}"
                )
            responses[pid].append(
                RolloutResponse([int(t) for t in rec["response_tokens"]],
                                float(rec["advantage"]))
            )
    return [RolloutGroup(pid, prompts[pid], responses[pid]) for pid in order]


def _group_chunks_dualkv(groups: List[RolloutGroup], mb: int) -> List[List[RolloutGroup]]:
    chunks: List[List[RolloutGroup]] = []
    current: List[RolloutGroup] = []
    used = 0
    for g in groups:
        if g.num_responses > mb:
            raise ValueError(
                f"prompt {g.prompt_id!r} has {g.num_responses} responses, exceeding "
                f"micro-batch capacity {mb}; its group cannot be co-located"
            )
        if current and used + g.num_responses > mb:
            chunks.append(current)
            current, used = [], 0
        current.append(g)
        used += g.num_responses
    if current:
        chunks.append(current)
    return chunks


def _sample_chunks_standard(groups: List[RolloutGroup], mb: int) -> List[List[RolloutGroup]]:
    """Flat response chunks; replicated packing has no co-location contract."""
    flat = [(g, resp) for g in groups for resp in g.responses]
    chunks = []
    for i in range(0, len(flat), mb):
        chunk = flat[i : i + mb]
        regrouped: List[RolloutGroup] = []
        for g, resp in chunk:
            if regrouped and regrouped[-1].prompt_id == g.prompt_id:
                regrouped[-1].responses.append(resp)
            else:
                regrouped.append(RolloutGroup(g.prompt_id, g.prompt_tokens, [resp]))
        chunks.append(regrouped)
    return chunks


def _manifest_record(index: int, batch, groups: List[RolloutGroup]) -> Dict:
    rec = dict(
        index=index,
        mode=batch.mode,
        total_tokens=batch.total_tokens,
        rho=float(token_reduction_ratio(groups)),
        token_ids=[int(t) for t in batch.token_ids],
        groups=[],
    )
    for g in batch.groups:
        entry = dict(prompt_id=g.prompt_id, prompt_len=g.prompt_len, advantages=g.advantages)
        if batch.mode == MODE_STANDARD:
            entry["seq_cu"] = [int(x) for x in g.seq_cu]
        else:
            entry.update(
                context_start=g.context_start, context_span=g.context_span,
                resp_start=g.resp_start, resp_cu=[int(x) for x in g.resp_cu],
            )
        rec["groups"].append(entry)
    return rec


def cmd_pack(args) -> int:
    try:
        groups = read_rollouts(args.input)
        if args.mode == MODE_DUALKV:
            chunks = _group_chunks_dualkv(groups, args.mb)
            batches = [pack_dualkv(chunk) for chunk in chunks]
        else:
            chunks = _sample_chunks_standard(groups, args.mb)
            batches = [pack_standard(chunk) for chunk in chunks]
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"pack: {exc}", file=sys.stderr)
        return 1

    with open(args.out, "w", encoding="utf-8") as fh:
        for i, (batch, chunk) in enumerate(zip(batches, chunks)):
            fh.write(json.dumps(_manifest_record(i, batch, chunk)) + "\n")

    records, lines = [], []
    for i, (batch, chunk) in enumerate(zip(batches, chunks)):
        rho = float(token_reduction_ratio(chunk))
        lines.append(
            f"micro-batch {i}: groups={len(batch.groups)} tokens={batch.total_tokens} "
            f"rho={rho:.3f}"
        )
        records.append(dict(kind="micro_batch", index=i, groups=len(batch.groups),
                            tokens=batch.total_tokens, rho=rho))
    lines.append(f"wrote {len(batches)} manifests to {args.out}")
    records.append(dict(kind="summary", manifests=len(batches), out=args.out))
    _emit(records, args.format, lines)
    return 0


# --- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualkv",
        description="Shared-prompt two-region attention: verification, analysis, "
        "benchmarks, and packing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_verify = sub.add_parser("verify", help="run verification suites")
    p_verify.add_argument("--suite", choices=verify_mod.suite_names(), required=True)
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--cases", type=int, default=50)
    p_verify.add_argument("--format", choices=["table", "records"], default="table")
    p_verify.set_defaults(func=cmd_verify)

    p_analyze = sub.add_parser("analyze", help="analytic token/FLOP/memory report")
    p_analyze.add_argument("--n", type=int, required=True)
    p_analyze.add_argument("--p", type=int, required=True)
    p_analyze.add_argument("--r", type=int, required=True)
    p_analyze.add_argument("--mb", type=int, default=None)
    p_analyze.add_argument("--dims", choices=sorted(DIM_PRESETS), default="qwen3-8b")
    p_analyze.add_argument("--format", choices=["table", "records"], default="table")
    p_analyze.set_defaults(func=cmd_analyze)

    p_bench = sub.add_parser("bench", help="CPU wall-clock micro-benchmark")
    p_bench.add_argument("--n", type=int, default=28)
    p_bench.add_argument("--p", type=int, default=4096)
    p_bench.add_argument("--r", type=int, default=2048)
    p_bench.add_argument("--bn", type=int, default=512)
    p_bench.add_argument("--heads", type=int, default=2)
    p_bench.add_argument("--kvheads", type=int, default=1)
    p_bench.add_argument("--dim", type=int, default=16)
    p_bench.add_argument("--reps", type=int, default=5)
    p_bench.add_argument("--warmup", type=int, default=2)
    p_bench.add_argument("--precision", choices=["f64", "f32", "bf16"], default="f32")
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--format", choices=["table", "records"], default="table")
    p_bench.set_defaults(func=cmd_bench)

    p_pack = sub.add_parser("pack", help="pack a rollout file into micro-batch manifests")
    p_pack.add_argument("--input", required=True)
    p_pack.add_argument("--mode", choices=[MODE_STANDARD, MODE_DUALKV], required=True)
    p_pack.add_argument("--mb", type=int, required=True)
    p_pack.add_argument("--out", required=True)
    p_pack.add_argument("--format", choices=["table", "records"], default="table")
    p_pack.set_defaults(func=cmd_pack)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
