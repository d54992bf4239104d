import numpy as np
import pytest

from dualkv.fa2 import VarlenBatch, fa2_varlen_bwd, fa2_varlen_fwd
from dualkv.refattn import DenseAttentionCase, ref_attention_bwd, ref_attention_fwd
from dualkv.tensor import Precision, Tensor, bf16_round, max_abs_diff


def _batch(rng, lengths, h=2, h_k=1, d=4, tile=4, precision=Precision.F64):
    total = int(sum(lengths))
    cu = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    return VarlenBatch(
        Tensor(rng.normal(size=(total, h, d)), precision),
        Tensor(rng.normal(size=(total, h_k, d)), precision),
        Tensor(rng.normal(size=(total, h_k, d)), precision),
        cu,
        tile_size=tile,
    )


def _per_sequence_oracle(batch):
    for i in range(batch.num_sequences):
        s, e = int(batch.cu_seqlens[i]), int(batch.cu_seqlens[i + 1])
        if s == e:
            continue
        case = DenseAttentionCase(
            Tensor(batch.q.data[s:e].astype(np.float64)),
            Tensor(batch.k.data[s:e].astype(np.float64)),
            Tensor(batch.v.data[s:e].astype(np.float64)),
            softmax_scale=batch.softmax_scale,
        )
        yield s, e, case


class TestForward:
    def test_single_tile_matches_dense_softmax(self):
        # S < B_N: one tile, no online rescaling happens
        rng = np.random.default_rng(0)
        batch = _batch(rng, [5], tile=8)
        out, lse = fa2_varlen_fwd(batch)
        q, k, v = batch.q.as_f64(), batch.k.as_f64(), batch.v.as_f64()
        scores = np.einsum("rhd,jhd->hrj", q, np.repeat(k, 2, axis=1)) * batch.softmax_scale
        vis = np.arange(5)[None, :] <= np.arange(5)[:, None]
        scores = np.where(vis[None], scores, -np.inf)
        m = scores.max(axis=2, keepdims=True)
        p = np.exp(scores - m)
        dense = np.einsum("hrj,jhd->rhd", p / p.sum(axis=2, keepdims=True), np.repeat(v, 2, axis=1))
        assert max_abs_diff(out.data, dense) < 1e-14

    def test_two_tiles_match_oracle(self):
        rng = np.random.default_rng(1)
        batch = _batch(rng, [8], tile=4)  # S = 2 * B_N
        out, _ = fa2_varlen_fwd(batch)
        for s, e, case in _per_sequence_oracle(batch):
            o_ref, _ = ref_attention_fwd(case)
            assert max_abs_diff(out.data[s:e], o_ref) < 1e-12

    def test_empty_sequence_contributes_nothing(self):
        rng = np.random.default_rng(2)
        batch = _batch(rng, [5, 0, 7], h=2, h_k=2, d=3, tile=4)
        out, _ = fa2_varlen_fwd(batch)
        for s, e, case in _per_sequence_oracle(batch):
            o_ref, _ = ref_attention_fwd(case)
            assert max_abs_diff(out.data[s:e], o_ref) < 1e-12

    def test_lse_reconstructs_output(self):
        rng = np.random.default_rng(3)
        batch = _batch(rng, [9], h=2, h_k=1, d=4, tile=4)
        out, lse = fa2_varlen_fwd(batch)
        q, k, v = batch.q.as_f64(), batch.k.as_f64(), batch.v.as_f64()
        k2, v2 = np.repeat(k, 2, axis=1), np.repeat(v, 2, axis=1)
        scores = np.einsum("rhd,jhd->hrj", q, k2) * batch.softmax_scale
        vis = np.arange(9)[None, :] <= np.arange(9)[:, None]
        weights = np.where(vis[None], np.exp(scores - lse.as_f64()[:, :, None]), 0.0)
        recon = np.einsum("hrj,jhd->rhd", weights, v2)
        assert max_abs_diff(out.data, recon) < 1e-12

    def test_malformed_cu_seqlens(self):
        rng = np.random.default_rng(4)
        q = Tensor(rng.normal(size=(6, 2, 4)))
        k = Tensor(rng.normal(size=(6, 1, 4)))
        v = Tensor(rng.normal(size=(6, 1, 4)))
        with pytest.raises(ValueError):
            VarlenBatch(q, k, v, np.array([0, 4]))  # does not reach T
        with pytest.raises(ValueError):
            VarlenBatch(q, k, v, np.array([0, 5, 3, 6]))  # decreasing
        with pytest.raises(ValueError):
            VarlenBatch(q, k, v, np.array([1, 6]))  # does not start at 0

    def test_tile_size_independence(self):
        worst = 0.0
        for tile in [1, 2, 4, 8, 16]:
            rng = np.random.default_rng(5)
            batch = _batch(rng, [7, 9], tile=tile, precision=Precision.F32)
            out, _ = fa2_varlen_fwd(batch)
            if tile == 1:
                base = out.data.astype(np.float64)
            else:
                worst = max(worst, max_abs_diff(out.data, base))
        assert worst <= 1e-5

    def test_sequence_independence_bitwise(self):
        rng = np.random.default_rng(6)
        a = _batch(rng, [5, 3], tile=4)
        rng2 = np.random.default_rng(7)
        b = _batch(rng2, [4], tile=4)
        out_a, lse_a = fa2_varlen_fwd(a)
        out_b, lse_b = fa2_varlen_fwd(b)
        merged = VarlenBatch(
            Tensor(np.concatenate([a.q.data, b.q.data])),
            Tensor(np.concatenate([a.k.data, b.k.data])),
            Tensor(np.concatenate([a.v.data, b.v.data])),
            np.array([0, 5, 8, 12]),
            tile_size=4,
        )
        out_m, lse_m = fa2_varlen_fwd(merged)
        assert np.array_equal(out_m.data, np.concatenate([out_a.data, out_b.data]))
        assert np.array_equal(lse_m.data, np.concatenate([lse_a.data, lse_b.data], axis=1))


class TestBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(8)
        batch = _batch(rng, [6, 9], h=4, h_k=2, d=8, tile=4)
        out, lse = fa2_varlen_fwd(batch)
        dq, dk, dv = fa2_varlen_bwd(batch, out, lse, Tensor(np.zeros_like(out.data)))
        assert not dq.data.any() and not dk.data.any() and not dv.data.any()

    def test_matches_oracle_f64(self):
        rng = np.random.default_rng(9)
        batch = _batch(rng, [6, 9], h=4, h_k=2, d=8, tile=4)
        out, lse = fa2_varlen_fwd(batch)
        d_out = Tensor(rng.normal(size=out.shape))
        dq, dk, dv = fa2_varlen_bwd(batch, out, lse, d_out)
        for s, e, case in _per_sequence_oracle(batch):
            o_ref, lse_ref = ref_attention_fwd(case)
            dq_r, dk_r, dv_r = ref_attention_bwd(case, o_ref, lse_ref, Tensor(d_out.data[s:e]))
            assert max_abs_diff(dq.data[s:e], dq_r) < 1e-10
            assert max_abs_diff(dk.data[s:e], dk_r) < 1e-10
            assert max_abs_diff(dv.data[s:e], dv_r) < 1e-10

    def test_bf16_matches_oracle_cast_once(self):
        # same case, bf16 storage / f32 compute: gradients land on the same
        # bf16 grid points as the f64 oracle rounded once
        rng = np.random.default_rng(10)
        batch = _batch(rng, [6, 9], h=4, h_k=2, d=8, tile=4, precision=Precision.BF16EMU)
        out, lse = fa2_varlen_fwd(batch)
        d_out = Tensor(rng.normal(size=out.shape), Precision.BF16EMU)
        dq, dk, dv = fa2_varlen_bwd(batch, out, lse, d_out)
        for s, e, case in _per_sequence_oracle(batch):
            o_ref, lse_ref = ref_attention_fwd(case)
            dq_r, dk_r, dv_r = ref_attention_bwd(
                case, o_ref, lse_ref, Tensor(d_out.data[s:e].astype(np.float64))
            )
            for got, ref in ((dq, dq_r), (dk, dk_r), (dv, dv_r)):
                target = np.asarray(bf16_round(ref.data.astype(np.float32)), dtype=np.float64)
                got_rows = got.data[s:e].astype(np.float64)
                assert np.all(np.abs(got_rows - target) <= 1e-3 + 1e-3 * np.abs(target))

    def test_shape_mismatch_raises(self):
        rng = np.random.default_rng(11)
        batch = _batch(rng, [5])
        out, lse = fa2_varlen_fwd(batch)
        with pytest.raises(ValueError):
            fa2_varlen_bwd(batch, out, lse, Tensor(np.zeros((4, 2, 4))))
