import math

import numpy as np
import pytest

from invpt import tensor as tn
from invpt.decoder import (DecoderStage, FinalHeads, MultiTaskSeq, StageFusion, amp, attention_scores, compute_qkv,
                           efa_term, flac, plan_stages, reshape_and_up, seq_to_stack)
from invpt.encoder import ConfigError
from invpt.nn import Conv2d, ConvBNReLU, ModuleList
from invpt.prelim import TaskSpec
from invpt.tensor import DimensionError, Rng, Tensor
from invpt.verify import build_decoder_case


@pytest.fixture(autouse=True)
def fresh_tape():
    tn.reset_tape()
    with tn.no_grad():
        yield
    tn.reset_tape()


def seq(T, h, w, c, seed=0, n=1):
    data = np.random.default_rng(seed).standard_normal((n, T * h * w, c)).astype(np.float32)
    return MultiTaskSeq(Tensor(data), T, h, w)


@pytest.fixture(scope="module")
def case():
    dec, f0, taps = build_decoder_case(3, 8, 8, 64, seed=0, dtype=np.float32)
    with tn.no_grad():
        outs = dec.run_stages(MultiTaskSeq(f0, 3, 8, 8), taps)
    return dec, f0, taps, outs


def test_plan_rejects_odd_channels():
    with pytest.raises(ConfigError):
        plan_stages(2, 8, 8, 66)
    with pytest.raises(ConfigError):
        plan_stages(2, 7, 8, 64)


def test_plan_kernel_and_rows():
    plans = plan_stages(3, 8, 8, 64)
    assert [p.k_s for p in plans] == [2, 4, 8]
    assert [p.q_rows for p in plans] == [48, 192, 768]
    assert [p.kv_tokens for p in plans] == [48, 48, 48]


# ---------------------------------------------------------------- reshape & up


def test_reshape_and_up_shape():
    blocks = ModuleList(ConvBNReLU(64, 32, Rng(i)) for i in range(3))
    out = reshape_and_up(seq(3, 8, 8, 64), blocks)
    assert out.data.shape == (1, 768, 32) and (out.H, out.W) == (16, 16)


def test_reshape_and_up_constant():
    blk = ConvBNReLU(4, 4, Rng(0))
    blk.conv.weight.data[...] = 0
    blk.conv.weight.data[np.arange(4), np.arange(4), 1, 1] = 1.0  # identity centre tap
    blk.eval()
    x = MultiTaskSeq(Tensor(np.full((1, 9, 4), 0.7, np.float32)), 1, 3, 3)
    out = reshape_and_up(x, ModuleList([blk])).data.data
    np.testing.assert_allclose(out, out.flat[0])
    assert out.flat[0] > 0


def test_reshape_and_up_task_isolation():
    blocks = ModuleList(ConvBNReLU(8, 4, Rng(i)) for i in range(2))
    a = seq(2, 4, 4, 8, seed=1, n=2)
    b_data = a.data.data.copy()
    b_data[:, 16:] = 0
    b = MultiTaskSeq(Tensor(b_data), 2, 4, 4)
    oa, ob = reshape_and_up(a, blocks), reshape_and_up(b, blocks)
    np.testing.assert_array_equal(oa.data.data[:, :64], ob.data.data[:, :64])


def test_block_count_mismatch():
    with pytest.raises(DimensionError):
        reshape_and_up(seq(3, 4, 4, 8), ModuleList([ConvBNReLU(8, 8, Rng(0))]))


# ---------------------------------------------------------------- Q/K/V and scores


@pytest.mark.parametrize("s,q_rows,c", [(0, 48, 64), (1, 192, 32), (2, 768, 16)])
def test_qkv_shapes(case, s, q_rows, c):
    tr = case[0].stages[s].last_trace
    assert tr.shape("Q") == (q_rows, c)
    assert tr.shape("K") == (48, c)
    assert tr.shape("V") == (48, c)


def test_compute_qkv_rejects_wrong_extent(case):
    st = case[0].stages[1]
    with pytest.raises(DimensionError):
        compute_qkv(seq(3, 8, 8, 32), st.plan, st.q_conv, st.wq, st.wk, st.wv)


def test_scores_zero_query():
    a = attention_scores(Tensor(np.zeros((1, 6, 4))), Tensor(np.ones((1, 3, 4))), 4)
    np.testing.assert_array_equal(a.data, 0)


def test_scores_unit_vectors():
    e = np.zeros((1, 1, 4))
    e[..., 2] = 1
    a = attention_scores(Tensor(e), Tensor(e), 4)
    assert a.data.item() == pytest.approx(0.5)


# ---------------------------------------------------------------- message passing


def test_amp_alpha2_zero_inert():
    plan = plan_stages(3, 8, 8, 64)[1]
    rng = np.random.default_rng(0)
    a, prev = Tensor(rng.standard_normal((1, 192, 48))), Tensor(rng.standard_normal((1, 48, 48)))
    _, _, am = amp(a, prev, Tensor(np.array([0.7])), Tensor(np.array([0.0])), plan)
    np.testing.assert_allclose(am.data, tn.softmax_rows(tn.scale(a, 0.7)).data, atol=1e-12)


def test_amp_alpha1_zero_constant_prev():
    plan = plan_stages(3, 8, 8, 64)[1]
    a = Tensor(np.random.default_rng(1).standard_normal((1, 192, 48)))
    prev = Tensor(np.full((1, 48, 48), 2.5))
    _, msg, am = amp(a, prev, Tensor(np.array([0.0])), Tensor(np.array([1.0])), plan)
    assert msg.shape == (1, 192, 48)
    np.testing.assert_allclose(am.data, 1 / 48, atol=1e-12)


def test_amp_needs_previous_stage():
    plan = plan_stages(3, 8, 8, 64)[0]
    with pytest.raises(ConfigError):
        amp(Tensor(np.zeros((1, 48, 48))), Tensor(np.zeros((1, 48, 48))), None, None, plan)


def test_amp_column_mismatch():
    plan = plan_stages(3, 8, 8, 64)[1]
    with pytest.raises(DimensionError):
        amp(Tensor(np.zeros((1, 192, 48))), Tensor(np.zeros((1, 48, 12))), None, None, plan)


def test_message_shape_in_trace(case):
    assert case[0].stages[1].last_trace.shape("M") == (192, 48)
    assert case[0].stages[2].last_trace.shape("M") == (768, 48)


# ---------------------------------------------------------------- encoder feature aggregation


def test_efa_zero_tap():
    conv = Conv2d(4, 8, 3, Rng(0))
    out = efa_term(Tensor(np.zeros((1, 4, 16, 16), np.float32)), conv, 3)
    np.testing.assert_array_equal(out.data, 0)


def test_efa_blocks_identical_and_rows():
    conv = Conv2d(4, 32, 3, Rng(0))
    tap = Tensor(np.random.default_rng(0).standard_normal((1, 4, 16, 16)).astype(np.float32))
    out = efa_term(tap, conv, 3).data
    assert out.shape == (1, 768, 32)
    np.testing.assert_array_equal(out[:, :256], out[:, 256:512])
    np.testing.assert_array_equal(out[:, :256], out[:, 512:])


def test_efa_requires_tap(case):
    st = case[0].stages[0]
    with pytest.raises(ConfigError):
        st(seq(3, 8, 8, 64), None, None)


# ---------------------------------------------------------------- stage blocks


def test_stage_outputs(case):
    _, _, _, outs = case
    assert (outs[0].T, outs[0].H, outs[0].C) == (3, 8, 64)
    assert outs[0].data.shape == (1, 192, 64)
    assert (outs[1].T, outs[1].H, outs[1].W, outs[1].C) == (3, 16, 16, 32)
    assert outs[2].data.shape == (1, 3 * 32 * 32, 16)


def test_stage0_scores_shape(case):
    assert case[0].stages[0].last_trace.shape("A_blend") == (48, 48)


@pytest.mark.parametrize("s", [0, 1, 2])
def test_residual_identity(s):
    dec, f0, taps = build_decoder_case(3, 8, 8, 64, seed=1, dtype=np.float32)
    stage = dec.stages[s]
    stage.zero_attention_output()
    f = MultiTaskSeq(f0, 3, 8, 8)
    a_prev = None
    for st, tap in zip(dec.stages, taps):
        f, a_prev = st(f, tap, a_prev)
        if st is stage:
            break
    tr = stage.last_trace.tensors
    np.testing.assert_array_equal(tr["F_next"].data, tr["F_prime"].data)


def test_stage_rejects_wrong_input(case):
    with pytest.raises(DimensionError):
        case[0].stages[1](seq(3, 8, 8, 32), None, None)


# ---------------------------------------------------------------- fusion and heads


def test_fusion_shapes(case):
    dec, _, _, outs = case
    feats = dec.fusion(outs)
    assert len(feats) == 3
    assert all(f.shape == (1, 16, 32, 32) for f in feats)


def test_fusion_degenerate_additive():
    plans = plan_stages(2, 4, 4, 16)
    fusion = StageFusion(plans, Rng(0))
    fusion.eval()
    g0 = seq(2, 4, 4, 16, seed=3)
    g1 = MultiTaskSeq(Tensor(np.zeros((1, 2 * 64, 8), np.float32)), 2, 8, 8)
    g2 = MultiTaskSeq(Tensor(np.zeros((1, 2 * 256, 4), np.float32)), 2, 16, 16)
    feats = fusion([g0, g1, g2])
    p1_bias = fusion.proj[1].bias.data[None, :, None, None]
    up0 = fusion.proj[0](tn.bilinear_upsample(seq_to_stack(g0), 4))
    ref = fusion.block(tn.add(tn.add(up0, Tensor(np.zeros((2, 4, 16, 16), np.float32))), Tensor(p1_bias)))
    np.testing.assert_allclose(np.concatenate([f.data for f in feats]), ref.data, atol=1e-6)


def test_final_heads_shapes():
    tasks = [TaskSpec("semseg", "discrete", 5), TaskSpec("depth", "continuous", 1)]
    heads = FinalHeads(tasks, 16, Rng(0))
    feats = [Tensor(np.random.default_rng(i).standard_normal((1, 16, 32, 32)).astype(np.float32)) for i in range(2)]
    out = heads(feats, (128, 128))
    assert out["semseg"].shape == (1, 5, 128, 128)
    assert out["depth"].shape == (1, 1, 128, 128)
    again = FinalHeads(tasks, 16, Rng(0))(feats, (128, 128))
    np.testing.assert_array_equal(out["semseg"].data, again["semseg"].data)


def test_final_heads_bad_extent():
    heads = FinalHeads([TaskSpec("depth", "continuous", 1)], 4, Rng(0))
    with pytest.raises(DimensionError):
        heads([Tensor(np.zeros((1, 4, 32, 32), np.float32))], (100, 100))


def test_flac_order():
    maps = [Tensor(np.full((1, 2, 2, 3), float(t), np.float32)) for t in range(3)]
    s = flac(maps)
    assert s.data.shape == (1, 18, 2)
    np.testing.assert_array_equal(s.data.data[0, :6], 0)
    np.testing.assert_array_equal(s.data.data[0, 12:], 2)


def test_stage_without_amp_has_no_alphas():
    st = DecoderStage(plan_stages(2, 4, 4, 16)[1], 4, Rng(0), use_amp=False)
    assert not any("alpha" in n for n, _ in st.named_parameters())
    assert math.isclose(st.plan.k_s, 4)
