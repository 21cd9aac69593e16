import numpy as np
import pytest

from invpt import tensor as tn
from invpt.encoder import ConfigError, Encoder, EncoderConfig, TapAligner, align_tap
from invpt.nn import ConvBNReLU, conv_bn_relu
from invpt.prelim import PrelimDecoders, TaskSpec
from invpt.tensor import DimensionError, Rng, Tensor
from invpt.verify import gradcheck


@pytest.fixture(scope="module")
def encoder():
    return Encoder(EncoderConfig(), (8, 8), Rng(0))


def image(n=1, size=128, seed=0):
    return Tensor(np.random.default_rng(seed).random((n, 3, size, size)).astype(np.float32))


def test_patch_embed_token_count(encoder):
    assert encoder.patch_embed(image()).shape == (1, 64, 64)


def test_patch_embed_zero_gives_pos_embed():
    enc = Encoder(EncoderConfig(), (8, 8), Rng(1))
    enc.patch_weight.data[...] = 0
    tokens = enc.patch_embed(Tensor(np.zeros((2, 3, 128, 128), np.float32)))
    np.testing.assert_array_equal(tokens.data, np.broadcast_to(enc.pos_embed.data, (2, 64, 64)))


def test_encoder_deterministic(encoder):
    with tn.no_grad():
        a, b = encoder(image()), encoder(image())
    np.testing.assert_array_equal(a.final.data, b.final.data)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.taps, b.taps))


def test_patch_size_must_divide(encoder):
    with pytest.raises(DimensionError):
        encoder.patch_embed(image(size=120))


def test_depth_zero_rejected():
    with pytest.raises(ConfigError):
        Encoder(EncoderConfig(depth=0), (8, 8), Rng(0))


def test_bad_taps_rejected():
    with pytest.raises(ConfigError):
        EncoderConfig(depth=6, tap_layers=(4, 2, 6)).validate()


def test_encoder_output_shape_and_attention(encoder):
    with tn.no_grad():
        out = encoder(image(2), record_attention=True)
    assert out.final.shape == (2, 64, 8, 8)
    assert len(out.taps) == 3 and out.taps[0].shape == (2, 64, 64)
    assert len(out.attention) == encoder.cfg.depth
    for attn in out.attention:
        assert np.all(np.abs(attn.sum(-1) - 1) < 1e-6)


@pytest.mark.parametrize("stage,size", [(0, 8), (1, 16), (2, 32)])
def test_align_tap_extent(stage, size):
    aligner = TapAligner(16, [0, 1, 2], Rng(0))
    tap = Tensor(np.random.default_rng(0).standard_normal((1, 16, 8, 8)).astype(np.float32))
    assert align_tap(tap, stage, aligner).shape == (1, 16, size, size)


def test_align_tap_missing_stage():
    aligner = TapAligner(16, [0], Rng(0))
    with pytest.raises(ConfigError):
        align_tap(Tensor(np.zeros((1, 16, 8, 8), np.float32)), 2, aligner)


# ---------------------------------------------------------------- conv-bn-relu


def test_conv_bn_relu_zero():
    blk = ConvBNReLU(4, 6, Rng(0))
    blk.conv.weight.data[...] = 0
    blk.bn.beta.data[...] = 0
    x = Tensor(np.random.default_rng(0).standard_normal((2, 4, 5, 5)).astype(np.float32))
    np.testing.assert_array_equal(conv_bn_relu(x, blk).data, 0)


def test_conv_bn_relu_extent():
    blk = ConvBNReLU(4, 6, Rng(0))
    x = Tensor(np.random.default_rng(0).standard_normal((2, 4, 7, 5)).astype(np.float32))
    assert conv_bn_relu(x, blk).shape == (2, 6, 7, 5)


def test_conv_bn_relu_gradcheck():
    with tn.precision(np.float64):
        blk = ConvBNReLU(3, 4, Rng(2))
        x = Tensor(Rng(3).normal((2, 3, 4, 4)))
        r = Tensor(Rng(4).normal((2, 4, 4, 4)))
    tensors = {"x": x, "w": blk.conv.weight, "gamma": blk.bn.gamma, "beta": blk.bn.beta}
    res = gradcheck(lambda: tn.sum_(tn.mul(blk(x), r)), tensors, order=4)
    assert res.passed, res.to_text()


# ---------------------------------------------------------------- preliminary decoders


TASKS = [TaskSpec("semseg", "discrete", 5), TaskSpec("depth", "continuous", 1), TaskSpec("boundary", "discrete", 2)]


@pytest.fixture
def prelim():
    return PrelimDecoders(TASKS, 16, 64, 64, Rng(0))


def feat(n=2, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal((n, 16, 8, 8)).astype(np.float32))


def test_prelim_shapes(prelim):
    fd, p = prelim.decode_task(feat(), "semseg")
    assert fd.shape == (2, 64, 8, 8)
    assert p.shape == (2, 5, 8, 8)


def test_prelim_task_isolation(prelim):
    prelim.eval()
    x = feat()
    with tn.no_grad():
        before = prelim.decode_task(x, "depth")[1].data.copy()
        prelim.heads["semseg"].block1.conv.weight.data += 1.0
        after = prelim.decode_task(x, "depth")[1].data
    np.testing.assert_array_equal(before, after)


def test_prelim_unknown_task(prelim):
    with pytest.raises(KeyError):
        prelim.decode_task(feat(), "normals")


def test_assemble_shape(prelim):
    with tn.no_grad():
        preds, seq = prelim(feat(1))
    assert seq.data.shape == (1, 192, 64)
    assert set(preds) == {"semseg", "depth", "boundary"}


def test_assemble_single_task():
    one = PrelimDecoders(TASKS[:1], 16, 8, 8, Rng(0))
    with tn.no_grad():
        _, seq = one(feat(1))
    assert seq.data.shape == (1, 64, 8) and seq.T == 1


def test_assemble_roundtrip(prelim):
    with tn.no_grad():
        outs = {t.name: prelim.decode_task(feat(1), t.name) for t in TASKS}
        seq = prelim.assemble(outs)
        for t, block in zip(TASKS, seq.maps()):
            fd, p = outs[t.name]
            ref = prelim.heads[t.name].fuse(tn.concat([fd, p], axis=1))
            np.testing.assert_array_equal(block.data, ref.data)


def test_assemble_missing_task(prelim):
    with tn.no_grad():
        outs = {"semseg": prelim.decode_task(feat(1), "semseg")}
    with pytest.raises(KeyError):
        prelim.assemble(outs)


def test_task_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec("x", "discrete", 1).validate()
    with pytest.raises(ConfigError):
        TaskSpec("x", "ordinal", 3).validate()
    assert TaskSpec("depth", "continuous", 1).lower_is_better
