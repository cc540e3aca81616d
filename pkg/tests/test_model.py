import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import attention_loop
from ipt_detect.model import (
    ConfigError,
    ModelConfig,
    MultiScaleNet,
    ResidualBlock,
    Rescale,
    SelfAttentionBlock,
    Stem,
    binarize,
    fuse,
    rescale,
    self_attention,
)
from ipt_detect.training import CheckpointMismatch, load_checkpoint, save_checkpoint

TINY = ModelConfig(channels_per_branch=[4, 8, 16])


def randn(*shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)


# --- stem -------------------------------------------------------------------


def test_stem_shape():
    out = Stem()(torch.rand(1, 1, 88, 259))
    assert out.shape == (1, 88, 259, 1)


def test_stem_zero_in_zero_out():
    stem = Stem()
    assert torch.all(stem(torch.zeros(2, 1, 88, 20)) == 0)
    stem.eval()
    assert torch.all(stem(torch.zeros(2, 1, 88, 20)) == 0)


def test_stem_identity_normalization_is_a_pure_reshape():
    stem = Stem().eval()
    stem.norm.eps = 0.0  # running mean 0 / var 1 with no epsilon: exact identity
    x = torch.rand(1, 1, 88, 50)
    out = stem(x)
    assert torch.equal(out[0, :, :, 0], x[0, 0])


def test_stem_rejects_wrong_bins():
    with pytest.raises(ValueError):
        Stem()(torch.rand(1, 1, 84, 10))


# --- residual block ---------------------------------------------------------


def test_residual_block_shape():
    blk = ResidualBlock(88, 16)
    assert blk(torch.rand(1, 88, 259, 1)).shape == (1, 16, 259, 1)
    wide = ResidualBlock(16, 16, width=3)
    assert wide(torch.rand(2, 16, 64, 3)).shape == (2, 16, 64, 1)


@pytest.mark.parametrize("width", [1, 3])
def test_residual_identity_when_main_path_zeroed(width):
    blk = ResidualBlock(8, 8, width=width)
    with torch.no_grad():
        for p in blk.main_path_parameters():
            p.zero_()
    x = torch.randn(2, 8, 12, width)
    for mode in (True, False):
        blk.train(mode)
        with torch.no_grad():
            np.testing.assert_allclose(blk(x).numpy(), blk.collapse(x).numpy(), atol=1e-6)


def test_residual_block_is_nonlinear():
    blk = ResidualBlock(8, 8)
    x = torch.randn(1, 8, 20, 1)
    with torch.no_grad():
        # batch statistics: the main path is scale invariant, the skip is not
        assert not torch.allclose(blk(2 * x), 2 * blk(x))
        # inference with non-trivial normalization shifts, as after training
        for bn in (blk.bn1, blk.bn2):
            bn.bias.uniform_(-0.5, 0.5)
            bn.running_mean.uniform_(-0.5, 0.5)
        blk.eval()
        assert not torch.allclose(blk(2 * x), 2 * blk(x))


def test_residual_block_width_mismatch():
    with pytest.raises(ValueError):
        ResidualBlock(8, 8, width=2)(torch.rand(1, 8, 10, 3))


# --- rescale and fuse -------------------------------------------------------


def test_rescale_down():
    assert rescale(torch.rand(1, 16, 256, 1), 0, 1).shape == (1, 16, 128, 1)


def test_rescale_up_two_levels():
    assert Rescale(64, 2, 0)(torch.rand(1, 64, 64, 1)).shape == (1, 64, 256, 1)
    assert rescale(torch.rand(1, 64, 64, 1), 2, 0).shape == (1, 64, 256, 1)


def test_rescale_channel_matching():
    assert Rescale(16, 0, 2, c_out=64)(torch.rand(1, 16, 64, 1)).shape == (1, 64, 16, 1)
    assert Rescale(64, 2, 0, c_out=16)(torch.rand(1, 64, 16, 1)).shape == (1, 16, 64, 1)


def test_maxpool_of_constant_is_constant():
    x = torch.full((1, 4, 32, 1), 0.7)
    assert torch.equal(rescale(x, 0, 2), torch.full((1, 4, 8, 1), 0.7))


def test_rescale_indivisible():
    with pytest.raises(ValueError):
        rescale(torch.rand(1, 4, 10, 1), 0, 2)


def test_fuse():
    a, b, c = (torch.rand(1, 32, 128, 1) for _ in range(3))
    assert fuse([a, b]).shape == (1, 32, 128, 2)
    assert fuse([a]) is a
    assert fuse([a, b, c]).shape == (1, 32, 128, 3)
    with pytest.raises(ValueError):
        fuse([a, torch.rand(1, 32, 64, 1)])


# --- attention --------------------------------------------------------------


def test_attention_zero_query_is_uniform():
    x, wk, wv = randn(6, 4), randn(4, 4, seed=1), randn(4, 4, seed=2)
    out = self_attention(x, torch.zeros(4, 4, dtype=torch.float64), wk, wv)
    expected = (x @ wv).mean(dim=0).expand(6, 4)
    torch.testing.assert_close(out, expected)


def test_attention_single_frame():
    x, wq, wk, wv = randn(1, 5), randn(5, 5, seed=1), randn(5, 5, seed=2), randn(5, 5, seed=3)
    torch.testing.assert_close(self_attention(x, wq, wk, wv), x @ wv, rtol=0, atol=1e-15)


def test_attention_matches_loop_oracle():
    x, wq, wk, wv = randn(5, 4), randn(4, 4, seed=1), randn(4, 4, seed=2), randn(4, 4, seed=3)
    ref = attention_loop(x.tolist(), wq.tolist(), wk.tolist(), wv.tolist())
    np.testing.assert_allclose(self_attention(x, wq, wk, wv).numpy(), ref, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_attention_permutation_equivariance(t, d, seed):
    x, wq, wk, wv = (randn(t, d, seed=seed),) + tuple(randn(d, d, seed=seed + i) for i in (1, 2, 3))
    perm = torch.randperm(t, generator=torch.Generator().manual_seed(seed))
    torch.testing.assert_close(
        self_attention(x[perm], wq, wk, wv), self_attention(x, wq, wk, wv)[perm], rtol=0, atol=1e-6
    )


def test_attention_block_requires_square_projection():
    with pytest.raises(ConfigError):
        SelfAttentionBlock(16, d_k=8)
    with pytest.raises(ConfigError):
        self_attention(randn(3, 4), randn(4, 4), randn(4, 2), randn(4, 4))


def test_attention_block_residual_shape():
    blk = SelfAttentionBlock(16)
    assert blk(torch.rand(2, 16, 10, 1)).shape == (2, 16, 10, 1)


# --- full network -----------------------------------------------------------


@pytest.mark.parametrize("t", [32, 100, 259, 300])
def test_forward_shape(t):
    model = MultiScaleNet(TINY).eval()
    with torch.no_grad():
        out = model(torch.rand(1, 1, 88, t))
    assert out.shape == (1, 7, t)
    assert out.min() >= 0 and out.max() <= 1


def test_default_forward_259():
    model = MultiScaleNet().eval()
    with torch.no_grad():
        assert model(torch.rand(2, 1, 88, 259)).shape == (2, 7, 259)


@pytest.mark.parametrize(
    "flags",
    [dict(multi_scale=False), dict(use_attention=False), dict(use_residual=False)],
)
def test_ablations_forward(flags):
    model = MultiScaleNet(ModelConfig(channels_per_branch=[4, 8, 16], **flags)).eval()
    with torch.no_grad():
        assert model(torch.rand(1, 1, 88, 37)).shape == (1, 7, 37)


def test_identical_inputs_identical_outputs():
    model = MultiScaleNet(TINY).eval()
    x = torch.rand(1, 1, 88, 64).expand(3, 1, 88, 64)
    with torch.no_grad():
        out = model(x)
    assert torch.equal(out[0], out[1]) and torch.equal(out[1], out[2])


def test_zero_logits_give_half():
    model = MultiScaleNet(TINY).eval()
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
        out = model(torch.rand(1, 1, 88, 40))
    assert torch.all(out == 0.5)


def test_predict_numpy():
    out = MultiScaleNet(TINY).predict(np.random.rand(88, 50).astype(np.float32))
    assert out.shape == (7, 50)


def test_forward_bad_shape():
    with pytest.raises(ValueError):
        MultiScaleNet(TINY)(torch.rand(1, 2, 88, 32))


# --- binarize ---------------------------------------------------------------


def test_binarize_examples():
    assert binarize(np.full((7, 4), 0.5)).values.sum() == 28
    assert binarize(np.full((7, 4), 0.4)).values.sum() == 0
    with pytest.raises(ValueError):
        binarize(np.zeros((7, 2)), threshold=1.0)


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_binarize_monotone(seed, a, b):
    lo, hi = sorted((a, b))
    pred = np.random.default_rng(seed).random((7, 30))
    assert binarize(pred, hi).values.sum() <= binarize(pred, lo).values.sum()
    assert np.all(binarize(pred, hi).values <= binarize(pred, lo).values)


# --- config and checkpoints -------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n_classes=6),
        dict(branch_count=2),
        dict(channels_per_branch=[16, 32]),
        dict(channels_per_branch=[32, 16, 64]),
        dict(attention_dim=32),
        dict(time_downsample_factor=1),
        dict(stage_count=0),
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_config_round_trip():
    cfg = ModelConfig(channels_per_branch=[8, 12, 24], stage_count=2, use_attention=False)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="bogus"):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


def test_checkpoint_round_trip(tmp_path):
    model = MultiScaleNet(TINY).eval()
    path = save_checkpoint(tmp_path / "m.pt", model)
    loaded, payload = load_checkpoint(path, TINY)
    x = torch.rand(1, 1, 88, 48)
    with torch.no_grad():
        assert torch.equal(model(x), loaded(x))
    assert payload["ipt_classes"][0] == "vibrato"


def test_checkpoint_config_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "m.pt", MultiScaleNet(TINY))
    with pytest.raises(CheckpointMismatch, match="does not match"):
        load_checkpoint(path, ModelConfig())
