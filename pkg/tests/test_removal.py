import copy

import pytest
import torch
from hypothesis import given, settings, strategies as st

from shadowfree.config import ConfigError, ModelConfig
from shadowfree.losses import l1_loss
from shadowfree.oracles import gradient_rel_error
from shadowfree.removal import (ConvNextBlock, ConvNextUNet, DwtSubbands, FFCBlock, RemovalNet,
                                haar_dwt2, haar_idwt2)

TABLE4_BRANCHES = [(True, True), (True, False), (False, True)]


def _rand(*shape, seed=0, dtype=torch.float32):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def _small(unet=True, dwt=True):
    return ModelConfig(base_channels=8, blocks_per_level=[1, 1, 1],
                       enable_unet_branch=unet, enable_dwtffc_branch=dwt)


# --- ConvNext block ------------------------------------------------------------------

def test_convnext_zero_contraction_is_identity():
    block = ConvNextBlock(32)
    torch.nn.init.zeros_(block.pw2.weight)
    torch.nn.init.zeros_(block.pw2.bias)
    x = _rand(1, 32, 16, 16)
    assert torch.equal(block(x), x)


def test_convnext_shape_and_single_nonlinearity():
    block = ConvNextBlock(32)
    assert block(_rand(1, 32, 16, 16)).shape == (1, 32, 16, 16)
    assert sum(isinstance(m, torch.nn.GELU) for m in block.modules()) == 1


def test_convnext_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        ConvNextBlock(32)(_rand(1, 16, 8, 8))


def test_convnext_input_gradient():
    torch.manual_seed(0)
    block = ConvNextBlock(8).double()
    assert gradient_rel_error(block, [_rand(1, 8, 8, 8, dtype=torch.float64)]) <= 1e-4


# --- U-Net ---------------------------------------------------------------------------

def test_unet_shapes():
    net = ConvNextUNet(32, [2, 2, 2])
    x = _rand(1, 3, 64, 64)
    feats = net.encode(x)
    assert [f.shape[-1] for f in feats[1:]] == [32, 16, 8]
    assert [f.shape[1] for f in feats[1:]] == [64, 128, 256]
    assert net(x).shape == (1, 32, 64, 64)


def test_unet_blocks_per_level():
    net = ConvNextUNet(8, [1, 2, 3])
    assert [len(stage) for stage in net.enc] == [1, 2, 3]


def test_removal_rejects_indivisible_size():
    with pytest.raises(ValueError, match="divisible"):
        RemovalNet(_small())(_rand(1, 3, 63, 64).sigmoid())


def test_unet_end_to_end_gradient():
    torch.manual_seed(0)
    net = ConvNextUNet(8, [1, 1, 1]).double()
    assert gradient_rel_error(net, [_rand(1, 3, 16, 16, dtype=torch.float64)]) <= 1e-3


# --- Haar DWT ------------------------------------------------------------------------

def test_haar_constant_image():
    s = haar_dwt2(torch.full((1, 3, 8, 8), 0.3, dtype=torch.float64))
    assert torch.allclose(s.ll, torch.full_like(s.ll, 0.6))
    for band in (s.lh, s.hl, s.hh):
        assert torch.equal(band, torch.zeros_like(band))


def test_haar_roundtrip():
    x = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    assert (haar_idwt2(haar_dwt2(x)) - x).abs().max() <= 1e-6


def test_haar_single_block_by_hand():
    # 2x2 block [[a, b], [c, d]] against the orthonormal Haar basis written out
    x = torch.tensor([[[[1.0, 2.0], [3.0, 5.0]]]], dtype=torch.float64)
    s = haar_dwt2(x)
    assert float(s.ll) == pytest.approx((1 + 2 + 3 + 5) / 2)
    assert float(s.lh) == pytest.approx((1 + 2 - 3 - 5) / 2)
    assert float(s.hl) == pytest.approx((1 - 2 + 3 - 5) / 2)
    assert float(s.hh) == pytest.approx((1 - 2 - 3 + 5) / 2)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), seed=st.integers(0, 1000))
def test_haar_parseval(h, w, seed):
    x = _rand(2, 3, 2 * h, 2 * w, seed=seed, dtype=torch.float64)
    s = haar_dwt2(x)
    energy = sum(float((b ** 2).sum()) for b in s)
    assert energy == pytest.approx(float((x ** 2).sum()), rel=1e-5)
    assert (haar_idwt2(s) - x).abs().max() <= 1e-12


def test_haar_odd_size():
    with pytest.raises(ValueError, match="even"):
        haar_dwt2(_rand(1, 3, 7, 8))


# --- FFC -----------------------------------------------------------------------------

def test_ffc_shape():
    assert FFCBlock(32)(_rand(1, 32, 16, 16)).shape == (1, 32, 16, 16)


def test_ffc_odd_channels():
    with pytest.raises(ValueError, match="even"):
        FFCBlock(7)


def test_ffc_without_global_branch_is_local_residual():
    block = FFCBlock(8)
    with torch.no_grad():
        block.spectral.conv.weight.zero_()
        block.spectral.conv.bias.zero_()
        block.fuse.weight.copy_(torch.eye(8)[:, :, None, None])
        block.fuse.bias.zero_()
    x = _rand(1, 8, 16, 16)
    xl = x[:, :4]
    expected = x + torch.cat([block.local(xl), torch.zeros_like(xl)], dim=1)
    assert torch.allclose(block(x), expected, atol=1e-6)


def test_fourier_unit_identity_weights_roundtrip():
    block = FFCBlock(8)
    fu = block.spectral
    with torch.no_grad():
        fu.conv.weight.copy_(torch.eye(8)[:, :, None, None])
        fu.conv.bias.zero_()
    fu.act = torch.nn.Identity()
    for shape in ((1, 4, 16, 16), (2, 4, 15, 9)):
        x = _rand(*shape)
        assert (fu(x) - x).abs().max() <= 1e-5


def test_ffc_gradient():
    torch.manual_seed(0)
    block = FFCBlock(8).double()
    assert gradient_rel_error(block, [_rand(1, 8, 8, 8, dtype=torch.float64)]) <= 1e-4


# --- full removal net -----------------------------------------------------------------

@pytest.mark.parametrize("unet, dwt", TABLE4_BRANCHES)
def test_removal_configs_run(unet, dwt):
    torch.manual_seed(0)
    net = RemovalNet(ModelConfig(enable_unet_branch=unet, enable_dwtffc_branch=dwt))
    x = torch.rand(1, 3, 64, 64)
    out = net(x)
    assert out.shape == x.shape
    assert 0 <= out.min() and out.max() <= 1


def test_removal_needs_a_branch():
    with pytest.raises(ConfigError):
        RemovalNet(ModelConfig(enable_unet_branch=False, enable_dwtffc_branch=False))


@pytest.mark.parametrize("unet, dwt", TABLE4_BRANCHES)
def test_no_dead_parameters(unet, dwt):
    torch.manual_seed(0)
    net = RemovalNet(_small(unet, dwt))
    g = torch.Generator().manual_seed(1)
    x, target = torch.rand(2, 3, 32, 32, generator=g), torch.rand(2, 3, 32, 32, generator=g)
    l1_loss(net(x), target).backward()
    dead = [n for n, p in net.named_parameters() if p.grad is None or p.grad.abs().sum() == 0]
    assert dead == []


@settings(max_examples=10, deadline=None)
@given(h=st.integers(1, 3), w=st.integers(1, 3), n=st.integers(1, 2))
def test_removal_shape_preservation(h, w, n):
    torch.manual_seed(0)
    net = RemovalNet(_small())
    x = torch.rand(n, 3, 16 * h, 16 * w)
    with torch.no_grad():
        out = net(x)
    assert out.shape == x.shape and 0 <= out.min() and out.max() <= 1


def test_removal_extreme_inputs_stay_finite():
    torch.manual_seed(0)
    net = RemovalNet(_small())
    for v in (0.0, 1.0):
        out = net(torch.full((1, 3, 32, 32), v))
        assert torch.isfinite(out).all()
