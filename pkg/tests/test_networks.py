import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, strategies as st

from dfmgan.networks import (Discriminator, Generator, MappingNetwork, SynthesisConfig, ToImage,
                             map_latent, minibatch_stddev, modulated_conv, modulated_weights)
from dfmgan.utils import ConfigError, NumericalError, count_parameters


def lrelu_np(x):
    return np.where(x >= 0, x, 0.2 * x) * math.sqrt(2)


def naive_conv(x, w, pad):
    """Six-loop 2-D cross-correlation with zero padding."""
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, c_out, h, wd))
    for b in range(n):
        for o in range(c_out):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0
                    for c in range(c_in):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[b, c, i + di, j + dj] * w[o, c, di, dj]
                    out[b, o, i, j] = acc
    return out


def mapping_oracle(z, net: MappingNetwork):
    x = z / np.sqrt((z ** 2).mean(axis=1, keepdims=True) + 1e-8)
    for i in range(net.num_layers):
        fc = getattr(net, f"fc{i}")
        W = fc.weight.detach().double().numpy() * fc.weight_gain
        b = fc.bias.detach().double().numpy() * fc.bias_gain
        x = lrelu_np(x @ W.T + b)
    return x


# mapping ----------------------------------------------------------------------------------

def test_mapping_zero_input_gives_constant_output():
    net = MappingNetwork(16, 16)
    w = net(torch.zeros(3, 16))
    assert torch.equal(w[0], w[1]) and torch.equal(w[1], w[2])
    assert torch.equal(net(torch.zeros(1, 16))[0], w[0])


def test_mapping_deterministic():
    net = MappingNetwork(16, 16)
    z = torch.randn(4, 16)
    assert torch.equal(map_latent(z, net), map_latent(z.clone(), net))


def test_mapping_matches_mlp_oracle():
    net = MappingNetwork(32, 24, num_layers=2).double()
    with torch.no_grad():
        for i in range(2):
            getattr(net, f"fc{i}").bias.normal_()
    z = torch.randn(5, 32, dtype=torch.float64)
    got = net(z).detach().numpy()
    np.testing.assert_allclose(got, mapping_oracle(z.numpy(), net), atol=1e-6, rtol=0)


def test_mapping_rejects_wrong_dimension():
    with pytest.raises(ConfigError):
        MappingNetwork(16, 16)(torch.zeros(2, 8))


# modulated conv ----------------------------------------------------------------------------

def test_identity_modulation_is_plain_conv():
    x = torch.randn(2, 3, 6, 6, dtype=torch.float64)
    w = torch.randn(4, 3, 3, 3, dtype=torch.float64)
    got = modulated_conv(x, w, torch.ones(2, 3, dtype=torch.float64), demodulate=False)
    torch.testing.assert_close(got, F.conv2d(x, w, padding=1), rtol=0, atol=1e-12)


def test_zero_input_gives_bias_only_map():
    w = torch.randn(4, 3, 3, 3)
    bias = torch.randn(4)
    out = modulated_conv(torch.zeros(2, 3, 5, 5), w, torch.rand(2, 3) + 0.5, bias=bias)
    assert torch.equal(out, bias[None, :, None, None].expand(2, 4, 5, 5))


@pytest.mark.parametrize("demodulate", [False, True])
def test_modulated_conv_matches_loop_oracle(demodulate):
    g = torch.Generator().manual_seed(3)
    x = torch.randn(2, 3, 5, 5, generator=g, dtype=torch.float64)
    w = torch.randn(4, 3, 3, 3, generator=g, dtype=torch.float64)
    s = torch.rand(2, 3, generator=g, dtype=torch.float64) + 0.5
    got = modulated_conv(x, w, s, demodulate=demodulate).numpy()
    expect = np.zeros_like(got)
    for b in range(2):
        wb = w.numpy() * s[b].numpy()[None, :, None, None]
        if demodulate:
            wb = wb / np.sqrt((wb ** 2).sum(axis=(1, 2, 3), keepdims=True) + 1e-8)
        expect[b] = naive_conv(x[b:b + 1].numpy(), wb, 1)[0]
    np.testing.assert_allclose(got, expect, atol=1e-5, rtol=0)


@given(scale=st.floats(0.5, 100.0), seed=st.integers(0, 10_000))
def test_demodulated_kernels_have_unit_norm(scale, seed):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(4, 3, 3, 3, generator=g, dtype=torch.float64)
    s = (torch.rand(2, 3, generator=g, dtype=torch.float64) + 0.5) * scale
    eff = modulated_weights(w, s, demodulate=True)
    norms = eff.square().sum(dim=[2, 3, 4]).sqrt()
    np.testing.assert_allclose(norms.numpy(), 1.0, atol=1e-6)


def test_modulated_conv_rejects_nonfinite_styles():
    with pytest.raises(NumericalError):
        modulated_conv(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 3, 3), torch.tensor([[1.0, float("nan")]]))


def test_modulated_conv_channel_mismatch():
    with pytest.raises(ConfigError):
        modulated_conv(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3), torch.ones(1, 3))


# synthesis -------------------------------------------------------------------------------

def _synthesis_oracle(G, w, noise):
    """Straight-line skip synthesis: const -> conv1 -> rgb; up -> conv0 -> conv1 -> rgb + up(rgb)."""
    syn = G.synthesis

    def layer(lay, x, nz):
        styles = lay.affine(w)
        up = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False) if lay.up else x
        out = torch.zeros(up.shape[0], lay.weight.shape[0], up.shape[2], up.shape[3], dtype=w.dtype)
        for b in range(up.shape[0]):
            wb = lay.weight * styles[b][None, :, None, None]
            wb = wb / (wb.square().sum(dim=[1, 2, 3], keepdim=True) + 1e-8).sqrt()
            out[b] = F.conv2d(up[b:b + 1], wb, padding=1)[0]
        out = out + nz * lay.noise_strength + lay.bias[None, :, None, None]
        return F.leaky_relu(out, 0.2) * math.sqrt(2)

    def torgb(m, x):
        styles = m.affine(w) * m.weight_gain
        return torch.stack([F.conv2d(x[b:b + 1], m.weight * styles[b][None, :, None, None])[0]
                            for b in range(x.shape[0])]) + m.bias[None, :, None, None]

    b4, b8 = syn.b4, syn.b8
    x = b4.const[None].expand(w.shape[0], -1, -1, -1)
    x = layer(b4.conv1, x, noise["b4.conv1"])
    img = torgb(b4.torgb, x)
    x = layer(b8.conv0, x, noise["b8.conv0"])
    x = layer(b8.conv1, x, noise["b8.conv1"])
    return F.interpolate(img, scale_factor=2, mode="bilinear", align_corners=False) + torgb(b8.torgb, x)


def test_synthesis_matches_composed_oracle(tiny_cfg):
    G = Generator(tiny_cfg).double()
    with torch.no_grad():
        for lay in (G.synthesis.b4.conv1, G.synthesis.b8.conv0, G.synthesis.b8.conv1):
            lay.noise_strength.fill_(0.3)
            lay.bias.normal_()
    w = torch.randn(2, tiny_cfg.w_dim, dtype=torch.float64)
    noise = {k: torch.randn(2, 1, h, wd, dtype=torch.float64) for k, (h, wd) in G.noise_shapes().items()}
    with torch.no_grad():
        img, feats = G.synthesis(w, noise)
        expect = _synthesis_oracle(G, w, noise)
    assert set(feats) == {4, 8}
    torch.testing.assert_close(img, expect, atol=1e-5, rtol=0)


def test_synthesis_deterministic(tiny_cfg):
    G = Generator(tiny_cfg)
    z = torch.randn(2, tiny_cfg.z_dim)
    noise = {k: torch.randn(2, 1, h, w) for k, (h, w) in G.noise_shapes().items()}
    with torch.no_grad():
        assert torch.equal(G(z, noise), G(z, noise))


def test_zero_torgb_gives_zero_image(tiny_cfg):
    G = Generator(tiny_cfg)
    with torch.no_grad():
        for blk in G.synthesis.blocks():
            blk.torgb.weight.zero_()
        img = G(torch.randn(3, tiny_cfg.z_dim))
    assert torch.equal(img, torch.zeros_like(img))


def test_desk_channel_map():
    assert SynthesisConfig().channel_map == {4: 128, 8: 128, 16: 64, 32: 32}


@pytest.mark.parametrize("kwargs", [dict(resolution=24), dict(resolution=4), dict(const_resolution=8)])
def test_invalid_synthesis_config(kwargs):
    with pytest.raises(ConfigError):
        SynthesisConfig(**kwargs)


# discriminator ------------------------------------------------------------------------------

def test_zero_discriminator_returns_final_bias(tiny_cfg):
    D = Discriminator(tiny_cfg)
    with torch.no_grad():
        for p in D.parameters():
            p.zero_()
        D.b4.out.bias.fill_(0.75)
        score = D(torch.zeros(2, 3, 8, 8))
    torch.testing.assert_close(score, torch.full((2,), 0.75))


def test_discriminator_same_input_same_score(tiny_cfg):
    D = Discriminator(tiny_cfg)
    x = torch.randn(4, 3, 8, 8)
    with torch.no_grad():
        assert torch.equal(D(x), D(x.clone()))


def test_discriminator_matches_hand_composed_oracle(tiny_cfg):
    D = Discriminator(tiny_cfg).double()
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    lr = lambda t: F.leaky_relu(t, 0.2) * math.sqrt(2)
    b = D.b8

    def conv(layer, t):
        return F.conv2d(t, layer.weight / math.sqrt(layer.weight[0].numel()), layer.bias,
                        padding=layer.weight.shape[-1] // 2)

    with torch.no_grad():
        h = lr(conv(b.fromrgb, x))
        skip = F.conv2d(F.avg_pool2d(h, 2), b.skip.weight / math.sqrt(b.skip.weight[0].numel())) * math.sqrt(0.5)
        main = lr(F.avg_pool2d(conv(b.conv1, lr(conv(b.conv0, h))), 2)) * math.sqrt(0.5)
        h = main + skip
        std = (h - h.mean(dim=0)).square().mean(dim=0).add(1e-8).sqrt().mean()
        h = torch.cat([h, std.expand(2, 1, 4, 4)], dim=1)
        h = lr(conv(D.b4.conv, h)).flatten(1)
        fc, out = D.b4.fc, D.b4.out
        h = lr(h @ (fc.weight * fc.weight_gain).T + fc.bias)
        expect = (h @ (out.weight * out.weight_gain).T + out.bias)[:, 0]
        got = D(x)
    torch.testing.assert_close(got, expect, atol=1e-5, rtol=0)


def test_discriminator_rejects_wrong_channels(tiny_cfg):
    with pytest.raises(ConfigError):
        Discriminator(tiny_cfg)(torch.zeros(2, 4, 8, 8))


def test_minibatch_stddev_constant_batch_is_tiny():
    x = torch.ones(4, 2, 4, 4)
    y = minibatch_stddev(x)
    assert y.shape == (4, 3, 4, 4)
    torch.testing.assert_close(y[:, 2], torch.full((4, 4, 4), 1e-4))


def test_full_scale_backbone_parameter_count():
    cfg = SynthesisConfig.full_scale()
    n = count_parameters(Generator(cfg))
    assert abs(n - 23.2e6) / 23.2e6 < 0.2
