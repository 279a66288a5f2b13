import pytest
import torch

from despeckle.errors import ConfigError, DimensionError
from despeckle.networks import (CleanGenerator, ContentEncoder, DisentangleNets, NetworkConfig, NoiseEncoder,
                                NoisyGenerator, PatchDiscriminator, adain, instance_stats, patchgan_output_size,
                                split_affine)


# -- AdaIN -------------------------------------------------------------------------

def test_adain_identity_modulation():
    f = torch.randn(2, 5, 6, 7, dtype=torch.float64)
    mu, sigma = instance_stats(f)
    out = adain(f, sigma.flatten(1) + 1e-5, mu.flatten(1))
    torch.testing.assert_close(out, f, rtol=0, atol=1e-12)


def test_adain_two_pixel_example():
    f = torch.tensor([1.0, 3.0], dtype=torch.float64).view(1, 1, 1, 2)
    out = adain(f, torch.ones(1, 1, dtype=torch.float64), torch.zeros(1, 1, dtype=torch.float64))
    torch.testing.assert_close(out.flatten(), torch.tensor([-1.0, 1.0], dtype=torch.float64), rtol=0, atol=1e-4)


@pytest.mark.parametrize("value", [0.7, 0.0, -123.456, 1e-3])
def test_adain_constant_channel_gives_beta(value):
    f = torch.full((1, 2, 4, 4), value)
    beta = torch.tensor([[0.25, -3.0]])
    out = adain(f, torch.tensor([[5.0, 2.0]]), beta)
    torch.testing.assert_close(out, beta.view(1, 2, 1, 1).expand_as(out), rtol=0, atol=0)


def test_adain_moments_follow_affine():
    torch.manual_seed(3)
    f = torch.randn(3, 8, 16, 16, dtype=torch.float64) * 2 + 1
    gamma = torch.rand(3, 8, dtype=torch.float64) * 3 + 0.1
    beta = torch.randn(3, 8, dtype=torch.float64)
    out = adain(f, gamma, beta)
    mean = out.mean(dim=(2, 3))
    std = out.std(dim=(2, 3), unbiased=False)
    assert torch.max(torch.abs(mean - beta)) < 1e-4
    assert torch.max(torch.abs(std - gamma) / gamma) < 1e-3


def test_adain_finite_difference_gradient():
    torch.manual_seed(0)
    f = torch.randn(1, 1, 4, 4, dtype=torch.float64, requires_grad=True)
    gamma = torch.tensor([[1.7]], dtype=torch.float64, requires_grad=True)
    beta = torch.tensor([[-0.3]], dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 1, 4, 4, dtype=torch.float64)

    def loss(f_, g_, b_):
        return (adain(f_, g_, b_) * w).sum()

    loss(f, gamma, beta).backward()
    h = 1e-4
    for idx, tensor in enumerate((f, gamma, beta)):
        flat = tensor.detach().clone().view(-1)
        grad = tensor.grad.view(-1)
        for i in range(flat.numel()):
            args = [f.detach(), gamma.detach(), beta.detach()]
            plus, minus = flat.clone(), flat.clone()
            plus[i] += h
            minus[i] -= h
            args[idx] = plus.view_as(tensor)
            lp = loss(*args).item()
            args[idx] = minus.view_as(tensor)
            lm = loss(*args).item()
            fd = (lp - lm) / (2 * h)
            assert abs(fd - grad[i].item()) <= 1e-3 * max(abs(fd), 1e-3), (idx, i, fd, grad[i].item())


def test_adain_channel_mismatch():
    with pytest.raises(DimensionError):
        adain(torch.randn(1, 3, 4, 4), torch.ones(1, 2), torch.zeros(1, 2))


def test_split_affine():
    params = torch.arange(8.0).view(1, 8)
    gamma, beta = split_affine(params, 4)
    assert gamma.tolist() == [[0, 1, 2, 3]] and beta.tolist() == [[4, 5, 6, 7]]


# -- shapes ------------------------------------------------------------------------

def test_default_content_encoder_shapes():
    enc = ContentEncoder(NetworkConfig())
    with torch.no_grad():
        c, skips = enc(torch.rand(1, 1, 256, 256))
        assert c.shape == (1, 256, 64, 64)
        assert enc(torch.rand(2, 1, 64, 64))[0].shape == (2, 256, 16, 16)
    with pytest.raises(DimensionError, match="multiples of 4"):
        enc(torch.rand(1, 1, 250, 250))


def test_default_noise_encoder_shapes():
    cfg = NetworkConfig()
    enc = NoiseEncoder(cfg)
    with torch.no_grad():
        assert enc(torch.rand(1, 1, 256, 256)).shape == (1, 16)
        assert enc(torch.rand(3, 1, 64, 64)).shape == (3, 16)
        assert NoiseEncoder(cfg, gaussian=True)(torch.rand(2, 1, 64, 64)).shape == (2, 32)
    with pytest.raises(DimensionError):
        enc(torch.rand(1, 1, 4, 4))


def test_generators_shapes_and_range(tiny_net_config):
    cfg = tiny_net_config
    enc, gc, gn = ContentEncoder(cfg), CleanGenerator(cfg), NoisyGenerator(cfg)
    with torch.no_grad():
        for size in (64, 256):
            c, skips = enc(torch.rand(2, 1, size, size))
            out = gc(c, skips)
            assert out.shape == (2, 1, size, size) and out.min() >= 0 and out.max() <= 1
            assert gn(c, torch.randn(2, cfg.noise_dim)).shape == (2, 1, size, size)
        with pytest.raises(DimensionError):
            gc(c, None)
        with pytest.raises(DimensionError):
            gn(c, torch.randn(2, cfg.noise_dim + 1))


def test_default_generators_full_size():
    cfg = NetworkConfig()
    nets = DisentangleNets(cfg)
    with torch.no_grad():
        x = torch.rand(1, 1, 256, 256)
        c, skips = nets.content_encoder(x)
        assert nets.clean_generator(c, skips).shape == x.shape
        assert nets.noisy_generator(c, nets.noise_encoder(x)).shape == x.shape


def test_patch_discriminator_sizes(tiny_net_config):
    assert patchgan_output_size(256) == 30 and patchgan_output_size(64) == 6
    d = PatchDiscriminator(NetworkConfig())
    with torch.no_grad():
        assert d(torch.rand(1, 1, 256, 256)).shape == (1, 1, 30, 30)
        out = d(torch.zeros(2, 1, 64, 64))
    assert out.shape == (2, 1, 6, 6) and torch.isfinite(out).all()


def test_disentangle_nets_heads(tiny_net_config):
    assert DisentangleNets(tiny_net_config, "patch").d_noise is not None
    off = DisentangleNets(tiny_net_config, None)
    assert off.d_noise is None
    g = DisentangleNets(tiny_net_config, "gaussian")
    code, (mean, logvar) = g.encode_noise(torch.rand(2, 1, 32, 32))
    assert code.shape == mean.shape == logvar.shape == (2, tiny_net_config.noise_dim)
    det, _ = g.encode_noise(torch.rand(2, 1, 32, 32), sample=False)
    assert det.shape == (2, tiny_net_config.noise_dim)
    with pytest.raises(ConfigError):
        DisentangleNets(tiny_net_config, "laplace")
    with pytest.raises(ConfigError):
        NetworkConfig(downsample_factor=3)
