import numpy as np
import pytest

from despeckle.denoiser import (denoise_image, extract_noise_estimate, load_denoiser, padded_size,
                                residual_to_gray)
from despeckle.errors import ConfigError, DimensionError
from despeckle.networks import DisentangleNets, NetworkConfig
from despeckle.trainer import TrainConfig, Trainer


@pytest.fixture
def nets(tiny_net_config):
    return DisentangleNets(tiny_net_config).eval()


def test_padding_arithmetic():
    assert (padded_size(450, 4), padded_size(901, 4)) == (452, 904)
    assert padded_size(256, 4) == 256


def test_whole_image_shapes(nets):
    seen = []
    hook = nets.content_encoder.register_forward_hook(lambda m, i, o: seen.append(tuple(i[0].shape[2:])))
    img = np.random.default_rng(0).random((450, 901)).astype(np.float32)
    out = denoise_image(nets, img)
    assert out.shape == (450, 901) and seen[-1] == (452, 904)
    assert out.min() >= 0 and out.max() <= 1
    assert denoise_image(nets, img[:, :900]).shape == (450, 900)
    assert denoise_image(nets, img[:256, :256]).shape == (256, 256) and seen[-1] == (256, 256)
    hook.remove()
    with pytest.raises(DimensionError):
        denoise_image(nets, np.zeros((3, 16, 16)))


def test_residual_examples():
    img = np.random.default_rng(1).random((8, 8)).astype(np.float32)
    assert np.all(extract_noise_estimate(img, img) == 0)
    res = extract_noise_estimate(np.full((4, 4), 0.7), np.full((4, 4), 0.2))
    np.testing.assert_allclose(res, 0.5, atol=1e-6)
    with pytest.raises(DimensionError):
        extract_noise_estimate(img, img[:4])
    np.testing.assert_allclose(residual_to_gray(np.array([-1.0, 0.0, 1.0])), [0.0, 0.5, 1.0])


def test_load_from_checkpoint(tiny_net_config, tmp_path):
    tr = Trainer(TrainConfig(network=tiny_net_config, epochs=1))
    path = tr.save_checkpoint(tmp_path / "c.pt")
    loaded = load_denoiser(path)
    img = np.random.default_rng(2).random((64, 64)).astype(np.float32)
    np.testing.assert_array_equal(denoise_image(loaded, img), denoise_image(tr.nets, img))
    np.testing.assert_array_equal(denoise_image(path, img), denoise_image(tr.nets, img))
    with pytest.raises(ConfigError):
        load_denoiser(path, expect=NetworkConfig())
