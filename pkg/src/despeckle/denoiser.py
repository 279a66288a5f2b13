"""Whole-image inference with a trained content encoder and clean generator."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError
from .networks import DisentangleNets, NetworkConfig
from .trainer import load_checkpoint


def load_denoiser(checkpoint, device: str = "cpu", expect: NetworkConfig | None = None) -> DisentangleNets:
    state = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint, device)
    cfg = NetworkConfig(**state["network_config"])
    if expect is not None and expect != cfg:
        raise ConfigError(f"checkpoint network config {cfg} does not match the expected {expect}")
    nets = DisentangleNets(cfg, state.get("noise_head", "patch"))
    try:
        nets.load_state_dict(state["nets"])
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint weights do not fit its network config: {exc}") from None
    return nets.to(device).eval()


def padded_size(size: int, factor: int) -> int:
    return -(-size // factor) * factor


def denoise_image(model: Union[DisentangleNets, str, Path, dict], image: np.ndarray) -> np.ndarray:
    """Denoise one ``(H, W)`` image in [0, 1]; returns the same shape in [0, 1].

    Sizes that are not multiples of the downsampling factor are reflect-padded
    on the bottom/right and cropped back.
    """
    nets = model if isinstance(model, DisentangleNets) else load_denoiser(model)
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    if img.ndim != 2:
        raise DimensionError(f"expected a single-channel (H, W) image, got shape {img.shape}")
    h, w = img.shape
    f = nets.cfg.downsample_factor
    ph, pw = padded_size(h, f) - h, padded_size(w, f) - w
    device = next(nets.parameters()).device
    t = torch.from_numpy(img)[None, None].to(device)
    if ph or pw:
        t = F.pad(t, (0, pw, 0, ph), mode="reflect")
    was_training = nets.training
    nets.eval()
    out = nets.denoise(t)
    nets.train(was_training)
    return out[0, 0, :h, :w].cpu().numpy().astype(np.float32)


def extract_noise_estimate(image: np.ndarray, denoised: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    denoised = np.asarray(denoised, dtype=np.float32)
    if image.shape != denoised.shape:
        raise DimensionError(f"noise estimate needs equal shapes, got {image.shape} and {denoised.shape}")
    return image - denoised


def residual_to_gray(residual: np.ndarray) -> np.ndarray:
    """Symmetric mapping of [-1, 1] residuals to [0, 1] (zero -> mid-gray)."""
    return np.clip((np.asarray(residual, dtype=np.float32) + 1.0) / 2.0, 0.0, 1.0)
