"""Encoders, generators and PatchGAN discriminators.

Layout for the default configuration (``base_channels=64``,
``downsample_factor=4``):

* content encoder: 7x7 conv -> two stride-2 convs (64 -> 128 -> 256)
  -> residual blocks with instance norm.  Returns the content map plus the
  pre-downsampling activations used as skips by the clean generator.
* noise encoder: 7x7 conv -> the same down sampler -> adaptive average pool
  to 1x1 -> 1x1 conv to ``noise_dim`` (or ``2 * noise_dim`` for the
  Gaussian head, which emits mean and log-variance).
* clean generator: residual blocks -> (nearest upsample, conv, concat skip,
  conv) per stage -> 7x7 conv -> sigmoid.
* noisy generator: residual blocks whose normalization is AdaIN driven by an
  MLP of the noise code -> nearest upsample + conv stages -> 7x7 conv
  -> sigmoid.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError

ADAIN_EPS = 1e-5
MIN_NOISE_INPUT = 8
FLAT_REL_TOL = 1e-6   # spread below this fraction of |mean| counts as a constant channel


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 64
    downsample_factor: int = 4
    n_residual_blocks: int = 4
    noise_dim: int = 16
    mlp_hidden: int = 256
    mlp_layers: int = 3
    patchgan_layers: int = 3

    def __post_init__(self):
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ConfigError(f"downsample_factor must be a power of 2, got {f}")
        for name in ("base_channels", "n_residual_blocks", "noise_dim", "mlp_hidden", "mlp_layers", "patchgan_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def n_down(self) -> int:
        return int(math.log2(self.downsample_factor))

    @property
    def content_channels(self) -> int:
        return self.base_channels * self.downsample_factor

    def to_dict(self) -> dict:
        return asdict(self)


def instance_stats(f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample, per-channel spatial mean and population std."""
    mu = f.mean(dim=(2, 3), keepdim=True)
    var = ((f - mu) ** 2).mean(dim=(2, 3), keepdim=True)
    # tiny floor keeps sqrt differentiable on constant channels
    return mu, torch.sqrt(var + 1e-12)


def adain(f: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """``gamma * (f - mu(f)) / (sigma(f) + eps) + beta`` with instance statistics.

    ``gamma`` and ``beta`` have shape ``(B, C)``.
    """
    if f.dim() != 4:
        raise DimensionError(f"adain expects a (B, C, H, W) map, got {tuple(f.shape)}")
    b, c = f.shape[:2]
    if gamma.shape != (b, c) or beta.shape != (b, c):
        raise DimensionError(f"affine params {tuple(gamma.shape)}/{tuple(beta.shape)} do not match feature map ({b}, {c})")
    mu, sigma = instance_stats(f)
    centered = f - mu
    # a constant channel leaves float rounding noise in f - mu; zero it so the output is exactly beta
    flat = centered.abs().amax(dim=(2, 3), keepdim=True) <= FLAT_REL_TOL * mu.abs()
    centered = torch.where(flat, torch.zeros_like(centered), centered)
    return gamma[:, :, None, None] * centered / (sigma + eps) + beta[:, :, None, None]


def split_affine(params: torch.Tensor, channels: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Split a ``(B, 2C)`` MLP output into scale (first half) and shift (second half)."""
    if params.shape[-1] != 2 * channels:
        raise DimensionError(f"expected {2 * channels} affine values, got {params.shape[-1]}")
    return params[:, :channels], params[:, channels:]


class MLP(nn.Module):
    def __init__(self, in_dim, out_dim, hidden, n_layers):
        super().__init__()
        layers, d = [], in_dim
        for _ in range(n_layers - 1):
            layers += [nn.Linear(d, hidden), nn.ReLU(inplace=True)]
            d = hidden
        layers.append(nn.Linear(d, out_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


def conv_block(cin, cout, k, stride=1, norm=True, act="relu"):
    # bias is redundant ahead of instance norm (and receives zero gradient)
    layers = [nn.Conv2d(cin, cout, k, stride, padding=(k - 1) // 2 if stride == 1 else 1,
                        padding_mode="reflect" if k > 1 else "zeros", bias=not norm)]
    if norm:
        layers.append(nn.InstanceNorm2d(cout, affine=False))
    if act == "relu":
        layers.append(nn.ReLU(inplace=True))
    elif act == "lrelu":
        layers.append(nn.LeakyReLU(0.2, inplace=True))
    return nn.Sequential(*layers)


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(conv_block(ch, ch, 3), conv_block(ch, ch, 3, act=None))

    def forward(self, x):
        return x + self.body(x)


class AdaINResBlock(nn.Module):
    """Residual block with AdaIN after each convolution."""

    def __init__(self, ch):
        super().__init__()
        self.ch = ch
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect", bias=False)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect", bias=False)

    def forward(self, x, params):
        # params: (B, 4C) = [gamma1, beta1, gamma2, beta2]
        g1, b1 = split_affine(params[:, :2 * self.ch], self.ch)
        g2, b2 = split_affine(params[:, 2 * self.ch:], self.ch)
        h = F.relu(adain(self.conv1(x), g1, b1))
        h = adain(self.conv2(h), g2, b2)
        return x + h


def _down_stages(cfg: NetworkConfig, norm: bool) -> nn.ModuleList:
    stages, ch = nn.ModuleList(), cfg.base_channels
    for _ in range(cfg.n_down):
        stages.append(conv_block(ch, ch * 2, 4, stride=2, norm=norm))
        ch *= 2
    return stages


class ContentEncoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = conv_block(1, cfg.base_channels, 7)
        self.down = _down_stages(cfg, norm=True)
        self.res = nn.Sequential(*[ResBlock(cfg.content_channels) for _ in range(cfg.n_residual_blocks)])

    def forward(self, x):
        """Return ``(content, skips)``; ``skips[i]`` is the activation entering down stage ``i``."""
        _check_image(x)
        f = self.cfg.downsample_factor
        if x.shape[2] % f or x.shape[3] % f:
            raise DimensionError(f"spatial dims {tuple(x.shape[2:])} must be multiples of {f}; pad the input")
        h = self.stem(x)
        skips = []
        for stage in self.down:
            skips.append(h)
            h = stage(h)
        return self.res(h), skips


class NoiseEncoder(nn.Module):
    def __init__(self, cfg: NetworkConfig, gaussian: bool = False):
        super().__init__()
        self.cfg = cfg
        self.gaussian = gaussian
        self.stem = conv_block(1, cfg.base_channels, 7, norm=False)
        self.down = _down_stages(cfg, norm=False)
        self.pool = nn.AdaptiveAvgPool2d(1)
        out = cfg.noise_dim * (2 if gaussian else 1)
        self.head = nn.Conv2d(cfg.content_channels, out, 1)

    def forward(self, x):
        """``(B, noise_dim)``; the Gaussian head returns ``(B, 2 * noise_dim)`` = [mean, logvar]."""
        _check_image(x)
        if x.shape[2] < MIN_NOISE_INPUT or x.shape[3] < MIN_NOISE_INPUT:
            raise DimensionError(f"noise encoder needs inputs of at least {MIN_NOISE_INPUT}x{MIN_NOISE_INPUT}, got {tuple(x.shape[2:])}")
        h = self.stem(x)
        for stage in self.down:
            h = stage(h)
        return self.head(self.pool(h)).flatten(1)


class _Up(nn.Module):
    def __init__(self, cin, cout, skip_ch=0):
        super().__init__()
        self.conv = conv_block(cin, cout, 3, norm=skip_ch > 0)
        self.fuse = conv_block(cout + skip_ch, cout, 3) if skip_ch else None

    def forward(self, h, skip=None):
        h = self.conv(F.interpolate(h, scale_factor=2, mode="nearest"))
        if self.fuse is not None:
            if skip is None or skip.shape[2:] != h.shape[2:]:
                raise DimensionError("missing or mismatched skip activation in clean generator")
            h = self.fuse(torch.cat([h, skip], dim=1))
        return h


class CleanGenerator(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.res = nn.Sequential(*[ResBlock(cfg.content_channels) for _ in range(cfg.n_residual_blocks)])
        ch, ups = cfg.content_channels, []
        for _ in range(cfg.n_down):
            ups.append(_Up(ch, ch // 2, skip_ch=ch // 2))
            ch //= 2
        self.up = nn.ModuleList(ups)
        self.out = nn.Conv2d(ch, 1, 7, padding=3, padding_mode="reflect")

    def forward(self, content, skips):
        if skips is None or len(skips) != self.cfg.n_down:
            raise DimensionError(f"clean generator needs {self.cfg.n_down} skip activations")
        h = self.res(content)
        for up, skip in zip(self.up, reversed(skips)):
            h = up(h, skip)
        return torch.sigmoid(self.out(h))


class NoisyGenerator(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.content_channels
        self.blocks = nn.ModuleList([AdaINResBlock(ch) for _ in range(cfg.n_residual_blocks)])
        self.mlp = MLP(cfg.noise_dim, 4 * ch * cfg.n_residual_blocks, cfg.mlp_hidden, cfg.mlp_layers)
        ups = []
        for _ in range(cfg.n_down):
            ups.append(_Up(ch, ch // 2))
            ch //= 2
        self.up = nn.ModuleList(ups)
        self.out = nn.Conv2d(ch, 1, 7, padding=3, padding_mode="reflect")

    def forward(self, content, noise):
        if noise.dim() != 2 or noise.shape[1] != self.cfg.noise_dim:
            raise DimensionError(f"noise code must be (B, {self.cfg.noise_dim}), got {tuple(noise.shape)}")
        if noise.shape[0] != content.shape[0]:
            raise DimensionError("noise code and content batch sizes differ")
        params = self.mlp(noise)
        per_block = 4 * self.cfg.content_channels
        h = content
        for i, block in enumerate(self.blocks):
            h = block(h, params[:, i * per_block:(i + 1) * per_block])
        for up in self.up:
            h = up(h)
        return torch.sigmoid(self.out(h))


class PatchDiscriminator(nn.Module):
    """PatchGAN: ``patchgan_layers`` stride-2 4x4 convs, one stride-1 conv, a 1-channel logit conv."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ch = cfg.base_channels
        layers = [nn.Conv2d(1, ch, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
        for i in range(1, cfg.patchgan_layers):
            nxt = min(ch * 2, cfg.base_channels * 8)
            layers += [nn.Conv2d(ch, nxt, 4, 2, 1, bias=False), nn.InstanceNorm2d(nxt), nn.LeakyReLU(0.2, inplace=True)]
            ch = nxt
        nxt = min(ch * 2, cfg.base_channels * 8)
        layers += [nn.Conv2d(ch, nxt, 4, 1, 1, bias=False), nn.InstanceNorm2d(nxt), nn.LeakyReLU(0.2, inplace=True),
                   nn.Conv2d(nxt, 1, 4, 1, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        _check_image(x)
        return self.net(x)


def patchgan_output_size(size: int, n_layers: int = 3) -> int:
    for _ in range(n_layers):
        size = (size + 2 - 4) // 2 + 1
    for _ in range(2):
        size = size + 2 - 4 + 1
    return size


def _check_image(x):
    if x.dim() != 4 or x.shape[1] != 1:
        raise DimensionError(f"expected a (B, 1, H, W) batch, got {tuple(x.shape)}")


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class DisentangleNets(nn.Module):
    """All trainable networks.

    ``noise_head`` selects the noise constraint: ``"patch"`` builds the noise
    discriminator, ``"gaussian"`` makes the noise encoder emit
    mean/log-variance, ``None`` builds neither.
    """

    GENERATOR_PARTS = ("content_encoder", "noise_encoder", "clean_generator", "noisy_generator")

    def __init__(self, cfg: NetworkConfig, noise_head: Optional[str] = "patch"):
        super().__init__()
        if noise_head not in ("patch", "gaussian", None):
            raise ConfigError(f"unknown noise head {noise_head!r}")
        self.cfg = cfg
        self.noise_head = noise_head
        self.content_encoder = ContentEncoder(cfg)
        self.noise_encoder = NoiseEncoder(cfg, gaussian=noise_head == "gaussian")
        self.clean_generator = CleanGenerator(cfg)
        self.noisy_generator = NoisyGenerator(cfg)
        self.d_clean = PatchDiscriminator(cfg)
        self.d_noisy = PatchDiscriminator(cfg)
        self.d_noise = PatchDiscriminator(cfg) if noise_head == "patch" else None
        init_weights(self)

    def generator_parameters(self):
        for name in self.GENERATOR_PARTS:
            yield from getattr(self, name).parameters()

    def discriminator_parameters(self):
        for d in (self.d_clean, self.d_noisy, self.d_noise):
            if d is not None:
                yield from d.parameters()

    def encode_noise(self, x, sample: bool = True, generator: Optional[torch.Generator] = None):
        """Noise code for ``x`` plus the ``(mean, logvar)`` pair when the Gaussian head is active."""
        out = self.noise_encoder(x)
        if self.noise_head != "gaussian":
            return out, None
        mean, logvar = out.chunk(2, dim=1)
        if sample:
            eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
            code = mean + torch.exp(0.5 * logvar) * eps
        else:
            code = mean
        return code, (mean, logvar)

    @torch.no_grad()
    def denoise(self, x):
        content, skips = self.content_encoder(x)
        return self.clean_generator(content, skips)
