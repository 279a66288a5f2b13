"""Layered retina-like phantoms with multiplicative gamma speckle.

A test fixture, not an OCT physics model: a stack of piecewise-constant
layers with smoothly undulating interfaces sits above a flat boundary row,
and everything else is a dark homogeneous background.  Gamma speckle with
shape ``L`` and unit mean gives a closed-form ENL of ``L`` on constant
regions, which ties the simulator to the metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .metrics import RoiSpec


@dataclass(frozen=True)
class PhantomConfig:
    height: int = 450
    width: int = 900
    layer_means: tuple[float, ...] = (0.8, 0.5, 0.3)
    background: float = 0.05
    looks: float = 1.0
    seed: int = 0
    top_fraction: float = 0.15      # first interface, as a fraction of height
    boundary_fraction: float = 2 / 3
    margin: int = 8                 # rows kept flat-background above boundary_row
    undulation: float = 6.0         # interface amplitude in rows
    min_thickness: int = 20

    def __post_init__(self):
        object.__setattr__(self, "layer_means", tuple(float(v) for v in self.layer_means))
        if not self.layer_means:
            raise ConfigError("phantom needs at least one layer")
        if any(not 0.0 < v <= 1.0 for v in self.layer_means):
            raise ConfigError("layer reflectivities must lie in (0, 1]")
        if any(b > a for a, b in zip(self.layer_means, self.layer_means[1:])):
            raise ConfigError(f"layer means must be non-increasing with depth, got {self.layer_means}")
        if not 0.0 <= self.background <= 1.0:
            raise ConfigError("background mean must lie in [0, 1]")
        if self.looks < 1:
            raise ConfigError("speckle looks L must be >= 1")
        if self.height < 16 or self.width < 16:
            raise ConfigError("phantom must be at least 16x16")

    @property
    def boundary_row(self) -> int:
        return int(round(self.height * self.boundary_fraction))


def layer_interfaces(config: PhantomConfig) -> np.ndarray:
    """Integer interface rows, shape ``(n_layers + 1, width)``; row ``k`` is the top of layer ``k``."""
    rng = np.random.default_rng([config.seed, 1])
    n = len(config.layer_means)
    top = config.height * config.top_fraction
    bottom = config.boundary_row - config.margin - config.undulation
    if bottom - top < n * config.min_thickness:
        raise ConfigError("phantom too short for the requested number of layers")
    base = np.linspace(top, bottom, n + 1)
    cols = np.arange(config.width)
    curves = []
    for k in range(n + 1):
        period = rng.uniform(0.6, 1.4) * config.width
        phase = rng.uniform(0, 2 * np.pi)
        amp = config.undulation * rng.uniform(0.5, 1.0)
        curves.append(base[k] + amp * np.sin(2 * np.pi * cols / period + phase))
    curves = np.rint(np.array(curves)).astype(int)
    # keep layers at least min_thickness / 2 thick everywhere
    for k in range(1, n + 1):
        curves[k] = np.maximum(curves[k], curves[k - 1] + config.min_thickness // 2)
    curves[-1] = np.minimum(curves[-1], config.boundary_row - config.margin)
    return curves


def generate_phantom(config: PhantomConfig) -> tuple[np.ndarray, int]:
    """Clean layered image in [0, 1] and its boundary row."""
    curves = layer_interfaces(config)
    rows = np.arange(config.height)[:, None]
    img = np.full((config.height, config.width), config.background, dtype=np.float64)
    for k, mean in enumerate(config.layer_means):
        inside = (rows >= curves[k][None, :]) & (rows < curves[k + 1][None, :])
        img[inside] = mean
    return img.astype(np.float32), config.boundary_row


def apply_speckle(clean: np.ndarray, looks: float, seed) -> np.ndarray:
    """``clean * g`` with ``g ~ Gamma(shape=L, scale=1/L)`` per pixel (float64, unclipped)."""
    if looks < 1:
        raise ConfigError("speckle looks L must be >= 1")
    rng = np.random.default_rng(seed)
    g = rng.gamma(shape=looks, scale=1.0 / looks, size=np.shape(clean))
    return np.asarray(clean, dtype=np.float64) * g


def phantom_pair(config: PhantomConfig) -> tuple[np.ndarray, np.ndarray, int]:
    """Clean image, speckled image clipped to [0, 1] (as stored), boundary row."""
    clean, boundary = generate_phantom(config)
    noisy = np.clip(apply_speckle(clean, config.looks, [config.seed, 2]), 0.0, 1.0).astype(np.float32)
    return clean, noisy, boundary


def phantom_rois(config: PhantomConfig, roi_h: int = 10, roi_w: int = 60) -> RoiSpec:
    """One signal ROI per layer and one background ROI, all away from interfaces.

    Signal rectangles are placed where the layer is thickest; the background
    rectangle sits in the flat region below the boundary row.
    """
    curves = layer_interfaces(config)
    w = config.width
    signals = []
    for k in range(len(config.layer_means)):
        top_c, bot_c = curves[k], curves[k + 1]
        best = None
        for left in range(0, w - roi_w + 1, max(1, roi_w // 4)):
            lo = int(top_c[left:left + roi_w].max())
            hi = int(bot_c[left:left + roi_w].min())
            room = hi - lo
            if best is None or room > best[0]:
                best = (room, lo, left)
        room, lo, left = best
        h = min(roi_h, room - 4)
        if h < 2:
            raise ConfigError(f"layer {k} too thin for an ROI")
        signals.append((lo + (room - h) // 2, left, h, roi_w))
    b = config.boundary_row
    bg_h = min(40, (config.height - b) - 8)
    if bg_h < 2:
        raise ConfigError("background region too short for an ROI")
    bg_w = min(4 * roi_w, w - 8)
    background = (b + (config.height - b - bg_h) // 2, (w - bg_w) // 2, bg_h, bg_w)
    return RoiSpec(tuple(signals), background, b)


def phantom_series(base: PhantomConfig, count: int, seed: int):
    """Configs for ``count`` distinct phantoms derived from one root seed."""
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [replace(base, seed=int(s)) for s in seeds]
