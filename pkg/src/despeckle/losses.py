"""Training objective terms.

Adversarial terms use binary cross-entropy on clamped probabilities.  The
discriminator loss is ``-log D(real) - log(1 - D(fake))``; the generator
side uses the non-saturating form ``-log D(real) - log D(fake)`` where the
real term carries no generator gradient.  Both equal ``log 4`` when the
discriminator answers 0.5 everywhere.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import torch

from .errors import ConfigError, DimensionError, NumericError

PROB_CLAMP = 1e-7


@dataclass
class TranslationBundle:
    x: torch.Tensor
    y: torch.Tensor
    x_clean: torch.Tensor
    y_noisy: torch.Tensor
    x_recon: torch.Tensor
    y_recon: torch.Tensor
    x_cycle: torch.Tensor
    y_cycle: torch.Tensor
    n: Optional[torch.Tensor] = None
    noise_stats: Optional[tuple] = None   # (mean, logvar) from the Gaussian head

    def images(self) -> dict:
        return {k: getattr(self, k) for k in ("x", "y", "x_clean", "y_noisy", "x_recon", "y_recon", "x_cycle", "y_cycle")}


@dataclass(frozen=True)
class LossWeights:
    lambda_cycle: float = 10.0
    lambda_recon: float = 10.0
    lambda_noise: float = 1.0
    lambda_domain_adv: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ConfigError(f"{k} must be >= 0, got {v}")


@dataclass
class LossReport:
    terms: dict = field(default_factory=dict)
    total_g: float = 0.0
    total_d: float = 0.0
    active: tuple = ()

    TERM_ORDER = ("adv_clean_g", "adv_noisy_g", "cycle", "recon", "noise_g", "kl",
                  "adv_clean_d", "adv_noisy_d", "noise_d")

    def row(self) -> dict:
        out = {k: self.terms.get(k, float("nan")) for k in self.TERM_ORDER}
        out["total_G"] = self.total_g
        out["total_D"] = self.total_d
        return out


def bce_real(logits: torch.Tensor) -> torch.Tensor:
    p = torch.sigmoid(logits).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -torch.log(p).mean()


def bce_fake(logits: torch.Tensor) -> torch.Tensor:
    p = torch.sigmoid(logits).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -torch.log1p(-p).mean()


def _check_finite(name: str, *tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite discriminator logits in {name}")


def discriminator_loss(disc: Callable, real: torch.Tensor, fake: torch.Tensor, name: str = "adversarial") -> torch.Tensor:
    real_logits = disc(real)
    fake_logits = disc(fake.detach())
    _check_finite(name, real_logits, fake_logits)
    return bce_real(real_logits) + bce_fake(fake_logits)


def generator_loss(disc: Callable, real: torch.Tensor, fake: torch.Tensor, name: str = "adversarial") -> torch.Tensor:
    with torch.no_grad():
        real_logits = disc(real)
    fake_logits = disc(fake)
    _check_finite(name, real_logits, fake_logits)
    return bce_real(real_logits) + bce_real(fake_logits)


def adversarial_pair(disc: Callable, real: torch.Tensor, fake: torch.Tensor, name: str = "adversarial", part: str = "both"):
    """``(discriminator_loss, generator_loss)`` for one real/fake pairing.

    The discriminator loss sees ``fake`` detached; the generator loss routes
    gradients through ``fake`` only.  ``part="d"`` or ``"g"`` computes one
    side and returns ``None`` for the other.
    """
    if part not in ("both", "d", "g"):
        raise ValueError(f"part must be 'both', 'd' or 'g', got {part!r}")
    d = discriminator_loss(disc, real, fake, name) if part in ("both", "d") else None
    g = generator_loss(disc, real, fake, name) if part in ("both", "g") else None
    return d, g


def domain_adversarial_losses(d_clean: Callable, d_noisy: Callable, bundle: TranslationBundle, part: str = "both"):
    """Returns ``{"adv_clean": (d, g), "adv_noisy": (d, g)}``."""
    return {"adv_clean": adversarial_pair(d_clean, bundle.y, bundle.x_clean, "clean-domain adversarial loss", part),
            "adv_noisy": adversarial_pair(d_noisy, bundle.x, bundle.y_noisy, "noisy-domain adversarial loss", part)}


def _l1_pair(a, a_hat, b, b_hat, name):
    if a.shape != a_hat.shape or b.shape != b_hat.shape:
        raise DimensionError(f"{name}: shape mismatch {tuple(a.shape)}/{tuple(a_hat.shape)}, {tuple(b.shape)}/{tuple(b_hat.shape)}")
    return (a - a_hat).abs().mean() + (b - b_hat).abs().mean()


def cycle_loss(bundle: TranslationBundle) -> torch.Tensor:
    return _l1_pair(bundle.x, bundle.x_cycle, bundle.y, bundle.y_cycle, "cycle loss")


def reconstruction_loss(bundle: TranslationBundle) -> torch.Tensor:
    return _l1_pair(bundle.x, bundle.x_recon, bundle.y, bundle.y_recon, "reconstruction loss")


def center(t: torch.Tensor) -> torch.Tensor:
    return t - t.mean(dim=(2, 3), keepdim=True)


def estimated_noise(bundle: TranslationBundle) -> tuple[torch.Tensor, torch.Tensor]:
    """Noise removed from ``x`` and noise injected into ``y``."""
    return bundle.x - bundle.x_clean, bundle.y_noisy - bundle.y


def noise_adversarial_loss(d_noise: Callable, bundle: TranslationBundle, center_residuals: bool = True,
                           part: str = "both"):
    """Noise patches are "real", both residual estimates are "fake"; sub-losses weighted equally.

    Returns ``(d_loss, g_loss)`` summed over the two residuals.
    """
    if bundle.n is None:
        raise ConfigError("noise-patch loss requested but no noise patches were supplied")
    n = bundle.n
    res_x, res_y = estimated_noise(bundle)
    if center_residuals:
        n, res_x, res_y = center(n), center(res_x), center(res_y)
    dx, gx = adversarial_pair(d_noise, n, res_x, "noise loss (x residual)", part)
    dy, gy = adversarial_pair(d_noise, n, res_y, "noise loss (y residual)", part)
    return (None if dx is None else dx + dy), (None if gx is None else gx + gy)


def kl_noise_loss(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """``KL(N(mean, exp(logvar)) || N(0, 1))`` summed over code dims, averaged over the batch."""
    kl = 0.5 * (mean.pow(2) + logvar.exp() - logvar - 1.0)
    return kl.sum(dim=1).mean()


def total_objective(terms: dict, weights: LossWeights, noise_mode: Optional[str]) -> tuple[torch.Tensor, torch.Tensor, LossReport]:
    """Weighted generator total, discriminator total, and a scalar report.

    ``terms`` holds tensors keyed by ``adv_clean_g``, ``adv_noisy_g``,
    ``cycle``, ``recon``, ``adv_clean_d``, ``adv_noisy_d`` and, depending on
    ``noise_mode`` (``"patch"``, ``"gaussian"`` or ``None``), ``noise_g`` /
    ``noise_d`` or ``kl``.
    """
    g_parts = [("adv_clean_g", weights.lambda_domain_adv), ("adv_noisy_g", weights.lambda_domain_adv),
               ("cycle", weights.lambda_cycle), ("recon", weights.lambda_recon)]
    d_parts = ["adv_clean_d", "adv_noisy_d"]
    if noise_mode == "patch":
        g_parts.append(("noise_g", weights.lambda_noise))
        d_parts.append("noise_d")
    elif noise_mode == "gaussian":
        g_parts.append(("kl", weights.lambda_noise))
    elif noise_mode is not None:
        raise ConfigError(f"unknown noise mode {noise_mode!r}")

    active = tuple(k for k, _ in g_parts) + tuple(d_parts)
    missing = [k for k in active if k not in terms]
    if missing:
        raise ConfigError(f"loss terms not computed: {', '.join(missing)}")
    values = {}
    for k in active:
        v = float(terms[k].detach()) if torch.is_tensor(terms[k]) else float(terms[k])
        if not math.isfinite(v):
            raise NumericError(f"non-finite loss term {k!r}")
        values[k] = v

    total_g = sum(w * terms[k] for k, w in g_parts)
    total_d = sum(terms[k] for k in d_parts)
    report = LossReport(values, sum(w * values[k] for k, w in g_parts), sum(values[k] for k in d_parts), active)
    return total_g, total_d, report
