"""Min-max optimization over unpaired (noisy, clean, noise-patch) batches.

Each step runs the translation graph once, updates the three discriminators
on detached fakes, then updates the encoders and generators jointly on the
weighted generator objective against the freshly updated discriminators.

Second-pass (cycle) wiring: ``x_cycle = G_N(E_C(x_clean), E_N(y_noisy))`` and
``y_cycle = G_C(E_C(y_noisy))``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .dataset_prep import PatchSet
from .errors import ConfigError, DimensionError, NumericError
from .losses import (LossReport, LossWeights, TranslationBundle, cycle_loss, discriminator_loss,
                     generator_loss, kl_noise_loss, noise_adversarial_loss, reconstruction_loss,
                     total_objective)
from .networks import DisentangleNets, NetworkConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "despeckle-checkpoint/1"
LOG_COLUMNS = ("step", "epoch") + LossReport.TERM_ORDER + ("total_G", "total_D")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    noise_loss: str = "on"
    variant: str = "patch_adversarial"
    center_residuals: bool = True
    checkpoint_every: int = 0       # epochs; 0 keeps only the final checkpoint
    sample_every: int = 1           # epochs between sample grids; 0 disables
    max_steps: int = 0              # optional step budget; 0 means epochs alone decide
    weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.noise_loss not in ("on", "off"):
            raise ConfigError(f"noise_loss must be 'on' or 'off', got {self.noise_loss!r}")
        if self.variant not in ("patch_adversarial", "gaussian_kl"):
            raise ConfigError(f"variant must be 'patch_adversarial' or 'gaussian_kl', got {self.variant!r}")
        if self.noise_loss == "off" and self.variant == "gaussian_kl":
            raise ConfigError("noise_loss=off contradicts variant=gaussian_kl")

    @property
    def noise_mode(self) -> Optional[str]:
        if self.noise_loss == "off":
            return None
        return "patch" if self.variant == "patch_adversarial" else "gaussian"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["network"] = NetworkConfig(**d.get("network", {}))
        return cls(**d)


def build_translation_bundle(x, y, n, nets: DisentangleNets, sample_noise: bool = True,
                             generator: Optional[torch.Generator] = None) -> TranslationBundle:
    if x.shape != y.shape:
        raise DimensionError(f"translation: noisy batch {tuple(x.shape)} and clean batch {tuple(y.shape)} differ")
    if n is not None and n.shape != x.shape:
        raise DimensionError(f"translation: noise batch {tuple(n.shape)} does not match noisy batch {tuple(x.shape)}")
    ec, en, gc, gn = nets.content_encoder, nets.noise_encoder, nets.clean_generator, nets.noisy_generator

    fc_x, skips_x = ec(x)
    fn_x, stats = nets.encode_noise(x, sample_noise, generator)
    fc_y, skips_y = ec(y)
    x_clean = gc(fc_x, skips_x)
    y_noisy = gn(fc_y, fn_x)
    x_recon = gn(fc_x, fn_x)
    y_recon = gc(fc_y, skips_y)

    fc_xc, _ = ec(x_clean)
    fn_yn, _ = nets.encode_noise(y_noisy, sample_noise, generator)
    fc_yn, skips_yn = ec(y_noisy)
    x_cycle = gn(fc_xc, fn_yn)
    y_cycle = gc(fc_yn, skips_yn)
    return TranslationBundle(x, y, x_clean, y_noisy, x_recon, y_recon, x_cycle, y_cycle, n, stats)


class Trainer:
    def __init__(self, config: TrainConfig, device: str = "cpu"):
        self.config = config
        self.device = torch.device(device)
        torch.manual_seed(config.seed)
        self.nets = DisentangleNets(config.network, config.noise_mode).to(self.device)
        betas = (config.adam_beta1, config.adam_beta2)
        self.opt_g = torch.optim.Adam(list(self.nets.generator_parameters()), lr=config.lr, betas=betas)
        self.opt_d = torch.optim.Adam(list(self.nets.discriminator_parameters()), lr=config.lr, betas=betas)
        self.rng = np.random.default_rng(config.seed)
        # private stream for reparameterization noise, independent of the global torch RNG
        self.torch_gen = torch.Generator(device=self.device).manual_seed(config.seed)
        self.epoch = 0
        self.global_step = 0
        self.last_bundle: Optional[TranslationBundle] = None

    # -- single step ---------------------------------------------------------
    def _batch(self, arr) -> torch.Tensor:
        t = torch.as_tensor(np.asarray(arr, dtype=np.float32))
        if t.dim() == 3:
            t = t[:, None]
        return t.to(self.device)

    def train_step(self, x, y, n=None) -> LossReport:
        cfg = self.config
        mode = cfg.noise_mode
        x, y = self._batch(x), self._batch(y)
        n = self._batch(n) if n is not None else None
        if mode == "patch" and n is None:
            raise ConfigError("noise_loss=on with the patch variant needs a noise-patch batch")
        nets = self.nets
        nets.train()
        bundle = build_translation_bundle(x, y, n if mode == "patch" else None, nets, generator=self.torch_gen)

        # discriminators, on detached fakes
        self.opt_d.zero_grad(set_to_none=True)
        d_terms = {"adv_clean_d": discriminator_loss(nets.d_clean, bundle.y, bundle.x_clean, "adv_clean_d"),
                   "adv_noisy_d": discriminator_loss(nets.d_noisy, bundle.x, bundle.y_noisy, "adv_noisy_d")}
        if mode == "patch":
            d_terms["noise_d"], _ = noise_adversarial_loss(nets.d_noise, bundle, cfg.center_residuals, part="d")
        for k, v in d_terms.items():
            if not torch.isfinite(v):
                raise NumericError(f"non-finite loss term {k!r} at step {self.global_step}")
        sum(d_terms.values()).backward()
        self.opt_d.step()

        # encoders and generators, against the updated discriminators
        self.opt_g.zero_grad(set_to_none=True)
        g_terms = {"adv_clean_g": generator_loss(nets.d_clean, bundle.y, bundle.x_clean, "adv_clean_g"),
                   "adv_noisy_g": generator_loss(nets.d_noisy, bundle.x, bundle.y_noisy, "adv_noisy_g"),
                   "cycle": cycle_loss(bundle), "recon": reconstruction_loss(bundle)}
        if mode == "patch":
            _, g_terms["noise_g"] = noise_adversarial_loss(nets.d_noise, bundle, cfg.center_residuals, part="g")
        elif mode == "gaussian":
            g_terms["kl"] = kl_noise_loss(*bundle.noise_stats)
        total_g, _, report = total_objective({**g_terms, **{k: v.detach() for k, v in d_terms.items()}},
                                             cfg.weights, mode)
        total_g.backward()
        # generator backward also reaches discriminator weights; those grads are discarded
        for p in nets.discriminator_parameters():
            p.grad = None
        self.opt_g.step()

        self.global_step += 1
        self.last_bundle = bundle
        return report

    # -- full loop -----------------------------------------------------------
    def steps_per_epoch(self, patchset: PatchSet) -> int:
        return min(len(patchset.noisy_patches), len(patchset.clean_patches)) // self.config.batch_size

    def _check_patchset(self, patchset: PatchSet):
        if len(patchset.noisy_patches) == 0 or len(patchset.clean_patches) == 0:
            raise ConfigError("noisy and clean patch populations must be nonempty")
        if self.config.noise_mode == "patch" and len(patchset.noise_patches) == 0:
            raise ConfigError("noise patch population is empty but noise_loss=on")
        if self.steps_per_epoch(patchset) == 0:
            raise ConfigError(f"fewer patches than batch_size={self.config.batch_size}")

    def epoch_batches(self, patchset: PatchSet):
        """Index triples for one epoch; each population is shuffled independently."""
        bs = self.config.batch_size
        perm_x = self.rng.permutation(len(patchset.noisy_patches))
        perm_y = self.rng.permutation(len(patchset.clean_patches))
        for s in range(self.steps_per_epoch(patchset)):
            ix = perm_x[s * bs:(s + 1) * bs]
            iy = perm_y[s * bs:(s + 1) * bs]
            inn = self.rng.integers(len(patchset.noise_patches), size=bs) if self.config.noise_mode == "patch" else None
            yield ix, iy, inn

    def train(self, patchset: PatchSet, out_dir=None, epochs: Optional[int] = None, progress=None,
              provenance: Optional[dict] = None) -> list[LossReport]:
        """Train until ``epochs`` (default: the configured count) epochs are complete
        or the ``max_steps`` budget is spent, whichever comes first.

        With ``out_dir`` set, writes ``train_log.tsv``, ``checkpoint_eXXXX.pt``
        at the configured cadence, ``checkpoint_final.pt`` and sample grids.
        """
        self._check_patchset(patchset)
        target = self.config.epochs if epochs is None else epochs
        out = Path(out_dir) if out_dir is not None else None
        writer = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log_path = out / "train_log.tsv"
            fresh = self.global_step == 0 or not log_path.exists()
            fh = open(log_path, "w" if fresh else "a", newline="", encoding="utf-8")
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            if fresh:
                writer.writerow(LOG_COLUMNS)
        reports = []
        budget = self.config.max_steps
        try:
            while self.epoch < target and not (budget and self.global_step >= budget):
                for ix, iy, inn in self.epoch_batches(patchset):
                    if budget and self.global_step >= budget:
                        break
                    n = patchset.noise_patches[inn] if inn is not None else None
                    try:
                        rep = self.train_step(patchset.noisy_patches[ix], patchset.clean_patches[iy], n)
                    except NumericError:
                        log.error("aborting at step %d; last checkpoint kept", self.global_step)
                        raise
                    reports.append(rep)
                    if writer is not None:
                        row = rep.row()
                        writer.writerow([self.global_step, self.epoch] + [f"{row[c]:.8g}" for c in LOG_COLUMNS[2:]])
                    if progress is not None:
                        progress(self, rep)
                self.epoch += 1
                if out is not None:
                    every = self.config.checkpoint_every
                    if every and self.epoch % every == 0:
                        self.save_checkpoint(out / f"checkpoint_e{self.epoch:04d}.pt")
                    if self.config.sample_every and self.epoch % self.config.sample_every == 0 and self.last_bundle is not None:
                        from .plotting import save_sample_grid
                        save_sample_grid(self.last_bundle, out / f"samples_e{self.epoch:04d}.png")
            if out is not None:
                self.save_checkpoint(out / "checkpoint_final.pt", provenance)
        finally:
            if writer is not None:
                fh.close()
        return reports

    # -- checkpoints ---------------------------------------------------------
    def state_dict(self, provenance: Optional[dict] = None) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "train_config": self.config.to_dict(),
            "network_config": self.config.network.to_dict(),
            "noise_head": self.nets.noise_head,
            "nets": self.nets.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "numpy_rng": self.rng.bit_generator.state,
            "torch_rng": self.torch_gen.get_state(),
            "provenance": provenance or {},
        }

    def save_checkpoint(self, path, provenance: Optional[dict] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state_dict(provenance), tmp)
        tmp.replace(path)
        return path

    @classmethod
    def from_checkpoint(cls, path, device: str = "cpu", **overrides) -> "Trainer":
        """Rebuild a trainer exactly as saved; ``overrides`` replace TrainConfig fields (e.g. ``epochs``)."""
        state = load_checkpoint(path, device)
        config = TrainConfig.from_dict(state["train_config"])
        if overrides:
            config = replace(config, **overrides)
        tr = cls(config, device)
        tr.load_state(state)
        return tr

    def load_state(self, state: dict) -> None:
        self.nets.load_state_dict(state["nets"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.epoch = int(state["epoch"])
        self.global_step = int(state["global_step"])
        self.rng.bit_generator.state = state["numpy_rng"]
        self.torch_gen.set_state(state["torch_rng"])


def load_checkpoint(path, device: str = "cpu") -> dict:
    state = torch.load(path, map_location=device, weights_only=True)
    if state.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {state.get('format')!r}")
    return state
