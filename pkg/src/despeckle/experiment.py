"""Desk-scale phantom experiments: data generation, training, held-out evaluation, ablation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

from .dataset_prep import ImageSample, build_patchset, write_boundary_manifest, write_image
from .denoiser import denoise_image
from .errors import ConfigError
from .metrics import MetricReport, evaluate_image, summarize, write_roi_config
from .phantom import PhantomConfig, phantom_pair, phantom_rois, phantom_series
from .trainer import Trainer, TrainConfig

log = logging.getLogger(__name__)

ABLATION_VARIANTS = {
    "noise patch loss": dict(noise_loss="on", variant="patch_adversarial"),
    "no noise loss": dict(noise_loss="off", variant="patch_adversarial"),
    "gaussian KL prior": dict(noise_loss="on", variant="gaussian_kl"),
}
ABLATION_COLUMNS = ("CNR", "EPI", "MSR", "ENL")


@dataclass
class PhantomData:
    train_ids: list
    test_ids: list
    clean: dict
    noisy: dict
    boundaries: dict
    rois: dict


def make_phantom_data(base: PhantomConfig, n_train: int, n_test: int, seed: int) -> PhantomData:
    configs = phantom_series(base, n_train + n_test, seed)
    ids = [f"phantom_{i:03d}" for i in range(len(configs))]
    clean, noisy, bounds, rois = {}, {}, {}, {}
    for pid, cfg in zip(ids, configs):
        c, n, b = phantom_pair(cfg)
        clean[pid], noisy[pid], bounds[pid] = c, n, b
        rois[pid] = phantom_rois(cfg)
    return PhantomData(ids[:n_train], ids[n_train:], clean, noisy, bounds, rois)


def write_phantom_data(data: PhantomData, out_dir) -> Path:
    """``noisy/``, ``clean/`` PNG pairs, ``boundaries.csv``, ``rois.tsv``, ``test_ids.txt``."""
    out = Path(out_dir)
    for pid in data.clean:
        write_image(out / "clean" / f"{pid}.png", data.clean[pid])
        write_image(out / "noisy" / f"{pid}.png", data.noisy[pid])
    write_boundary_manifest(out / "boundaries.csv", {f"{pid}.png": b for pid, b in data.boundaries.items()})
    write_roi_config(out / "rois.tsv", data.rois)
    (out / "train_ids.txt").write_text("\n".join(data.train_ids) + "\n", encoding="utf-8")
    (out / "test_ids.txt").write_text("\n".join(data.test_ids) + "\n", encoding="utf-8")
    return out


def phantom_patchset(data: PhantomData, patch_size: int, stride: int, noise_stride: int, out_dir=None):
    """Unpaired split of the training phantoms: first half noisy, second half clean."""
    ids = sorted(data.train_ids)
    half = len(ids) // 2
    if half == 0:
        raise ConfigError("need at least two training phantoms for an unpaired split")
    noisy = [ImageSample(i, data.noisy[i], data.boundaries[i], "noisy") for i in ids[:half]]
    clean = [ImageSample(i, data.clean[i], None, "clean") for i in ids[half:]]
    return build_patchset(noisy, clean, patch_size, stride, noise_stride, out_dir)


def evaluate_model(nets, data: PhantomData, ids: Optional[Sequence[str]] = None):
    ids = list(ids or data.test_ids)
    reports, noisy_reports, outputs = [], [], {}
    for pid in ids:
        den = denoise_image(nets, data.noisy[pid])
        outputs[pid] = den
        reports.append(evaluate_image(pid, den, data.noisy[pid], data.rois[pid]))
        noisy_reports.append(evaluate_image(pid, data.noisy[pid], data.noisy[pid], data.rois[pid]))
    return reports, noisy_reports, outputs


@dataclass
class RunResult:
    config: TrainConfig
    denoised: list        # MetricReport per held-out image
    noisy: list
    outputs: dict
    steps: int
    trainer: Trainer


def run_phantom_training(data: PhantomData, config: TrainConfig, patch_size: int = 64, stride: int = 16,
                         noise_stride: int = 64, out_dir=None, patchset=None, progress=None) -> RunResult:
    ps = patchset if patchset is not None else phantom_patchset(data, patch_size, stride, noise_stride)
    tr = Trainer(config)
    tr.train(ps, out_dir=out_dir, progress=progress)
    den, noisy, outputs = evaluate_model(tr.nets, data)
    return RunResult(config, den, noisy, outputs, tr.global_step, tr)


def end_to_end_checks(result: RunResult, enl_factor: float = 5.0, min_epi: float = 0.6) -> dict:
    """Per held-out image: ENL gain, EPI floor, and CNR improvement."""
    checks = {}
    for d, n in zip(result.denoised, result.noisy):
        enl_ok = d.enl is not None and n.enl is not None and d.enl >= enl_factor * n.enl
        epi_ok = d.epi is not None and d.epi >= min_epi
        cnr_ok = d.cnr is not None and n.cnr is not None and d.cnr > n.cnr
        checks[d.image_id] = {"enl": enl_ok, "epi": epi_ok, "cnr": cnr_ok,
                              "values": {"ENL": (d.enl, n.enl), "EPI": d.epi, "CNR": (d.cnr, n.cnr)}}
    return checks


def means(reports: Sequence[MetricReport]) -> dict:
    return summarize(reports).means


def ablate(data: PhantomData, base: TrainConfig, patch_size: int = 64, stride: int = 16, noise_stride: int = 64,
           out_dir=None, variants: Optional[dict] = None) -> dict:
    """Train each noise-constraint variant with the same seed/data; returns method -> metric means."""
    variants = variants or ABLATION_VARIANTS
    ps = phantom_patchset(data, patch_size, stride, noise_stride)
    table = {}
    for name, flags in variants.items():
        cfg = replace(base, **flags)
        sub = None if out_dir is None else Path(out_dir) / _slug(name)
        res = run_phantom_training(data, cfg, patchset=ps, out_dir=sub)
        table[name] = means(res.denoised)
        log.info("%s: %s", name, table[name])
    return table


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name.lower()).strip("_")


def format_table(table: dict, columns=ABLATION_COLUMNS, label: str = "method") -> str:
    lines = ["\t".join((label,) + tuple(columns))]
    for name, row in table.items():
        lines.append("\t".join([name] + ["NA" if row.get(c) is None else f"{row[c]:.4f}" for c in columns]))
    return "\n".join(lines) + "\n"
